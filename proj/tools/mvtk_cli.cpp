// Command-line front end for the try-on pipeline. Talks to the core library
// exclusively through the C interface; flag values become typed JSON config
// entries using the library's published schema.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mvtk/mvtk.h"

using json = nlohmann::json;

namespace {

using StageFn = mvtk_status (*)(const char*, char*, size_t);

struct StageSpec {
    const char* name;
    const char* help;
    StageFn fn;
};

const StageSpec kStages[] = {
    {"synth", "generate the synthetic capture dataset", &mvtk_synth},
    {"train", "train the multi-view denoiser on the dataset", &mvtk_train},
    {"edit", "apply the target garment to one subject's views", &mvtk_edit},
    {"reconstruct", "fit clouds to original and edited views", &mvtk_reconstruct},
    {"eval", "score the reconstruction and write the report", &mvtk_eval},
    {"turntable", "render the edited cloud as an orbit sequence", &mvtk_turntable},
};

struct Options {
    std::string config_path;
    std::string seed_text;
    std::string out_dir;
    std::vector<std::string> sets;
};

int config_failure(const std::string& msg) {
    std::fprintf(stderr, "config error: %s\n", msg.c_str());
    return MVTK_ERR_CONFIG;
}

// Parses "key=value" with the value text interpreted per the schema type, so
// the CLI accepts exactly the keys and types the library declares.
bool apply_override(json& cfg, const std::map<std::string, std::string>& types,
                    const std::string& text, std::string* err) {
    std::size_t eq = text.find('=');
    if (eq == std::string::npos) {
        *err = "expected key=value, got \"" + text + "\"";
        return false;
    }
    std::string key = text.substr(0, eq);
    std::string value = text.substr(eq + 1);
    auto it = types.find(key);
    if (it == types.end()) {
        *err = "unknown config key \"" + key + "\"";
        return false;
    }
    const std::string& type = it->second;
    try {
        std::size_t pos = 0;
        if (type == "int") {
            long long v = std::stoll(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            cfg[key] = v;
        } else if (type == "uint") {
            if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
            unsigned long long v = std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            cfg[key] = v;
        } else if (type == "double") {
            double v = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            cfg[key] = v;
        } else if (type == "bool") {
            if (value == "true" || value == "1")
                cfg[key] = true;
            else if (value == "false" || value == "0")
                cfg[key] = false;
            else
                throw std::invalid_argument(value);
        } else {
            cfg[key] = value;
        }
    } catch (const std::exception&) {
        *err = "cannot parse \"" + value + "\" as " + type + " for key \"" + key + "\"";
        return false;
    }
    return true;
}

int run(const StageSpec& stage, const Options& opts) {
    json cfg = json::object();
    if (!opts.config_path.empty()) {
        std::ifstream in(opts.config_path, std::ios::binary);
        if (!in.good()) return config_failure("cannot open " + opts.config_path);
        std::ostringstream buf;
        buf << in.rdbuf();
        try {
            cfg = json::parse(buf.str());
        } catch (const json::exception& e) {
            return config_failure(opts.config_path + ": " + e.what());
        }
        if (!cfg.is_object()) return config_failure(opts.config_path + ": not a JSON object");
    }

    json schema = json::parse(mvtk_config_schema_json());
    std::map<std::string, std::string> types;
    for (const json& field : schema)
        types[field.at("key").get<std::string>()] = field.at("type").get<std::string>();

    std::vector<std::string> overrides;
    if (!opts.seed_text.empty()) overrides.push_back("seed=" + opts.seed_text);
    if (!opts.out_dir.empty()) overrides.push_back("out_dir=" + opts.out_dir);
    overrides.insert(overrides.end(), opts.sets.begin(), opts.sets.end());
    for (const std::string& text : overrides) {
        std::string err;
        if (!apply_override(cfg, types, text, &err)) return config_failure(err);
    }

    char summary[512];
    mvtk_status status = stage.fn(cfg.dump().c_str(), summary, sizeof summary);
    if (status != MVTK_OK) {
        std::fprintf(stderr, "error: %s\n", mvtk_last_error());
        return status;
    }
    std::printf("%s\n", summary);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string("multi-view garment try-on pipeline (") + mvtk_version() + ")"};
    app.require_subcommand(1);
    app.footer(std::string("Config keys (via --set key=value or the --config file):\n") +
               mvtk_config_help());

    Options opts;
    const StageSpec* chosen = nullptr;
    for (const StageSpec& stage : kStages) {
        CLI::App* sub = app.add_subcommand(stage.name, stage.help);
        sub->add_option("--config", opts.config_path, "JSON config file");
        sub->add_option("--seed", opts.seed_text, "override the pipeline seed");
        sub->add_option("--out", opts.out_dir, "override the output directory");
        sub->add_option("--set", opts.sets, "override any config key as key=value");
        sub->callback([&chosen, &stage] { chosen = &stage; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return MVTK_ERR_CONFIG;
    }
    return run(*chosen, opts);
}
