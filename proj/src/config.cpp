#include "config.hpp"

#include <functional>
#include <sstream>
#include <vector>

#include "errors.hpp"
#include "json.hpp"

namespace mvtk::config {

namespace {

using nlohmann::json;

struct Field {
    std::string key;
    std::string type;  // int | uint | double | bool | string
    std::string doc;
    std::function<json(const CliConfig&)> get;
    std::function<void(CliConfig&, const json&)> set;
};

void check_type(const Field& f, bool ok) {
    if (!ok) throw ConfigError("config key '" + f.key + "' must be a " + f.type);
}

Field fint(const std::string& key, const std::string& doc,
           const std::function<int&(CliConfig&)>& ref) {
    Field f{key, "int", doc, nullptr, nullptr};
    f.get = [ref](const CliConfig& c) { return json(ref(const_cast<CliConfig&>(c))); };
    f.set = [ref, f](CliConfig& c, const json& v) {
        check_type(f, v.is_number_integer());
        ref(c) = v.get<int>();
    };
    return f;
}

Field fuint(const std::string& key, const std::string& doc,
            const std::function<std::uint64_t&(CliConfig&)>& ref) {
    Field f{key, "uint", doc, nullptr, nullptr};
    f.get = [ref](const CliConfig& c) { return json(ref(const_cast<CliConfig&>(c))); };
    f.set = [ref, f](CliConfig& c, const json& v) {
        check_type(f, v.is_number_integer() &&
                          (v.is_number_unsigned() || v.get<std::int64_t>() >= 0));
        ref(c) = v.get<std::uint64_t>();
    };
    return f;
}

Field fdouble(const std::string& key, const std::string& doc,
              const std::function<double&(CliConfig&)>& ref) {
    Field f{key, "double", doc, nullptr, nullptr};
    f.get = [ref](const CliConfig& c) { return json(ref(const_cast<CliConfig&>(c))); };
    f.set = [ref, f](CliConfig& c, const json& v) {
        check_type(f, v.is_number());
        ref(c) = v.get<double>();
    };
    return f;
}

Field fbool(const std::string& key, const std::string& doc,
            const std::function<bool&(CliConfig&)>& ref) {
    Field f{key, "bool", doc, nullptr, nullptr};
    f.get = [ref](const CliConfig& c) { return json(ref(const_cast<CliConfig&>(c))); };
    f.set = [ref, f](CliConfig& c, const json& v) {
        check_type(f, v.is_boolean());
        ref(c) = v.get<bool>();
    };
    return f;
}

Field fstring(const std::string& key, const std::string& doc,
              const std::function<std::string&(CliConfig&)>& ref) {
    Field f{key, "string", doc, nullptr, nullptr};
    f.get = [ref](const CliConfig& c) { return json(ref(const_cast<CliConfig&>(c))); };
    f.set = [ref, f](CliConfig& c, const json& v) {
        check_type(f, v.is_string());
        ref(c) = v.get<std::string>();
    };
    return f;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> t;
        auto I = [](int CliConfig::* m) {
            return [m](CliConfig& c) -> int& { return c.*m; };
        };
        // pipeline shape
        t.push_back(fint("view_count", "test views rendered around each subject",
                         [](CliConfig& c) -> int& { return c.pipe.view_count; }));
        t.push_back(fint("batch_views", "views edited jointly per inference batch",
                         [](CliConfig& c) -> int& { return c.pipe.batch_views; }));
        t.push_back(fint("train_views", "joint views per stage-2 training step",
                         [](CliConfig& c) -> int& { return c.pipe.train_views; }));
        t.push_back(fint("ddim_steps", "sampler steps per edited view",
                         [](CliConfig& c) -> int& { return c.pipe.ddim_steps; }));
        t.push_back(fdouble("z_star", "view-discard z-score threshold",
                            [](CliConfig& c) -> double& { return c.pipe.z_star; }));
        // reconstruction
        t.push_back(fint("fit_gaussians", "gaussians in fitted clouds",
                         [](CliConfig& c) -> int& { return c.pipe.fit_gaussians; }));
        t.push_back(fint("fit_iters", "descent iterations per cloud fit",
                         [](CliConfig& c) -> int& { return c.pipe.fit_iters; }));
        t.push_back(fdouble("fit_lr", "cloud fit learning rate",
                            [](CliConfig& c) -> double& { return c.pipe.fit_lr; }));
        t.push_back(fdouble("lambda_blur", "screen-space covariance regularizer, px^2",
                            [](CliConfig& c) -> double& {
                                return c.pipe.render_settings.lambda_blur;
                            }));
        t.push_back(fdouble("truncation_sigma", "gaussian footprint cutoff in sigmas",
                            [](CliConfig& c) -> double& {
                                return c.pipe.render_settings.truncation_sigma;
                            }));
        t.push_back(fdouble("near_plane", "camera-space depth cutoff",
                            [](CliConfig& c) -> double& {
                                return c.pipe.render_settings.near_plane;
                            }));
        // denoiser
        t.push_back(fint("blocks", "denoiser block count",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.blocks; }));
        t.push_back(fint("timesteps", "diffusion schedule length",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.timesteps; }));
        t.push_back(fint("patch", "space-to-depth patch size",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.patch; }));
        t.push_back(fint("image_channels", "channels of images entering the latent space",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.image_channels; }));
        t.push_back(fint("cond_dim", "garment embedding width",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.cond_dim; }));
        t.push_back(fint("cond_hidden", "camera-token MLP hidden width",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.cond_hidden; }));
        t.push_back(fint("freq_count", "camera rotation encoding frequencies",
                         [](CliConfig& c) -> int& { return c.pipe.denoiser.freq_count; }));
        t.push_back(fuint("embed_seed", "seed of the garment embedder",
                          [](CliConfig& c) -> std::uint64_t& {
                              return c.pipe.denoiser.embed_seed;
                          }));
        // dataset geometry
        t.push_back(fint("width", "render width in pixels",
                         [](CliConfig& c) -> int& { return c.pipe.dataset.width; }));
        t.push_back(fint("height", "render height in pixels",
                         [](CliConfig& c) -> int& { return c.pipe.dataset.height; }));
        t.push_back(fdouble("focal", "pinhole focal length in pixels",
                            [](CliConfig& c) -> double& { return c.pipe.dataset.focal; }));
        t.push_back(fdouble("orbit_radius", "camera orbit radius",
                            [](CliConfig& c) -> double& {
                                return c.pipe.dataset.orbit_radius;
                            }));
        t.push_back(fdouble("elevation", "camera orbit elevation in radians",
                            [](CliConfig& c) -> double& {
                                return c.pipe.dataset.elevation;
                            }));
        t.push_back(fint("garment_size", "garment image side length in pixels",
                         [](CliConfig& c) -> int& { return c.pipe.dataset.garment_size; }));
        t.push_back(fint("dilate_px", "agnostic mask dilation radius in pixels",
                         [](CliConfig& c) -> int& { return c.pipe.dataset.dilate_px; }));
        t.push_back(fuint("seed", "global seed for every stage",
                          [](CliConfig& c) -> std::uint64_t& { return c.pipe.seed; }));
        // paths
        t.push_back(fstring("dataset_dir", "dataset directory",
                            [](CliConfig& c) -> std::string& { return c.dataset_dir; }));
        t.push_back(fstring("checkpoint", "model checkpoint path",
                            [](CliConfig& c) -> std::string& { return c.checkpoint; }));
        t.push_back(fstring("out_dir", "output directory for stage artifacts",
                            [](CliConfig& c) -> std::string& { return c.out_dir; }));
        // stage knobs
        t.push_back(fint("subjects", "subjects to synthesize", I(&CliConfig::subjects)));
        t.push_back(fint("views_per_subject", "captured views per subject",
                         I(&CliConfig::views_per_subject)));
        t.push_back(fint("stage1_steps", "single-view training steps",
                         I(&CliConfig::stage1_steps)));
        t.push_back(fint("stage2_steps", "joint multi-view training steps",
                         I(&CliConfig::stage2_steps)));
        t.push_back(fdouble("lr", "training learning rate",
                            [](CliConfig& c) -> double& { return c.lr; }));
        t.push_back(fbool("resume", "continue training from the checkpoint",
                          [](CliConfig& c) -> bool& { return c.resume; }));
        t.push_back(fint("subject_index", "dataset subject targeted by edit stages",
                         I(&CliConfig::subject_index)));
        t.push_back(fint("turntable_frames", "frames in the turntable export",
                         I(&CliConfig::turntable_frames)));
        return t;
    }();
    return table;
}

const Field& find_field(const std::string& key) {
    for (const Field& f : fields())
        if (f.key == key) return f;
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void CliConfig::validate() const {
    try {
        pipe.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (subjects < 1) throw ConfigError("config: subjects must be positive");
    if (views_per_subject < 1) throw ConfigError("config: views_per_subject must be positive");
    if (stage1_steps < 0 || stage2_steps < 0)
        throw ConfigError("config: training step counts cannot be negative");
    if (lr < 0.0) throw ConfigError("config: lr cannot be negative");
    if (subject_index < 0) throw ConfigError("config: subject_index cannot be negative");
    if (turntable_frames < 1) throw ConfigError("config: turntable_frames must be positive");
    if (dataset_dir.empty() || checkpoint.empty() || out_dir.empty())
        throw ConfigError("config: paths cannot be empty");
}

CliConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    CliConfig cfg;
    for (const auto& [key, value] : j.items()) find_field(key).set(cfg, value);
    return cfg;
}

std::string config_to_json(const CliConfig& cfg) {
    json j;
    for (const Field& f : fields()) j[f.key] = f.get(cfg);
    return j.dump(2);
}

void apply_override(CliConfig* cfg, const std::string& key, const std::string& value) {
    const Field& f = find_field(key);
    try {
        std::size_t pos = 0;
        if (f.type == "int") {
            int v = std::stoi(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            f.set(*cfg, json(v));
        } else if (f.type == "uint") {
            if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
            std::uint64_t v = std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            f.set(*cfg, json(v));
        } else if (f.type == "double") {
            double v = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            f.set(*cfg, json(v));
        } else if (f.type == "bool") {
            if (value == "true" || value == "1")
                f.set(*cfg, json(true));
            else if (value == "false" || value == "0")
                f.set(*cfg, json(false));
            else
                throw ConfigError("config key '" + key + "' expects true/false");
        } else
            f.set(*cfg, json(value));
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " +
                          f.type);
    }
}

std::string config_schema_json() {
    CliConfig defaults;
    json arr = json::array();
    for (const Field& f : fields())
        arr.push_back({{"key", f.key},
                       {"type", f.type},
                       {"default", f.get(defaults)},
                       {"doc", f.doc}});
    return arr.dump(2);
}

std::string config_help_text() {
    CliConfig defaults;
    std::ostringstream out;
    for (const Field& f : fields())
        out << "  " << f.key << " (" << f.type << ", default " << f.get(defaults).dump()
            << "): " << f.doc << "\n";
    return out.str();
}

}  // namespace mvtk::config
