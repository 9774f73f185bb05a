#include "mvtk/mvtk.h"

#include <cstring>
#include <memory>
#include <string>

#include "config.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "json.hpp"
#include "stages.hpp"

using json = nlohmann::json;

namespace {

thread_local std::string g_last_error;

void copy_summary(const std::string& text, char* summary, size_t summary_len) {
    if (summary == nullptr || summary_len == 0) return;
    size_t n = text.size() < summary_len - 1 ? text.size() : summary_len - 1;
    std::memcpy(summary, text.data(), n);
    summary[n] = '\0';
}

using StageFn = std::string (*)(const mvtk::config::CliConfig&);

mvtk_status run_stage(StageFn stage, const char* config_json, char* summary,
                      size_t summary_len) {
    copy_summary("", summary, summary_len);
    try {
        if (config_json == nullptr) throw mvtk::ConfigError("config: null config_json");
        mvtk::config::CliConfig cfg = mvtk::config::config_from_json(config_json);
        copy_summary(stage(cfg), summary, summary_len);
        g_last_error.clear();
        return MVTK_OK;
    } catch (const mvtk::ConfigError& e) {
        g_last_error = e.what();
        return MVTK_ERR_CONFIG;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return MVTK_ERR_RUNTIME;
    }
}

}  // namespace

struct mvtk_model {
    mvtk::diff::ToyDenoiser model;
    std::string info;
};

extern "C" {

const char* mvtk_version(void) { return "0.1.0"; }

const char* mvtk_last_error(void) { return g_last_error.c_str(); }

const char* mvtk_config_schema_json(void) {
    static const std::string schema = mvtk::config::config_schema_json();
    return schema.c_str();
}

const char* mvtk_config_help(void) {
    static const std::string help = mvtk::config::config_help_text();
    return help.c_str();
}

mvtk_status mvtk_synth(const char* config_json, char* summary, size_t summary_len) {
    return run_stage(&mvtk::stages::stage_synth, config_json, summary, summary_len);
}

mvtk_status mvtk_train(const char* config_json, char* summary, size_t summary_len) {
    return run_stage(&mvtk::stages::stage_train, config_json, summary, summary_len);
}

mvtk_status mvtk_edit(const char* config_json, char* summary, size_t summary_len) {
    return run_stage(&mvtk::stages::stage_edit, config_json, summary, summary_len);
}

mvtk_status mvtk_reconstruct(const char* config_json, char* summary, size_t summary_len) {
    return run_stage(&mvtk::stages::stage_reconstruct, config_json, summary, summary_len);
}

mvtk_status mvtk_eval(const char* config_json, char* summary, size_t summary_len) {
    return run_stage(&mvtk::stages::stage_eval, config_json, summary, summary_len);
}

mvtk_status mvtk_turntable(const char* config_json, char* summary, size_t summary_len) {
    return run_stage(&mvtk::stages::stage_turntable, config_json, summary, summary_len);
}

mvtk_status mvtk_model_load(const char* path, mvtk_model** out) {
    if (out == nullptr) {
        g_last_error = "model_load: null output pointer";
        return MVTK_ERR_RUNTIME;
    }
    *out = nullptr;
    try {
        if (path == nullptr) throw std::invalid_argument("model_load: null path");
        auto handle = std::make_unique<mvtk_model>();
        handle->model = mvtk::diff::load_checkpoint(path);

        const mvtk::diff::DenoiserConfig& c = handle->model.config;
        std::size_t tensors = 0, scalars = 0;
        mvtk::diff::for_each_param(handle->model.params,
                                   [&](const std::string&, double*, int rows, int cols) {
                                       ++tensors;
                                       scalars += static_cast<std::size_t>(rows) *
                                                  static_cast<std::size_t>(cols);
                                   });
        json info;
        info["blocks"] = c.blocks;
        info["timesteps"] = c.timesteps;
        info["patch"] = c.patch;
        info["image_channels"] = c.image_channels;
        info["cond_dim"] = c.cond_dim;
        info["cond_hidden"] = c.cond_hidden;
        info["freq_count"] = c.freq_count;
        info["embed_seed"] = c.embed_seed;
        info["optimizer_step"] = handle->model.opt.step;
        info["tensor_count"] = tensors;
        info["parameter_count"] = scalars;
        handle->info = info.dump(2);

        *out = handle.release();
        g_last_error.clear();
        return MVTK_OK;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return MVTK_ERR_RUNTIME;
    }
}

void mvtk_model_free(mvtk_model* model) { delete model; }

const char* mvtk_model_info_json(const mvtk_model* model) {
    return model == nullptr ? "" : model->info.c_str();
}

}  // extern "C"
