#pragma once

#include <string>

#include "pipeline.hpp"

namespace mvtk::config {

// Everything a pipeline stage needs, resolved from defaults, a JSON config
// file, and command-line overrides, in that order.
struct CliConfig {
    pipeline::PipelineConfig pipe;

    std::string dataset_dir = "data";
    std::string checkpoint = "model.ckpt";
    std::string out_dir = "out";

    int subjects = 4;
    int views_per_subject = 8;
    int stage1_steps = 200;
    int stage2_steps = 100;
    double lr = 1e-3;
    bool resume = false;
    int subject_index = 0;
    int turntable_frames = 120;

    void validate() const;  // throws ConfigError on any bad value
};

// Strict parse of the flat JSON schema: unknown keys and wrong value types
// are config errors. Missing keys keep their defaults.
CliConfig config_from_json(const std::string& text);

// Full echo of the effective config; keys sorted, stable formatting.
std::string config_to_json(const CliConfig& cfg);

// Applies one "key=value" style override; the value text is parsed according
// to the key's declared type.
void apply_override(CliConfig* cfg, const std::string& key, const std::string& value);

// JSON array documenting every key: {key, type, default, doc}.
std::string config_schema_json();

// One "key (type, default): doc" line per key, for --help output.
std::string config_help_text();

}  // namespace mvtk::config
