#pragma once

#include <string>

#include "config.hpp"

namespace mvtk::stages {

// Each stage validates its config, reads earlier artifacts from disk, writes
// its own under fixed paths, and returns a one-line summary. Errors throw;
// ConfigError marks bad input, everything else is a runtime failure. Every
// artifact directory gets a meta.json echoing the effective config, and all
// outputs are byte-deterministic for a fixed config.

// Generates the synthetic dataset into cfg.dataset_dir.
std::string stage_synth(const config::CliConfig& cfg);

// Trains the denoiser on the dataset (single-view stage then joint stage),
// writes cfg.checkpoint, and appends "<step> <loss>" lines to
// out_dir/train_trace.txt (truncated unless resuming).
std::string stage_train(const config::CliConfig& cfg);

// Edits orbit views of one subject toward its target garment and writes
// out_dir/edit/view_%03d.pfm (exact) plus .ppm previews.
std::string stage_edit(const config::CliConfig& cfg);

// Fits a source cloud to re-rendered originals, fits the edited views warm
// from it, discards outlier views, refits, and writes out_dir/recon/
// {cloud_src.gspl, cloud_vton.gspl, meta.json}.
std::string stage_reconstruct(const config::CliConfig& cfg);

// Scores turntable renders of the reconstructed clouds and writes
// out_dir/report.json.
std::string stage_eval(const config::CliConfig& cfg);

// Renders the edited cloud into out_dir/turntable/frame_%03d.ppm.
std::string stage_turntable(const config::CliConfig& cfg);

}  // namespace mvtk::stages
