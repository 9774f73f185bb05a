#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "camera.hpp"
#include "diffusion.hpp"
#include "image.hpp"
#include "splat.hpp"
#include "synthdata.hpp"

namespace mvtk::pipeline {

struct PipelineConfig {
    int view_count = 32;   // test views orbiting the subject
    int batch_views = 16;  // views edited jointly per inference batch
    int train_views = 8;   // joint views per stage-2 training step
    int ddim_steps = 8;
    double z_star = 1.5;  // view-discard z-score threshold

    int fit_gaussians = 64;
    int fit_iters = 250;
    double fit_lr = 5e-2;

    splat::RenderSettings render_settings;
    diff::DenoiserConfig denoiser;
    synth::DatasetConfig dataset;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EditResult {
    std::vector<Image> edited;        // composited views, rig order
    std::vector<int> kept;            // ascending indices surviving the filter
    splat::GaussianCloud cloud;       // cloud fitted to the kept edited views
    std::vector<double> view_losses;  // per-view fit losses driving the filter
    double clip_cons = 0.0;
    double dino_sim = 0.0;
    std::string report_json;  // metrics, kept list, config echo
};

// Edits every view of the rig with the trained denoiser: views are grouped
// into ceil(n/batch) batches in rig order, each batch is DDIM-sampled jointly
// with a correlation matrix built from that batch's cameras, and all batches
// share the garment conditioning. Initial noise is keyed by the global view
// index, so batch boundaries do not change a view's starting noise.
std::vector<Image> edit_views(const diff::ToyDenoiser& model,
                              const synth::SceneViews& scene_views,
                              const Image& garment_front, const Image& garment_back,
                              const PipelineConfig& cfg);

// (1 - m) * edited + m * original, preserving the masked region. The mask is
// either per-channel or single-channel broadcast; values must lie in [0, 1].
Image composite_preserve(const Image& edited, const Image& original, const Image& mask);

// Kept view indices (ascending) after discarding views whose loss z-score
// under the population statistics strictly exceeds z_star. Zero spread keeps
// everything; at least two views always survive (lowest losses win).
std::vector<int> zscore_filter(const std::vector<double>& losses, double z_star);

// Seeded starting cloud centered on the body; every reconstruction of the
// same scene under the same config begins from this exact cloud.
splat::GaussianCloud initial_cloud(const synth::BodyScene& scene,
                                   const PipelineConfig& cfg);

// Substitutable editing stage: maps (rendered source views, garment pair) to
// edited view images. Tests wire identity and fault-injection editors here.
using EditFn = std::function<std::vector<Image>(
    const synth::SceneViews&, const Image& garment_front, const Image& garment_back)>;

// Full flow: render the rig -> fit a source cloud -> edit -> composite
// face/hair back in -> fit on all edited views for per-view losses ->
// z-score filter -> refit on kept views (warm-started from the source cloud,
// so discarded views cannot influence the final cloud) -> score 120-frame
// turntables of the edited cloud against the source cloud.
EditResult run_vton_with(const synth::BodyScene& scene, const Image& garment_front,
                         const Image& garment_back, const EditFn& editor,
                         const PipelineConfig& cfg);

EditResult run_vton(const synth::BodyScene& scene, const Image& garment_front,
                    const Image& garment_back, const diff::ToyDenoiser& model,
                    const PipelineConfig& cfg);

std::string pipeline_config_to_json(const PipelineConfig& cfg);

}  // namespace mvtk::pipeline
