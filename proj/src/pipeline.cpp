#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "errors.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "rng.hpp"

namespace mvtk::pipeline {

void PipelineConfig::validate() const {
    require(view_count >= 1, "pipeline config: need at least one view");
    require(batch_views >= 1, "pipeline config: batch size must be positive");
    require(view_count % batch_views == 0,
            "pipeline config: view count must divide into whole batches");
    require(train_views >= 1, "pipeline config: train views must be positive");
    require(ddim_steps >= 1 && ddim_steps <= denoiser.timesteps,
            "pipeline config: ddim steps must fit the schedule");
    require(z_star > 0.0, "pipeline config: z-score threshold must be positive");
    require(fit_gaussians >= 1 && fit_iters >= 0 && fit_lr >= 0.0,
            "pipeline config: degenerate fit settings");
    require(render_settings.lambda_blur >= 0.0 && render_settings.truncation_sigma > 0.0,
            "pipeline config: degenerate render settings");
    denoiser.validate();
}

std::vector<Image> edit_views(const diff::ToyDenoiser& model,
                              const synth::SceneViews& scene_views,
                              const Image& garment_front, const Image& garment_back,
                              const PipelineConfig& cfg) {
    int n = scene_views.rig.size();
    require(n >= 1 && static_cast<int>(scene_views.views.size()) == n,
            "edit_views: rig and view list disagree");
    require(cfg.batch_views >= 1, "edit_views: batch size must be positive");
    diff::ToyAutoencoder ae{model.config.patch};
    std::vector<Image> out;
    out.reserve(n);
    for (int start = 0; start < n; start += cfg.batch_views) {
        int count = std::min(cfg.batch_views, n - start);
        std::vector<Image> normals, agnostics;
        camera::ViewRig rig;
        rig.intrinsics = scene_views.rig.intrinsics;
        std::vector<std::uint64_t> keys;
        for (int j = 0; j < count; ++j) {
            const synth::ViewImages& v = scene_views.views[start + j];
            normals.push_back(v.normal);
            agnostics.push_back(v.agnostic);
            rig.views.push_back(scene_views.rig.views[start + j]);
            keys.push_back(static_cast<std::uint64_t>(start + j));
        }
        diff::ConditioningBundle cond = diff::make_conditioning(
            normals, agnostics, garment_front, garment_back, rig, model.config);
        std::vector<diff::LatentImage> z =
            diff::ddim_sample(model, cond, cfg.ddim_steps, cfg.seed, &keys);
        for (int j = 0; j < count; ++j) {
            Image img = ae.decode(z[j]);
            for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
            out.push_back(std::move(img));
        }
    }
    return out;
}

Image composite_preserve(const Image& edited, const Image& original, const Image& mask) {
    require(edited.same_shape(original), "composite: edited/original shape mismatch");
    bool broadcast = mask.channels == 1;
    require((broadcast || mask.channels == edited.channels) &&
                mask.height == edited.height && mask.width == edited.width,
            "composite: mask shape mismatch");
    for (double v : mask.data)
        require(v >= 0.0 && v <= 1.0, "composite: mask values must lie in [0, 1]");
    Image out = edited;
    for (int c = 0; c < out.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                double m = mask.at(broadcast ? 0 : c, y, x);
                // exact copies at the binary extremes keep preserved pixels
                // bit-identical to the source image
                if (m == 1.0)
                    out.at(c, y, x) = original.at(c, y, x);
                else if (m != 0.0)
                    out.at(c, y, x) =
                        (1.0 - m) * edited.at(c, y, x) + m * original.at(c, y, x);
            }
    return out;
}

std::vector<int> zscore_filter(const std::vector<double>& losses, double z_star) {
    int n = static_cast<int>(losses.size());
    require(n >= 2, "zscore_filter: need at least two views");
    require(z_star > 0.0, "zscore_filter: threshold must be positive");
    for (double l : losses)
        require(std::isfinite(l), "zscore_filter: losses must be finite");
    double mu = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
    double var = 0.0;
    for (double l : losses) var += (l - mu) * (l - mu);
    var /= n;  // population variance
    double s = std::sqrt(var);
    std::vector<int> kept;
    if (s == 0.0) {
        kept.resize(n);
        std::iota(kept.begin(), kept.end(), 0);
        return kept;
    }
    for (int i = 0; i < n; ++i)
        if ((losses[i] - mu) / s <= z_star) kept.push_back(i);
    if (static_cast<int>(kept.size()) < 2) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return losses[a] != losses[b] ? losses[a] < losses[b] : a < b;
        });
        kept.assign(order.begin(), order.begin() + 2);
        std::sort(kept.begin(), kept.end());
    }
    return kept;
}

std::string pipeline_config_to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["view_count"] = cfg.view_count;
    j["batch_views"] = cfg.batch_views;
    j["train_views"] = cfg.train_views;
    j["ddim_steps"] = cfg.ddim_steps;
    j["z_star"] = cfg.z_star;
    j["fit_gaussians"] = cfg.fit_gaussians;
    j["fit_iters"] = cfg.fit_iters;
    j["fit_lr"] = cfg.fit_lr;
    j["lambda_blur"] = cfg.render_settings.lambda_blur;
    j["truncation_sigma"] = cfg.render_settings.truncation_sigma;
    j["near_plane"] = cfg.render_settings.near_plane;
    j["blocks"] = cfg.denoiser.blocks;
    j["timesteps"] = cfg.denoiser.timesteps;
    j["patch"] = cfg.denoiser.patch;
    j["image_channels"] = cfg.denoiser.image_channels;
    j["cond_dim"] = cfg.denoiser.cond_dim;
    j["cond_hidden"] = cfg.denoiser.cond_hidden;
    j["freq_count"] = cfg.denoiser.freq_count;
    j["embed_seed"] = cfg.denoiser.embed_seed;
    j["width"] = cfg.dataset.width;
    j["height"] = cfg.dataset.height;
    j["focal"] = cfg.dataset.focal;
    j["orbit_radius"] = cfg.dataset.orbit_radius;
    j["elevation"] = cfg.dataset.elevation;
    j["garment_size"] = cfg.dataset.garment_size;
    j["dilate_px"] = cfg.dataset.dilate_px;
    j["seed"] = cfg.seed;
    return j.dump(2);
}

splat::GaussianCloud initial_cloud(const synth::BodyScene& scene,
                                   const PipelineConfig& cfg) {
    double body_y = scene.half_height + scene.radius + 0.05;
    return splat::random_cloud(
        cfg.fit_gaussians, mix64(cfg.seed, 0xF17c10ull), Eigen::Vector3d::Zero(),
        Eigen::Vector3d(scene.radius + 0.05, body_y, scene.radius + 0.05),
        scene.radius / 2.0);
}

EditResult run_vton_with(const synth::BodyScene& scene, const Image& garment_front,
                         const Image& garment_back, const EditFn& editor,
                         const PipelineConfig& cfg) {
    cfg.validate();
    scene.validate();
    camera::Intrinsics intr = synth::dataset_intrinsics(cfg.dataset);
    camera::ViewRig rig = camera::uniform_rig(cfg.view_count, cfg.dataset.orbit_radius,
                                              cfg.dataset.elevation, intr);
    synth::SceneViews sv = synth::render_scene(scene, rig, cfg.dataset.dilate_px);
    std::vector<Image> originals;
    for (const synth::ViewImages& v : sv.views) originals.push_back(v.rgb);

    splat::GaussianCloud init = initial_cloud(scene, cfg);
    splat::FitResult fit_src = splat::fit_cloud(originals, rig, init, cfg.fit_iters,
                                                cfg.fit_lr, cfg.seed, cfg.render_settings);

    std::vector<Image> edited_raw = editor(sv, garment_front, garment_back);
    require(edited_raw.size() == originals.size(), "editor returned wrong view count");
    std::vector<Image> edited;
    for (std::size_t i = 0; i < edited_raw.size(); ++i) {
        require(edited_raw[i].same_shape(originals[i]),
                "editor returned wrong view shape");
        edited.push_back(
            composite_preserve(edited_raw[i], originals[i], sv.views[i].face_mask));
    }

    splat::FitResult fit_all = splat::fit_cloud(edited, rig, fit_src.cloud, cfg.fit_iters,
                                                cfg.fit_lr, cfg.seed, cfg.render_settings);
    std::vector<int> kept = zscore_filter(fit_all.view_losses, cfg.z_star);

    // warm-started from the source cloud and fed only kept views, so a
    // discarded view cannot leak into the final geometry
    splat::FitResult fit_final;
    if (kept.size() == edited.size()) {
        fit_final = fit_all;
    } else {
        std::vector<Image> kept_views;
        camera::ViewRig kept_rig;
        kept_rig.intrinsics = rig.intrinsics;
        for (int i : kept) {
            kept_views.push_back(edited[i]);
            kept_rig.views.push_back(rig.views[i]);
        }
        fit_final = splat::fit_cloud(kept_views, kept_rig, fit_src.cloud, cfg.fit_iters,
                                     cfg.fit_lr, cfg.seed, cfg.render_settings);
    }

    camera::ViewRig orbit =
        camera::uniform_rig(metrics::kProtocolViewCount, cfg.dataset.orbit_radius,
                            cfg.dataset.elevation, intr);
    std::vector<Image> edited_orbit, source_orbit;
    for (const camera::Extrinsics& ext : orbit.views) {
        edited_orbit.push_back(
            splat::render(fit_final.cloud, intr, ext, cfg.render_settings).rgb);
        source_orbit.push_back(
            splat::render(fit_src.cloud, intr, ext, cfg.render_settings).rgb);
    }
    metrics::ToyEmbedder embedder(cfg.denoiser.embed_seed, cfg.denoiser.cond_dim);
    EditResult result;
    result.edited = std::move(edited);
    result.kept = kept;
    result.cloud = fit_final.cloud;
    result.view_losses = fit_all.view_losses;
    result.clip_cons = metrics::clip_cons(edited_orbit, source_orbit, embedder);
    result.dino_sim = metrics::dino_sim(garment_front, garment_back, edited_orbit,
                                        metrics::classify_views(orbit), embedder);

    nlohmann::json report;
    report["clip_cons"] = result.clip_cons;
    report["dino_sim"] = result.dino_sim;
    report["kept"] = result.kept;
    report["view_losses"] = result.view_losses;
    report["config"] = nlohmann::json::parse(pipeline_config_to_json(cfg));
    result.report_json = report.dump(2);
    return result;
}

EditResult run_vton(const synth::BodyScene& scene, const Image& garment_front,
                    const Image& garment_back, const diff::ToyDenoiser& model,
                    const PipelineConfig& cfg) {
    EditFn editor = [&](const synth::SceneViews& sv, const Image& gf, const Image& gb) {
        return edit_views(model, sv, gf, gb, cfg);
    };
    return run_vton_with(scene, garment_front, garment_back, editor, cfg);
}

}  // namespace mvtk::pipeline
