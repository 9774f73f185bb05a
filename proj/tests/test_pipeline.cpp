#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "json.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "testutil.hpp"

using namespace mvtk;
using namespace mvtk::pipeline;

namespace {

Image rand_image(int c, int h, int w, std::uint64_t seed, double lo = -1.0, double hi = 2.0) {
    Image im(c, h, w, 0.0);
    Rng r(seed);
    for (double& v : im.data) v = lo + (hi - lo) * r.uniform();
    return im;
}

// small everything: fast fits, coarse renders, shallow model
PipelineConfig small_config() {
    PipelineConfig cfg;
    cfg.view_count = 8;
    cfg.batch_views = 4;
    cfg.ddim_steps = 2;
    cfg.fit_gaussians = 40;
    cfg.fit_iters = 150;
    cfg.fit_lr = 5e-2;
    cfg.render_settings.truncation_sigma = 4.0;
    cfg.denoiser.blocks = 1;
    cfg.denoiser.timesteps = 4;
    cfg.denoiser.patch = 4;
    cfg.denoiser.cond_dim = 8;
    cfg.denoiser.cond_hidden = 8;
    cfg.denoiser.freq_count = 1;
    cfg.denoiser.embed_seed = 3;
    cfg.dataset.width = 32;
    cfg.dataset.height = 48;
    cfg.dataset.focal = 60.0;
    cfg.dataset.garment_size = 16;
    cfg.seed = 9;
    return cfg;
}

bool clouds_equal(const splat::GaussianCloud& a, const splat::GaussianCloud& b) {
    if (a.size() != b.size()) return false;
    for (int i = 0; i < a.size(); ++i) {
        const splat::Gaussian &x = a.gaussians[i], &y = b.gaussians[i];
        if (x.mu != y.mu || x.scale != y.scale || x.quat != y.quat ||
            x.opacity != y.opacity || x.color != y.color)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("pipeline config validation enforces the structural invariants") {
    PipelineConfig cfg = small_config();
    CHECK_NOTHROW(cfg.validate());
    PipelineConfig bad = cfg;
    bad.view_count = 10;  // not divisible by batch_views=4
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.z_star = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.ddim_steps = cfg.denoiser.timesteps + 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.fit_gaussians = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("composite blends by the mask and copies binary regions bit-exactly") {
    Image e = rand_image(3, 6, 5, 1), o = rand_image(3, 6, 5, 2);
    Image m(1, 6, 5, 0.0);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 5; ++x) m.at(0, y, x) = (y < 2) ? 1.0 : (y < 4 ? 0.0 : 0.5);
    Image out = composite_preserve(e, o, m);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 5; ++x) {
                if (y < 2)
                    CHECK(out.at(c, y, x) == o.at(c, y, x));  // exact copy
                else if (y < 4)
                    CHECK(out.at(c, y, x) == e.at(c, y, x));
                else
                    CHECK(out.at(c, y, x) ==
                          doctest::Approx(0.5 * (e.at(c, y, x) + o.at(c, y, x)))
                              .epsilon(1e-15));
            }
    // idempotent for binary masks
    Image mb(1, 6, 5, 0.0);
    for (int x = 0; x < 5; ++x) mb.at(0, 1, x) = 1.0;
    Image once = composite_preserve(e, o, mb);
    Image twice = composite_preserve(once, o, mb);
    CHECK(once.data == twice.data);
    // per-channel masks work too
    Image m3(3, 6, 5, 1.0);
    CHECK(composite_preserve(e, o, m3).data == o.data);
    Image wrong(3, 5, 5, 0.0);
    CHECK_THROWS_AS(composite_preserve(e, wrong, m), std::invalid_argument);
    Image bad_mask(1, 6, 5, 1.5);
    CHECK_THROWS_AS(composite_preserve(e, o, bad_mask), std::invalid_argument);
}

TEST_CASE("zscore filter matches the hand-computed oracle and its guards") {
    std::vector<int> kept = zscore_filter({1, 1, 1, 1, 10}, 1.5);
    CHECK(kept == std::vector<int>{0, 1, 2, 3});  // outlier z = 2.0

    kept = zscore_filter({3, 3, 3}, 1.5);  // zero spread keeps all
    CHECK(kept == std::vector<int>{0, 1, 2});

    kept = zscore_filter({0, 0, 2, 2}, 1.0);  // max z exactly at threshold: kept
    CHECK(kept == std::vector<int>{0, 1, 2, 3});

    kept = zscore_filter({0, 10, 10}, 0.5);  // over-filtered: two lowest survive
    CHECK(kept == std::vector<int>{0, 1});

    CHECK_THROWS_AS(zscore_filter({1.0}, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(zscore_filter({1.0, std::nan("")}, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(zscore_filter({1.0, 2.0}, 0.0), std::invalid_argument);
}

TEST_CASE("zscore filter is invariant under positive rescaling of the losses") {
    Rng r(4);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(r.below(14));
        std::vector<double> losses(n);
        for (double& l : losses) l = r.uniform() * 10.0;
        double k = std::exp((r.uniform() - 0.5) * 20.0);  // 1e-4 .. 1e4
        std::vector<double> scaled = losses;
        for (double& l : scaled) l *= k;
        CHECK(zscore_filter(losses, 1.5) == zscore_filter(scaled, 1.5));
    }
}

TEST_CASE("editing batches preserve rig order and per-view noise keys") {
    PipelineConfig cfg = small_config();
    cfg.dataset.width = 16;
    cfg.dataset.height = 24;
    cfg.dataset.focal = 25.0;
    diff::ToyDenoiser model = init_denoiser(cfg.denoiser, 21);
    synth::BodyScene scene = synth::make_scene(8, synth::TextureKind::checker);
    camera::ViewRig rig = camera::uniform_rig(4, cfg.dataset.orbit_radius, 0.0,
                                              synth::dataset_intrinsics(cfg.dataset));
    synth::SceneViews sv = synth::render_scene(scene, rig, cfg.dataset.dilate_px);
    synth::GarmentPair g = synth::garment_images(scene, cfg.dataset.garment_size);

    cfg.batch_views = 2;
    std::vector<Image> edited = edit_views(model, sv, g.front, g.back, cfg);
    REQUIRE(edited.size() == 4);
    for (const Image& im : edited) {
        CHECK(im.same_shape(sv.views[0].rgb));
        for (double v : im.data) CHECK((v >= 0.0 && v <= 1.0));
    }
    // same seed, same result
    std::vector<Image> again = edit_views(model, sv, g.front, g.back, cfg);
    for (int i = 0; i < 4; ++i) CHECK(edited[i].data == again[i].data);

    // the first batch never sees the later views
    synth::SceneViews head;
    head.rig.intrinsics = sv.rig.intrinsics;
    for (int i = 0; i < 2; ++i) {
        head.views.push_back(sv.views[i]);
        head.rig.views.push_back(sv.rig.views[i]);
    }
    std::vector<Image> head_edit = edit_views(model, head, g.front, g.back, cfg);
    REQUIRE(head_edit.size() == 2);
    for (int i = 0; i < 2; ++i) CHECK(head_edit[i].data == edited[i].data);

    // a view's starting noise follows its global index, so a singleton batch
    // of view i reproduces nothing unless the key matches
    cfg.batch_views = 1;
    std::vector<Image> solo = edit_views(model, sv, g.front, g.back, cfg);
    diff::ToyAutoencoder ae{model.config.patch};
    for (int i = 0; i < 4; ++i) {
        synth::SceneViews one;
        one.rig.intrinsics = sv.rig.intrinsics;
        one.views.push_back(sv.views[i]);
        one.rig.views.push_back(sv.rig.views[i]);
        diff::ConditioningBundle cond = diff::make_conditioning(
            {sv.views[i].normal}, {sv.views[i].agnostic}, g.front, g.back, one.rig,
            model.config);
        std::vector<std::uint64_t> keys = {static_cast<std::uint64_t>(i)};
        std::vector<diff::LatentImage> z =
            diff::ddim_sample(model, cond, cfg.ddim_steps, cfg.seed, &keys);
        Image img = ae.decode(z[0]);
        for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
        CHECK(img.data == solo[i].data);
    }
}

TEST_CASE("identity editing reconstructs the original subject") {
    PipelineConfig cfg = small_config();
    synth::BodyScene scene = synth::make_scene(5, synth::TextureKind::stripes);
    synth::GarmentPair g = synth::garment_images(scene, cfg.dataset.garment_size);
    EditFn identity = [](const synth::SceneViews& sv, const Image&, const Image&) {
        std::vector<Image> out;
        for (const synth::ViewImages& v : sv.views) out.push_back(v.rgb);
        return out;
    };
    EditResult res = run_vton_with(scene, g.front, g.back, identity, cfg);
    REQUIRE(res.edited.size() == 8);
    REQUIRE(!res.kept.empty());
    CHECK(res.kept.size() >= 2);
    CHECK(std::is_sorted(res.kept.begin(), res.kept.end()));
    CHECK(res.view_losses.size() == 8);
    CHECK(res.cloud.size() == cfg.fit_gaussians);
    CHECK(std::isfinite(res.clip_cons));
    CHECK(std::isfinite(res.dino_sim));

    // identity edit keeps every composited view bit-identical to the render
    camera::Intrinsics intr = synth::dataset_intrinsics(cfg.dataset);
    camera::ViewRig rig =
        camera::uniform_rig(cfg.view_count, cfg.dataset.orbit_radius, 0.0, intr);
    synth::SceneViews sv = synth::render_scene(scene, rig, cfg.dataset.dilate_px);
    for (int i = 0; i < 8; ++i) CHECK(res.edited[i].data == sv.views[i].rgb.data);

    // the refit cloud reproduces the kept originals closely
    double mse = 0.0;
    for (int i : res.kept) {
        Image r = splat::render(res.cloud, intr, rig.views[i], cfg.render_settings).rgb;
        mse += image_mse(r, sv.views[i].rgb) / static_cast<double>(res.kept.size());
    }
    INFO("reconstruction mse " << mse);
    CHECK(mse < 1e-2);

    nlohmann::json report = nlohmann::json::parse(res.report_json);
    CHECK(report["clip_cons"].get<double>() == doctest::Approx(res.clip_cons));
    CHECK(report["kept"].get<std::vector<int>>() == res.kept);
    CHECK(report["config"]["view_count"].get<int>() == cfg.view_count);
    CHECK(report["config"]["z_star"].get<double>() == doctest::Approx(cfg.z_star));
}

TEST_CASE("a corrupted view is discarded and cannot influence the final cloud") {
    PipelineConfig cfg = small_config();
    cfg.fit_iters = 60;
    cfg.fit_gaussians = 16;
    synth::BodyScene scene = synth::make_scene(6, synth::TextureKind::logo);
    synth::GarmentPair g = synth::garment_images(scene, cfg.dataset.garment_size);
    auto corrupting = [](int bad, int mode) {
        return [bad, mode](const synth::SceneViews& sv, const Image&, const Image&) {
            std::vector<Image> out;
            for (int i = 0; i < static_cast<int>(sv.views.size()); ++i) {
                Image im = sv.views[i].rgb;
                if (i == bad) {
                    if (mode == 0)
                        for (double& v : im.data) v = 1.0 - v;
                    else
                        for (double& v : im.data) v = 0.5;
                }
                out.push_back(std::move(im));
            }
            return out;
        };
    };
    EditResult a = run_vton_with(scene, g.front, g.back, corrupting(3, 0), cfg);
    EditResult b = run_vton_with(scene, g.front, g.back, corrupting(3, 1), cfg);
    for (int i = 0; i < 8; ++i)
        if (i != 3) {
            CHECK(a.view_losses[3] > a.view_losses[i]);
            CHECK(b.view_losses[3] > b.view_losses[i]);
        }
    CHECK(std::find(a.kept.begin(), a.kept.end(), 3) == a.kept.end());
    CHECK(std::find(b.kept.begin(), b.kept.end(), 3) == b.kept.end());
    REQUIRE(a.kept == b.kept);
    // different corruptions of the discarded view, identical final geometry
    CHECK(clouds_equal(a.cloud, b.cloud));
}

TEST_CASE("the full flow is deterministic for a fixed seed") {
    PipelineConfig cfg = small_config();
    cfg.view_count = 4;
    cfg.batch_views = 4;
    cfg.fit_iters = 30;
    cfg.fit_gaussians = 12;
    synth::BodyScene scene = synth::make_scene(2, synth::TextureKind::checker);
    synth::GarmentPair g = synth::garment_images(scene, cfg.dataset.garment_size);
    EditFn swap_channels = [](const synth::SceneViews& sv, const Image&, const Image&) {
        std::vector<Image> out;
        for (const synth::ViewImages& v : sv.views) {
            Image im = v.rgb;
            for (int y = 0; y < im.height; ++y)
                for (int x = 0; x < im.width; ++x)
                    std::swap(im.at(0, y, x), im.at(2, y, x));
            out.push_back(std::move(im));
        }
        return out;
    };
    EditResult a = run_vton_with(scene, g.front, g.back, swap_channels, cfg);
    EditResult b = run_vton_with(scene, g.front, g.back, swap_channels, cfg);
    CHECK(a.report_json == b.report_json);
    CHECK(a.kept == b.kept);
    CHECK(clouds_equal(a.cloud, b.cloud));
    for (std::size_t i = 0; i < a.edited.size(); ++i)
        CHECK(a.edited[i].data == b.edited[i].data);
}

TEST_CASE("config echo serializes every pipeline knob") {
    PipelineConfig cfg = small_config();
    nlohmann::json j = nlohmann::json::parse(pipeline_config_to_json(cfg));
    CHECK(j["view_count"].get<int>() == cfg.view_count);
    CHECK(j["batch_views"].get<int>() == cfg.batch_views);
    CHECK(j["train_views"].get<int>() == cfg.train_views);
    CHECK(j["ddim_steps"].get<int>() == cfg.ddim_steps);
    CHECK(j["z_star"].get<double>() == cfg.z_star);
    CHECK(j["fit_gaussians"].get<int>() == cfg.fit_gaussians);
    CHECK(j["lambda_blur"].get<double>() == cfg.render_settings.lambda_blur);
    CHECK(j["truncation_sigma"].get<double>() == cfg.render_settings.truncation_sigma);
    CHECK(j["blocks"].get<int>() == cfg.denoiser.blocks);
    CHECK(j["timesteps"].get<int>() == cfg.denoiser.timesteps);
    CHECK(j["patch"].get<int>() == cfg.denoiser.patch);
    CHECK(j["embed_seed"].get<std::uint64_t>() == cfg.denoiser.embed_seed);
    CHECK(j["width"].get<int>() == cfg.dataset.width);
    CHECK(j["height"].get<int>() == cfg.dataset.height);
    CHECK(j["seed"].get<std::uint64_t>() == cfg.seed);
}
