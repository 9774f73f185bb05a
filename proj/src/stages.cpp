#include "stages.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mvtk::stages {

namespace {

std::string fmt(const char* pattern, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), pattern, args...);
    return std::string(buf);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    expect(out.good(), "cannot open " + path.string() + " for writing");
    out << text;
    expect(out.good(), "write to " + path.string() + " failed");
}

json config_echo(const config::CliConfig& cfg) {
    return json::parse(config_to_json(cfg));
}

// Stage outputs live under out_dir; the directory is created on demand.
fs::path out_path(const config::CliConfig& cfg, const std::string& sub) {
    fs::path p = fs::path(cfg.out_dir) / sub;
    fs::create_directories(p);
    return p;
}

const synth::Subject& pick_subject(const synth::Dataset& data,
                                   const config::CliConfig& cfg) {
    if (cfg.subject_index >= static_cast<int>(data.size()))
        throw ConfigError(fmt("config: subject_index %d out of range, dataset has %zu subjects",
                              cfg.subject_index, data.size()));
    return data[static_cast<std::size_t>(cfg.subject_index)];
}

camera::ViewRig orbit_rig(const config::CliConfig& cfg, int count) {
    return camera::uniform_rig(count, cfg.pipe.dataset.orbit_radius,
                               cfg.pipe.dataset.elevation,
                               synth::dataset_intrinsics(cfg.pipe.dataset));
}

void check_checkpoint_matches(const diff::DenoiserConfig& got,
                              const diff::DenoiserConfig& want) {
    bool same = got.blocks == want.blocks && got.timesteps == want.timesteps &&
                got.patch == want.patch && got.image_channels == want.image_channels &&
                got.cond_dim == want.cond_dim && got.cond_hidden == want.cond_hidden &&
                got.freq_count == want.freq_count && got.embed_seed == want.embed_seed;
    if (!same)
        throw ConfigError("config: checkpoint hyperparameters disagree with the config");
}

std::string view_name(int i, const char* ext) { return fmt("view_%03d.%s", i, ext); }

}  // namespace

std::string stage_synth(const config::CliConfig& cfg) {
    cfg.validate();
    synth::Dataset data = synth::make_dataset(cfg.subjects, cfg.views_per_subject,
                                              cfg.pipe.seed, cfg.pipe.dataset);
    synth::save_dataset(cfg.dataset_dir, data, cfg.pipe.dataset);
    write_text(fs::path(cfg.dataset_dir) / "config.json", config_echo(cfg).dump(2) + "\n");
    return fmt("synth: %d subjects x %d views -> %s", cfg.subjects, cfg.views_per_subject,
               cfg.dataset_dir.c_str());
}

std::string stage_train(const config::CliConfig& cfg) {
    cfg.validate();
    synth::Dataset data = synth::load_dataset(cfg.dataset_dir);
    diff::TrainingSet set;
    for (const synth::Subject& s : data) {
        diff::TrainingItem item;
        for (const synth::ViewImages& v : s.views.views) {
            item.views.push_back(v.rgb);
            item.normals.push_back(v.normal);
            item.agnostics.push_back(v.agnostic);
        }
        item.garment_front = s.garment_src.front;
        item.garment_back = s.garment_src.back;
        item.rig = s.views.rig;
        set.push_back(std::move(item));
    }

    diff::ToyDenoiser model;
    if (cfg.resume) {
        model = diff::load_checkpoint(cfg.checkpoint);
        check_checkpoint_matches(model.config, cfg.pipe.denoiser);
    } else {
        model = diff::init_denoiser(cfg.pipe.denoiser, cfg.pipe.seed);
    }
    std::uint64_t start_step = model.opt.step;

    diff::TrainOptions opts;
    opts.lr = cfg.lr;
    opts.views_per_step = cfg.pipe.train_views;
    opts.seed = cfg.pipe.seed;
    std::vector<double> trace;
    if (cfg.stage1_steps > 0) {
        opts.steps = cfg.stage1_steps;
        opts.stage = 1;
        trace = diff::train(model, set, opts);
    }
    if (cfg.stage2_steps > 0) {
        opts.steps = cfg.stage2_steps;
        opts.stage = 2;
        std::vector<double> t2 = diff::train(model, set, opts);
        trace.insert(trace.end(), t2.begin(), t2.end());
    }
    diff::save_checkpoint(cfg.checkpoint, model);

    fs::path dir = out_path(cfg, "");
    std::ofstream tr(dir / "train_trace.txt",
                     cfg.resume ? std::ios::app : std::ios::trunc);
    expect(tr.good(), "cannot open train_trace.txt for writing");
    for (std::size_t i = 0; i < trace.size(); ++i)
        tr << fmt("%llu %.17g\n", static_cast<unsigned long long>(start_step + i), trace[i]);
    expect(tr.good(), "write to train_trace.txt failed");

    json meta;
    meta["steps"] = trace.size();
    meta["final_loss"] = trace.empty() ? 0.0 : trace.back();
    meta["resumed"] = cfg.resume;
    meta["config"] = config_echo(cfg);
    write_text(dir / "train_meta.json", meta.dump(2) + "\n");

    return fmt("train: %d+%d steps, final loss %.6g -> %s", cfg.stage1_steps,
               cfg.stage2_steps, trace.empty() ? 0.0 : trace.back(),
               cfg.checkpoint.c_str());
}

std::string stage_edit(const config::CliConfig& cfg) {
    cfg.validate();
    synth::Dataset data = synth::load_dataset(cfg.dataset_dir);
    const synth::Subject& subject = pick_subject(data, cfg);
    diff::ToyDenoiser model = diff::load_checkpoint(cfg.checkpoint);
    check_checkpoint_matches(model.config, cfg.pipe.denoiser);

    camera::ViewRig rig = orbit_rig(cfg, cfg.pipe.view_count);
    synth::SceneViews sv = synth::render_scene(subject.scene_src, rig,
                                               cfg.pipe.dataset.dilate_px);
    std::vector<Image> raw = pipeline::edit_views(model, sv, subject.garment_tgt.front,
                                                  subject.garment_tgt.back, cfg.pipe);

    fs::path dir = out_path(cfg, "edit");
    for (int i = 0; i < cfg.pipe.view_count; ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        Image composed = pipeline::composite_preserve(raw[k], sv.views[k].rgb,
                                                      sv.views[k].face_mask);
        write_pfm((dir / view_name(i, "pfm")).string(), composed);
        write_ppm((dir / view_name(i, "ppm")).string(), composed);
    }

    json meta;
    meta["subject_index"] = cfg.subject_index;
    meta["view_count"] = cfg.pipe.view_count;
    meta["config"] = config_echo(cfg);
    write_text(dir / "meta.json", meta.dump(2) + "\n");

    return fmt("edit: %d views of subject %d -> %s", cfg.pipe.view_count,
               cfg.subject_index, (dir).string().c_str());
}

std::string stage_reconstruct(const config::CliConfig& cfg) {
    cfg.validate();
    synth::Dataset data = synth::load_dataset(cfg.dataset_dir);
    const synth::Subject& subject = pick_subject(data, cfg);

    camera::ViewRig rig = orbit_rig(cfg, cfg.pipe.view_count);
    synth::SceneViews sv = synth::render_scene(subject.scene_src, rig,
                                               cfg.pipe.dataset.dilate_px);
    std::vector<Image> originals;
    for (const synth::ViewImages& v : sv.views) originals.push_back(v.rgb);

    fs::path edit_dir = fs::path(cfg.out_dir) / "edit";
    std::vector<Image> edited;
    for (int i = 0; i < cfg.pipe.view_count; ++i) {
        fs::path p = edit_dir / view_name(i, "pfm");
        expect(fs::exists(p), "missing " + p.string() + "; run the edit stage first");
        edited.push_back(read_pfm(p.string()));
    }

    splat::GaussianCloud init = pipeline::initial_cloud(subject.scene_src, cfg.pipe);
    splat::FitResult fit_src =
        splat::fit_cloud(originals, rig, init, cfg.pipe.fit_iters, cfg.pipe.fit_lr,
                         cfg.pipe.seed, cfg.pipe.render_settings);
    splat::FitResult fit_all =
        splat::fit_cloud(edited, rig, fit_src.cloud, cfg.pipe.fit_iters, cfg.pipe.fit_lr,
                         cfg.pipe.seed, cfg.pipe.render_settings);
    std::vector<int> kept = pipeline::zscore_filter(fit_all.view_losses, cfg.pipe.z_star);

    splat::FitResult fit_final;
    if (static_cast<int>(kept.size()) == cfg.pipe.view_count) {
        fit_final = fit_all;
    } else {
        std::vector<Image> kept_views;
        camera::ViewRig kept_rig;
        kept_rig.intrinsics = rig.intrinsics;
        for (int i : kept) {
            kept_views.push_back(edited[static_cast<std::size_t>(i)]);
            kept_rig.views.push_back(rig.views[static_cast<std::size_t>(i)]);
        }
        fit_final = splat::fit_cloud(kept_views, kept_rig, fit_src.cloud,
                                     cfg.pipe.fit_iters, cfg.pipe.fit_lr, cfg.pipe.seed,
                                     cfg.pipe.render_settings);
    }

    fs::path dir = out_path(cfg, "recon");
    splat::save_cloud((dir / "cloud_src.gspl").string(), fit_src.cloud);
    splat::save_cloud((dir / "cloud_vton.gspl").string(), fit_final.cloud);

    json meta;
    meta["subject_index"] = cfg.subject_index;
    meta["kept"] = kept;
    meta["view_losses"] = fit_all.view_losses;
    meta["config"] = config_echo(cfg);
    write_text(dir / "meta.json", meta.dump(2) + "\n");

    return fmt("reconstruct: kept %zu/%d views -> %s", kept.size(), cfg.pipe.view_count,
               dir.string().c_str());
}

std::string stage_eval(const config::CliConfig& cfg) {
    cfg.validate();
    synth::Dataset data = synth::load_dataset(cfg.dataset_dir);
    const synth::Subject& subject = pick_subject(data, cfg);

    fs::path recon = fs::path(cfg.out_dir) / "recon";
    splat::GaussianCloud cloud_src = splat::load_cloud((recon / "cloud_src.gspl").string());
    splat::GaussianCloud cloud_vton = splat::load_cloud((recon / "cloud_vton.gspl").string());

    camera::ViewRig orbit = orbit_rig(cfg, metrics::kProtocolViewCount);
    std::vector<Image> src_frames, vton_frames;
    for (const camera::Extrinsics& ext : orbit.views) {
        src_frames.push_back(
            splat::render(cloud_src, orbit.intrinsics, ext, cfg.pipe.render_settings).rgb);
        vton_frames.push_back(
            splat::render(cloud_vton, orbit.intrinsics, ext, cfg.pipe.render_settings).rgb);
    }

    metrics::ToyEmbedder embedder(cfg.pipe.denoiser.embed_seed, cfg.pipe.denoiser.cond_dim);
    double cc = metrics::clip_cons(vton_frames, src_frames, embedder);
    double ds = metrics::dino_sim(subject.garment_tgt.front, subject.garment_tgt.back,
                                  vton_frames, metrics::classify_views(orbit), embedder);

    std::ifstream meta_in(recon / "meta.json");
    expect(meta_in.good(), "missing recon/meta.json; run the reconstruct stage first");
    json recon_meta = json::parse(meta_in);

    json report;
    report["clip_cons"] = cc;
    report["dino_sim"] = ds;
    report["kept"] = recon_meta.at("kept");
    report["subject_index"] = cfg.subject_index;
    report["config"] = config_echo(cfg);
    write_text(out_path(cfg, "") / "report.json", report.dump(2) + "\n");

    return fmt("eval: clip_cons=%.6g dino_sim=%.6g -> %s/report.json", cc, ds,
               cfg.out_dir.c_str());
}

std::string stage_turntable(const config::CliConfig& cfg) {
    cfg.validate();
    fs::path recon = fs::path(cfg.out_dir) / "recon";
    splat::GaussianCloud cloud = splat::load_cloud((recon / "cloud_vton.gspl").string());

    camera::ViewRig orbit = orbit_rig(cfg, cfg.turntable_frames);
    fs::path dir = out_path(cfg, "turntable");
    for (int i = 0; i < cfg.turntable_frames; ++i) {
        Image frame = splat::render(cloud, orbit.intrinsics,
                                    orbit.views[static_cast<std::size_t>(i)],
                                    cfg.pipe.render_settings)
                          .rgb;
        write_ppm((dir / fmt("frame_%03d.ppm", i)).string(), frame);
    }

    json meta;
    meta["frames"] = cfg.turntable_frames;
    meta["config"] = config_echo(cfg);
    write_text(dir / "meta.json", meta.dump(2) + "\n");

    return fmt("turntable: %d frames -> %s", cfg.turntable_frames, dir.string().c_str());
}

}  // namespace mvtk::stages
