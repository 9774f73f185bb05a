#include "synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "errors.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace mvtk::synth {

namespace {

namespace fs = std::filesystem;

// Wraps an angle into [0, 2*pi).
double wrap_2pi(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    return a < 0 ? a + 2.0 * M_PI : a;
}

// Wraps an angle into (-pi, pi].
double wrap_pi(double a) {
    a = wrap_2pi(a);
    return a > M_PI ? a - 2.0 * M_PI : a;
}

Eigen::Vector3d closest_on_axis(const BodyScene& s, const Eigen::Vector3d& p) {
    double y = std::clamp(p.y(), -s.half_height, s.half_height);
    return Eigen::Vector3d(0, y, 0);
}

Eigen::Vector3d random_color(Rng& rng) {
    return Eigen::Vector3d(rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9),
                           rng.uniform(0.15, 0.9));
}

Eigen::Vector3d contrasting_color(Rng& rng, const Eigen::Vector3d& other) {
    for (int tries = 0; tries < 64; ++tries) {
        Eigen::Vector3d c = random_color(rng);
        if ((c - other).cwiseAbs().maxCoeff() >= 0.25) return c;
    }
    return (other.x() > 0.5) ? Eigen::Vector3d(0.15, 0.15, 0.15)
                             : Eigen::Vector3d(0.9, 0.9, 0.9);
}

const char* kind_name(TextureKind k) {
    switch (k) {
        case TextureKind::stripes: return "stripes";
        case TextureKind::checker: return "checker";
        case TextureKind::logo: return "logo";
    }
    return "stripes";
}

TextureKind kind_from_name(const std::string& s) {
    if (s == "stripes") return TextureKind::stripes;
    if (s == "checker") return TextureKind::checker;
    if (s == "logo") return TextureKind::logo;
    throw std::runtime_error("unknown texture kind: " + s);
}

nlohmann::json vec_json(const Eigen::Vector3d& v) { return {v[0], v[1], v[2]}; }

Eigen::Vector3d vec_from_json(const nlohmann::json& j) {
    return Eigen::Vector3d(j.at(0).get<double>(), j.at(1).get<double>(),
                           j.at(2).get<double>());
}

}  // namespace

void BodyScene::validate() const {
    require(half_height > 0 && radius > 0, "scene: degenerate capsule");
    double top = half_height + radius;
    require(band_lo < band_hi, "scene: empty garment band");
    require(band_lo >= -top && band_hi <= top, "scene: band outside body");
    require(head_lo < head_hi && head_hi <= top, "scene: bad head interval");
    require(band_hi < head_lo, "scene: garment band overlaps head");
    require(hair_start >= head_lo && hair_start <= head_hi, "scene: bad hair start");
}

double body_sdf(const BodyScene& scene, const Eigen::Vector3d& p) {
    return (p - closest_on_axis(scene, p)).norm() - scene.radius;
}

Eigen::Vector3d texture_color(const TextureParams& t, double phi, double y) {
    double u = wrap_2pi(phi - t.phase_az);
    switch (t.kind) {
        case TextureKind::stripes: {
            long idx = static_cast<long>(std::floor(2.0 * u / t.period_az));
            return (idx % 2 == 0) ? t.color_a : t.color_b;
        }
        case TextureKind::checker: {
            long i = static_cast<long>(std::floor(u / t.period_az));
            long j = static_cast<long>(std::floor((y + 10.0) / t.period_y));
            return ((i + j) % 2 == 0) ? t.color_a : t.color_b;
        }
        case TextureKind::logo: {
            double daz = std::abs(wrap_pi(phi - t.logo_az));
            if (daz <= t.logo_half_az && std::abs(y - t.logo_y) <= t.logo_half_y)
                return t.logo_color;
            return t.color_a;
        }
    }
    return t.color_a;
}

Eigen::Vector3d surface_color(const BodyScene& scene, double phi, double y) {
    if (y >= scene.band_lo && y <= scene.band_hi)
        return texture_color(scene.texture, phi, y);
    if (y >= scene.hair_start) return scene.hair_color;
    if (y > scene.band_hi) return scene.skin_color;
    return scene.lower_color;
}

BodyScene make_scene(std::uint64_t seed, TextureKind kind,
                     const TextureParams* override_texture) {
    Rng rng(mix64(seed, static_cast<std::uint64_t>(kind)));
    BodyScene scene;
    TextureParams& t = scene.texture;
    t.kind = kind;
    t.color_a = random_color(rng);
    t.color_b = contrasting_color(rng, t.color_a);
    int periods = 6 + 2 * static_cast<int>(rng.below(4));  // 6, 8, 10, 12
    t.period_az = 2.0 * M_PI / periods;
    t.period_y = rng.uniform(0.08, 0.16);
    t.phase_az = rng.uniform(0.0, 2.0 * M_PI);
    t.logo_color = contrasting_color(rng, t.color_a);
    t.logo_az = rng.uniform(0.0, 2.0 * M_PI);
    t.logo_y = rng.uniform(scene.band_lo + 0.1, scene.band_hi - 0.1);
    t.logo_half_az = rng.uniform(0.35, 0.7);
    t.logo_half_y = rng.uniform(0.05, 0.1);
    // mild per-subject appearance variation outside the garment
    for (int k = 0; k < 3; ++k) {
        scene.skin_color[k] = std::clamp(scene.skin_color[k] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
        scene.lower_color[k] = std::clamp(scene.lower_color[k] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
        scene.hair_color[k] = std::clamp(scene.hair_color[k] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    }
    if (override_texture) scene.texture = *override_texture;
    scene.validate();
    return scene;
}

SceneViews render_scene(const BodyScene& scene, const camera::ViewRig& rig, int dilate_px) {
    scene.validate();
    require(rig.size() >= 1, "render_scene: empty rig");
    const camera::Intrinsics& intr = rig.intrinsics;
    intr.validate();
    SceneViews out;
    out.rig = rig;
    out.views.reserve(rig.size());
    const int max_steps = 128;
    const double hit_eps = 1e-7;
    for (const camera::Extrinsics& ext : rig.views) {
        Eigen::Vector3d pos = -ext.R.transpose() * ext.t;
        double t_max = pos.norm() + scene.half_height + scene.radius + 1.0;
        ViewImages vi;
        vi.rgb = Image(3, intr.height, intr.width, 0.0);
        vi.normal = Image(3, intr.height, intr.width, 0.0);
        vi.agnostic = Image(3, intr.height, intr.width, 0.0);
        vi.agnostic_mask = Image(1, intr.height, intr.width, 0.0);
        vi.face_mask = Image(1, intr.height, intr.width, 0.0);
        Image band(1, intr.height, intr.width, 0.0);
        for (int y = 0; y < intr.height; ++y) {
            for (int x = 0; x < intr.width; ++x) {
                Eigen::Vector3d dir_cam((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
                Eigen::Vector3d dir = ext.R.transpose() * dir_cam.normalized();
                double t = 0.0;
                bool hit = false;
                for (int step = 0; step < max_steps && t < t_max; ++step) {
                    double d = body_sdf(scene, pos + t * dir);
                    if (d < hit_eps) {
                        hit = true;
                        break;
                    }
                    t += d;
                }
                if (!hit) continue;
                Eigen::Vector3d p = pos + t * dir;
                Eigen::Vector3d n = (p - closest_on_axis(scene, p)).normalized();
                double phi = std::atan2(p.x(), p.z());
                Eigen::Vector3d col = surface_color(scene, phi, p.y());
                for (int c = 0; c < 3; ++c) {
                    vi.rgb.at(c, y, x) = col[c];
                    vi.normal.at(c, y, x) = (n[c] + 1.0) / 2.0;
                }
                if (p.y() >= scene.band_lo && p.y() <= scene.band_hi)
                    band.at(0, y, x) = 1.0;
                if (p.y() >= scene.head_lo && p.y() <= scene.head_hi)
                    vi.face_mask.at(0, y, x) = 1.0;
            }
        }
        vi.agnostic_mask = dilate_disc(band, dilate_px);
        vi.agnostic = vi.rgb;
        for (int y = 0; y < intr.height; ++y)
            for (int x = 0; x < intr.width; ++x)
                if (vi.agnostic_mask.at(0, y, x) > 0.5)
                    for (int c = 0; c < 3; ++c) vi.agnostic.at(c, y, x) = 0.5;
        out.views.push_back(std::move(vi));
    }
    return out;
}

GarmentPair garment_images(const BodyScene& scene, int size) {
    require(size >= 1, "garment_images: size must be positive");
    scene.validate();
    GarmentPair g;
    g.front = Image(3, size, size, 0.0);
    g.back = Image(3, size, size, 0.0);
    for (int v = 0; v < size; ++v) {
        double y = scene.band_hi - (v + 0.5) / size * (scene.band_hi - scene.band_lo);
        for (int u = 0; u < size; ++u) {
            double xn = std::clamp(2.0 * (u + 0.5) / size - 1.0, -1.0, 1.0);
            double phi_f = std::asin(xn);
            Eigen::Vector3d cf = texture_color(scene.texture, phi_f, y);
            Eigen::Vector3d cb = texture_color(scene.texture, M_PI - phi_f, y);
            for (int c = 0; c < 3; ++c) {
                g.front.at(c, v, u) = cf[c];
                g.back.at(c, v, u) = cb[c];
            }
        }
    }
    return g;
}

namespace {

void quantize_views(SceneViews* sv) {
    for (ViewImages& v : sv->views) {
        v.rgb = quantize8(v.rgb);
        v.normal = quantize8(v.normal);
        v.agnostic = quantize8(v.agnostic);
        // masks are exactly 0/1 already; quantization is the identity on them
    }
}

}  // namespace

camera::Intrinsics dataset_intrinsics(const DatasetConfig& cfg) {
    camera::Intrinsics intr;
    intr.width = cfg.width;
    intr.height = cfg.height;
    intr.fx = intr.fy = cfg.focal;
    intr.cx = cfg.width / 2.0;
    intr.cy = cfg.height / 2.0;
    intr.validate();
    return intr;
}

Dataset make_dataset(int n_subjects, int views_per_subject, std::uint64_t seed,
                     const DatasetConfig& cfg) {
    require(n_subjects >= 1, "make_dataset: need at least one subject");
    require(views_per_subject >= 1, "make_dataset: need at least one view");
    camera::Intrinsics intr = dataset_intrinsics(cfg);
    Dataset data;
    data.reserve(n_subjects);
    for (int i = 0; i < n_subjects; ++i) {
        std::uint64_t s = mix64(seed, static_cast<std::uint64_t>(i));
        Subject subj;
        subj.seed = s;
        auto kind_src = static_cast<TextureKind>(mix64(s, 1) % 3);
        auto kind_tgt = static_cast<TextureKind>((static_cast<int>(kind_src) + 1) % 3);
        subj.scene_src = make_scene(mix64(s, 2), kind_src);
        subj.scene_tgt = subj.scene_src;
        subj.scene_tgt.texture = make_scene(mix64(s, 3), kind_tgt).texture;
        camera::ViewRig rig = camera::sample_azimuth_rig(
            views_per_subject, cfg.orbit_radius, cfg.elevation, mix64(s, 4), intr);
        subj.views = render_scene(subj.scene_src, rig, cfg.dilate_px);
        quantize_views(&subj.views);
        GarmentPair gs = garment_images(subj.scene_src, cfg.garment_size);
        subj.garment_src = {quantize8(gs.front), quantize8(gs.back)};
        GarmentPair gt = garment_images(subj.scene_tgt, cfg.garment_size);
        subj.garment_tgt = {quantize8(gt.front), quantize8(gt.back)};
        SceneViews edited = render_scene(subj.scene_tgt, rig, cfg.dilate_px);
        for (ViewImages& v : edited.views)
            subj.edited_rgb.push_back(quantize8(v.rgb));
        data.push_back(std::move(subj));
    }
    return data;
}

std::string scene_to_json(const BodyScene& s) {
    nlohmann::json j;
    j["half_height"] = s.half_height;
    j["radius"] = s.radius;
    j["band_lo"] = s.band_lo;
    j["band_hi"] = s.band_hi;
    j["head_lo"] = s.head_lo;
    j["head_hi"] = s.head_hi;
    j["hair_start"] = s.hair_start;
    j["skin_color"] = vec_json(s.skin_color);
    j["lower_color"] = vec_json(s.lower_color);
    j["hair_color"] = vec_json(s.hair_color);
    const TextureParams& t = s.texture;
    j["texture"] = {{"kind", kind_name(t.kind)},
                    {"color_a", vec_json(t.color_a)},
                    {"color_b", vec_json(t.color_b)},
                    {"period_az", t.period_az},
                    {"period_y", t.period_y},
                    {"phase_az", t.phase_az},
                    {"logo_color", vec_json(t.logo_color)},
                    {"logo_az", t.logo_az},
                    {"logo_y", t.logo_y},
                    {"logo_half_az", t.logo_half_az},
                    {"logo_half_y", t.logo_half_y}};
    return j.dump(2);
}

BodyScene scene_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    BodyScene s;
    s.half_height = j.at("half_height").get<double>();
    s.radius = j.at("radius").get<double>();
    s.band_lo = j.at("band_lo").get<double>();
    s.band_hi = j.at("band_hi").get<double>();
    s.head_lo = j.at("head_lo").get<double>();
    s.head_hi = j.at("head_hi").get<double>();
    s.hair_start = j.at("hair_start").get<double>();
    s.skin_color = vec_from_json(j.at("skin_color"));
    s.lower_color = vec_from_json(j.at("lower_color"));
    s.hair_color = vec_from_json(j.at("hair_color"));
    const nlohmann::json& jt = j.at("texture");
    TextureParams& t = s.texture;
    t.kind = kind_from_name(jt.at("kind").get<std::string>());
    t.color_a = vec_from_json(jt.at("color_a"));
    t.color_b = vec_from_json(jt.at("color_b"));
    t.period_az = jt.at("period_az").get<double>();
    t.period_y = jt.at("period_y").get<double>();
    t.phase_az = jt.at("phase_az").get<double>();
    t.logo_color = vec_from_json(jt.at("logo_color"));
    t.logo_az = jt.at("logo_az").get<double>();
    t.logo_y = jt.at("logo_y").get<double>();
    t.logo_half_az = jt.at("logo_half_az").get<double>();
    t.logo_half_y = jt.at("logo_half_y").get<double>();
    s.validate();
    return s;
}

void save_dataset(const std::string& dir, const Dataset& data, const DatasetConfig& cfg) {
    require(!data.empty(), "save_dataset: empty dataset");
    fs::create_directories(dir);

    auto mask_to_rgb = [](const Image& m) {
        Image rgb(3, m.height, m.width, 0.0);
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x)
                for (int c = 0; c < 3; ++c) rgb.at(c, y, x) = m.at(0, y, x);
        return rgb;
    };

    // subjects land under their final name only when complete, and the
    // top-level meta commits the dataset only after every subject is in place
    char buf[64];
    for (size_t i = 0; i < data.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "subj_%03zu", i);
        fs::path final_sub = fs::path(dir) / buf;
        fs::path sub = fs::path(dir) / (std::string(buf) + ".tmp");
        fs::remove_all(sub);
        fs::create_directories(sub);
        const Subject& s = data[i];
        camera::save_rig((sub / "rig.json").string(), s.views.rig);
        nlohmann::json meta;
        meta["seed"] = s.seed;
        meta["scene_src"] = nlohmann::json::parse(scene_to_json(s.scene_src));
        meta["scene_tgt"] = nlohmann::json::parse(scene_to_json(s.scene_tgt));
        std::ofstream mf(sub / "meta.json");
        expect(mf.good(), "save_dataset: cannot write subject meta");
        mf << meta.dump(2) << "\n";
        for (size_t v = 0; v < s.views.views.size(); ++v) {
            const ViewImages& im = s.views.views[v];
            std::snprintf(buf, sizeof(buf), "view_%03zu", v);
            std::string stem = (sub / buf).string();
            write_ppm(stem + "_rgb.ppm", im.rgb);
            write_ppm(stem + "_normal.ppm", im.normal);
            write_ppm(stem + "_agnostic.ppm", im.agnostic);
            write_ppm(stem + "_mask.ppm", mask_to_rgb(im.agnostic_mask));
            write_ppm(stem + "_face.ppm", mask_to_rgb(im.face_mask));
        }
        write_ppm((sub / "garment_f.ppm").string(), s.garment_src.front);
        write_ppm((sub / "garment_b.ppm").string(), s.garment_src.back);
        fs::remove_all(final_sub);
        fs::rename(sub, final_sub);
    }

    nlohmann::json top;
    top["subjects"] = data.size();
    top["config"] = {{"width", cfg.width},       {"height", cfg.height},
                     {"focal", cfg.focal},       {"orbit_radius", cfg.orbit_radius},
                     {"elevation", cfg.elevation}, {"garment_size", cfg.garment_size},
                     {"dilate_px", cfg.dilate_px}};
    std::ofstream topf(fs::path(dir) / "meta.json");
    expect(topf.good(), "save_dataset: cannot write top-level meta");
    topf << top.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream topf(fs::path(dir) / "meta.json");
    expect(topf.good(), "load_dataset: missing top-level meta.json in " + dir);
    nlohmann::json top = nlohmann::json::parse(topf);
    size_t count = top.at("subjects").get<size_t>();
    DatasetConfig cfg;
    const nlohmann::json& jc = top.at("config");
    cfg.width = jc.at("width").get<int>();
    cfg.height = jc.at("height").get<int>();
    cfg.focal = jc.at("focal").get<double>();
    cfg.orbit_radius = jc.at("orbit_radius").get<double>();
    cfg.elevation = jc.at("elevation").get<double>();
    cfg.garment_size = jc.at("garment_size").get<int>();
    cfg.dilate_px = jc.at("dilate_px").get<int>();

    auto rgb_to_mask = [](const Image& rgb) {
        Image m(1, rgb.height, rgb.width, 0.0);
        for (int y = 0; y < rgb.height; ++y)
            for (int x = 0; x < rgb.width; ++x)
                m.at(0, y, x) = rgb.at(0, y, x) > 0.5 ? 1.0 : 0.0;
        return m;
    };

    Dataset data;
    char buf[64];
    for (size_t i = 0; i < count; ++i) {
        std::snprintf(buf, sizeof(buf), "subj_%03zu", i);
        fs::path sub = fs::path(dir) / buf;
        Subject s;
        std::ifstream mf(sub / "meta.json");
        expect(mf.good(), "load_dataset: missing meta for subject " + std::to_string(i));
        nlohmann::json meta = nlohmann::json::parse(mf);
        s.seed = meta.at("seed").get<std::uint64_t>();
        s.scene_src = scene_from_json(meta.at("scene_src").dump());
        s.scene_tgt = scene_from_json(meta.at("scene_tgt").dump());
        s.views.rig = camera::load_rig((sub / "rig.json").string());
        for (size_t v = 0;; ++v) {
            std::snprintf(buf, sizeof(buf), "view_%03zu", v);
            std::string stem = (sub / buf).string();
            if (!fs::exists(stem + "_rgb.ppm")) break;
            ViewImages im;
            im.rgb = read_ppm(stem + "_rgb.ppm");
            im.normal = read_ppm(stem + "_normal.ppm");
            im.agnostic = read_ppm(stem + "_agnostic.ppm");
            im.agnostic_mask = rgb_to_mask(read_ppm(stem + "_mask.ppm"));
            im.face_mask = rgb_to_mask(read_ppm(stem + "_face.ppm"));
            s.views.views.push_back(std::move(im));
        }
        expect(!s.views.views.empty(), "load_dataset: subject has no views");
        s.garment_src.front = read_ppm((sub / "garment_f.ppm").string());
        s.garment_src.back = read_ppm((sub / "garment_b.ppm").string());
        GarmentPair gt = garment_images(s.scene_tgt, cfg.garment_size);
        s.garment_tgt = {quantize8(gt.front), quantize8(gt.back)};
        SceneViews edited = render_scene(s.scene_tgt, s.views.rig, cfg.dilate_px);
        for (ViewImages& v : edited.views) s.edited_rgb.push_back(quantize8(v.rgb));
        data.push_back(std::move(s));
    }
    return data;
}

}  // namespace mvtk::synth
