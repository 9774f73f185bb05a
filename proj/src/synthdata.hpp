#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "camera.hpp"
#include "image.hpp"

namespace mvtk::synth {

enum class TextureKind { stripes, checker, logo };

// Procedural garment texture over surface coordinates (azimuth phi in
// radians, height y in world units). Azimuth 0 faces +z, matching the camera
// orbit convention.
struct TextureParams {
    TextureKind kind = TextureKind::stripes;
    Eigen::Vector3d color_a = Eigen::Vector3d(0.8, 0.2, 0.2);
    Eigen::Vector3d color_b = Eigen::Vector3d(0.9, 0.9, 0.85);
    double period_az = M_PI / 4.0;  // angular width of one two-stripe period
    double period_y = 0.12;         // checker row height
    double phase_az = 0.0;
    Eigen::Vector3d logo_color = Eigen::Vector3d(0.1, 0.1, 0.6);
    double logo_az = 0.0, logo_y = -0.05;
    double logo_half_az = 0.5, logo_half_y = 0.08;
};

// Upright capsule "body": segment y in [-half_height, half_height] swept by
// `radius`. The garment band and head interval are disjoint height ranges on
// the surface.
struct BodyScene {
    double half_height = 0.5;
    double radius = 0.25;
    double band_lo = -0.35, band_hi = 0.25;
    double head_lo = 0.45, head_hi = 0.75;
    double hair_start = 0.6;  // top of the head shades as hair
    Eigen::Vector3d skin_color = Eigen::Vector3d(0.85, 0.7, 0.6);
    Eigen::Vector3d lower_color = Eigen::Vector3d(0.25, 0.25, 0.35);
    Eigen::Vector3d hair_color = Eigen::Vector3d(0.15, 0.1, 0.08);
    TextureParams texture;
    void validate() const;
};

struct ViewImages {
    Image rgb;            // 3ch
    Image normal;         // 3ch, (n+1)/2 encoding, background 0
    Image agnostic;       // 3ch, garment band grayed out
    Image agnostic_mask;  // 1ch binary, dilated band mask
    Image face_mask;      // 1ch binary, head interval
};

struct SceneViews {
    std::vector<ViewImages> views;
    camera::ViewRig rig;
};

struct GarmentPair {
    Image front, back;
};

// Signed distance from p to the capsule surface.
double body_sdf(const BodyScene& scene, const Eigen::Vector3d& p);

// Texture color at surface coordinates; only meaningful inside the band.
Eigen::Vector3d texture_color(const TextureParams& t, double phi, double y);

// Surface color of the full body at (phi, y).
Eigen::Vector3d surface_color(const BodyScene& scene, double phi, double y);

// Deterministic per seed; texture parameters are randomized unless an
// explicit override is given.
BodyScene make_scene(std::uint64_t seed, TextureKind kind,
                     const TextureParams* override_texture = nullptr);

// Sphere-traced rendering of all rig views; unlit surface colors, analytic
// normals, gray agnostic fill over the dilated band mask (radius in pixels).
SceneViews render_scene(const BodyScene& scene, const camera::ViewRig& rig,
                        int dilate_px = 2);

// Orthographic front (azimuth 0) and back (azimuth pi) images of the garment
// band, `size` pixels square.
GarmentPair garment_images(const BodyScene& scene, int size = 48);

struct Subject {
    std::uint64_t seed = 0;
    BodyScene scene_src;   // subject as captured
    BodyScene scene_tgt;   // same body, swap-target garment texture
    SceneViews views;      // renders of scene_src (8-bit quantized)
    GarmentPair garment_src, garment_tgt;
    std::vector<Image> edited_rgb;  // renders of scene_tgt, the edit ground truth
};

using Dataset = std::vector<Subject>;

struct DatasetConfig {
    int width = 64, height = 96;
    double focal = 120.0;
    double orbit_radius = 2.5;
    double elevation = 0.0;
    int garment_size = 48;
    int dilate_px = 2;
};

// Pinhole intrinsics shared by dataset renders and pipeline test views.
camera::Intrinsics dataset_intrinsics(const DatasetConfig& cfg);

// All images pass through 8-bit quantization so an in-memory dataset is
// bit-identical to one saved as PPM and reloaded.
Dataset make_dataset(int n_subjects, int views_per_subject, std::uint64_t seed,
                     const DatasetConfig& cfg = {});

// One directory per subject: view_%03d_{rgb,normal,agnostic,mask,face}.ppm,
// garment_{f,b}.ppm, rig.json, meta.json. Edit ground truth and the target
// garment re-render from meta.json on load.
void save_dataset(const std::string& dir, const Dataset& data, const DatasetConfig& cfg);
Dataset load_dataset(const std::string& dir);

std::string scene_to_json(const BodyScene& scene);
BodyScene scene_from_json(const std::string& text);

}  // namespace mvtk::synth
