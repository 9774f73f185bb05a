#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "camera.hpp"
#include "image.hpp"

namespace mvtk::splat {

struct Gaussian {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    Eigen::Vector3d scale = Eigen::Vector3d::Ones();
    Eigen::Vector4d quat = Eigen::Vector4d(1, 0, 0, 0);  // (w, x, y, z)
    double opacity = 1.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

struct GaussianCloud {
    std::vector<Gaussian> gaussians;
    int size() const { return static_cast<int>(gaussians.size()); }
};

struct RenderSettings {
    double lambda_blur = 0.3;       // px^2 added to the projected covariance
    // Support cutoff in Mahalanobis sigmas. Wide enough that dropped tail
    // contributions stay below 1e-6 even across 32 stacked Gaussians
    // (exp(-6.5^2/2) ~ 7e-10); shrink for faster fitting at lower fidelity.
    double truncation_sigma = 6.5;
    double near_plane = 1e-4;       // camera-space depth cutoff
};

struct ProjectedGaussian {
    Eigen::Vector2d mu2d = Eigen::Vector2d::Zero();
    Eigen::Matrix2d sigma2d = Eigen::Matrix2d::Zero();  // regularized
    double depth = 0.0;
    double opacity = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    bool culled = false;
};

struct RenderOutput {
    Image rgb;    // 3 channels
    Image alpha;  // 1 channel, 1 - total transmittance
};

// Rotation matrix of a quaternion, normalized internally; throws on a norm
// below 1e-12.
Eigen::Matrix3d rotation_from_quat(const Eigen::Vector4d& q);

// Sigma = R_q diag(scale^2) R_q^T.
Eigen::Matrix3d covariance_from_scale_rot(const Eigen::Vector3d& scale,
                                          const Eigen::Vector4d& quat);

ProjectedGaussian project_gaussian(const Gaussian& g, const camera::Intrinsics& intr,
                                   const camera::Extrinsics& ext,
                                   const RenderSettings& settings = {});

// Front-to-back alpha compositing over a black background. Gaussians are
// depth-sorted (ties by input index); evaluation is truncated outside the
// truncation_sigma ellipse of the regularized footprint. Pixels sample at
// integer coordinates.
RenderOutput render(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                    const camera::Extrinsics& ext, const RenderSettings& settings = {});

struct GaussianGrad {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    Eigen::Vector3d scale = Eigen::Vector3d::Zero();
    Eigen::Vector4d quat = Eigen::Vector4d::Zero();
    double opacity = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

using CloudGrad = std::vector<GaussianGrad>;

// Reverse-mode gradients of render. d_alpha may be null (treated as zero).
CloudGrad render_grad(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                      const camera::Extrinsics& ext, const Image& d_rgb,
                      const Image* d_alpha = nullptr, const RenderSettings& settings = {});

struct FitResult {
    GaussianCloud cloud;
    std::vector<double> view_losses;   // final per-view mean squared RGB error
    std::vector<double> loss_history;  // mean across views, one entry per step
};

// Adam descent on all Gaussian parameters against mean per-pixel squared RGB
// error averaged over views. After every step quaternions are renormalized,
// scales clamped positive, opacity and color clamped to [0,1]; the clamps are
// no-ops for parameters already in range so lr=0 returns init unchanged.
// Fitting is full-batch and deterministic; `seed` is accepted for interface
// stability but unused.
FitResult fit_cloud(const std::vector<Image>& targets, const camera::ViewRig& rig,
                    const GaussianCloud& init, int iters, double lr, std::uint64_t seed,
                    const RenderSettings& settings = {});

// Seeded cloud initialization: positions uniform in the box center +/-
// half_extent, isotropic-ish scales around base_scale, random orientations.
GaussianCloud random_cloud(int n, std::uint64_t seed, const Eigen::Vector3d& center,
                           const Eigen::Vector3d& half_extent, double base_scale);

// Binary cloud file: magic "GSPL", version u32, count u64, then 14 f64 per
// Gaussian (mu, scale, quat wxyz, opacity, color), little endian.
void save_cloud(const std::string& path, const GaussianCloud& cloud);
GaussianCloud load_cloud(const std::string& path);

}  // namespace mvtk::splat
