#include "splat.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>

#include "errors.hpp"
#include "rng.hpp"

namespace mvtk::splat {

namespace {

constexpr char kMagic[4] = {'G', 'S', 'P', 'L'};
constexpr std::uint32_t kVersion = 1;

void validate_gaussian(const Gaussian& g) {
    require(g.scale.minCoeff() > 0.0, "gaussian: scale must be positive");
    require(g.opacity >= 0.0 && g.opacity <= 1.0, "gaussian: opacity outside [0,1]");
    require(g.color.minCoeff() >= 0.0 && g.color.maxCoeff() <= 1.0,
            "gaussian: color outside [0,1]");
}

struct Entry {
    int index = 0;  // position in the input cloud
    Eigen::Vector2d mu2d;
    Eigen::Matrix2d lambda;  // inverse regularized footprint
    double depth = 0.0;
    double opacity = 0.0;
    Eigen::Vector3d color;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
};

struct Prepared {
    std::vector<Entry> entries;  // front-to-back
    double r2 = 0.0;             // squared truncation radius (Mahalanobis)
};

Prepared prepare(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                 const camera::Extrinsics& ext, const RenderSettings& set) {
    intr.validate();
    Prepared pre;
    pre.r2 = set.truncation_sigma * set.truncation_sigma;
    double r = set.truncation_sigma;
    for (int i = 0; i < cloud.size(); ++i) {
        ProjectedGaussian pg = project_gaussian(cloud.gaussians[i], intr, ext, set);
        if (pg.culled) continue;
        Entry e;
        e.index = i;
        e.mu2d = pg.mu2d;
        e.depth = pg.depth;
        e.opacity = pg.opacity;
        e.color = pg.color;
        double det = pg.sigma2d(0, 0) * pg.sigma2d(1, 1) - pg.sigma2d(0, 1) * pg.sigma2d(1, 0);
        e.lambda << pg.sigma2d(1, 1) / det, -pg.sigma2d(0, 1) / det,
            -pg.sigma2d(1, 0) / det, pg.sigma2d(0, 0) / det;
        // tight axis-aligned bounds of the truncation ellipse
        double hx = r * std::sqrt(pg.sigma2d(0, 0));
        double hy = r * std::sqrt(pg.sigma2d(1, 1));
        e.x0 = std::max(0, static_cast<int>(std::ceil(pg.mu2d.x() - hx)));
        e.x1 = std::min(intr.width - 1, static_cast<int>(std::floor(pg.mu2d.x() + hx)));
        e.y0 = std::max(0, static_cast<int>(std::ceil(pg.mu2d.y() - hy)));
        e.y1 = std::min(intr.height - 1, static_cast<int>(std::floor(pg.mu2d.y() + hy)));
        if (e.x0 > e.x1 || e.y0 > e.y1) continue;
        pre.entries.push_back(e);
    }
    std::sort(pre.entries.begin(), pre.entries.end(), [](const Entry& a, const Entry& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.index < b.index;
    });
    return pre;
}

struct Grad2d {
    Eigen::Vector2d d_mu2d = Eigen::Vector2d::Zero();
    Eigen::Matrix2d d_lambda = Eigen::Matrix2d::Zero();
    double d_opacity = 0.0;
    Eigen::Vector3d d_color = Eigen::Vector3d::Zero();
};

struct PixelHit {
    int entry;
    double g, w, T;  // T is transmittance in front of this hit
};

// One pass over all pixels. If `up` is non-null it is called per pixel with
// the composited color/alpha and must return upstream gradients, which are
// chained back into g2d (screen-space, per entry). If `out` is non-null the
// composited image is stored.
template <class UpstreamFn>
void composite(const Prepared& pre, const camera::Intrinsics& intr, RenderOutput* out,
               std::vector<Grad2d>* g2d, UpstreamFn* up) {
    std::vector<PixelHit> hits;
    hits.reserve(pre.entries.size());
    for (int y = 0; y < intr.height; ++y) {
        for (int x = 0; x < intr.width; ++x) {
            hits.clear();
            double T = 1.0;
            Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
            for (int e = 0; e < static_cast<int>(pre.entries.size()); ++e) {
                const Entry& en = pre.entries[e];
                if (x < en.x0 || x > en.x1 || y < en.y0 || y > en.y1) continue;
                Eigen::Vector2d d(x - en.mu2d.x(), y - en.mu2d.y());
                double q = d.dot(en.lambda * d);
                if (q > pre.r2) continue;
                double g = std::exp(-0.5 * q);
                double w = en.opacity * g;
                rgb += en.color * (w * T);
                if (up) hits.push_back({e, g, w, T});
                T *= 1.0 - w;
            }
            double alpha = 1.0 - T;
            if (out) {
                for (int c = 0; c < 3; ++c) out->rgb.at(c, y, x) = rgb[c];
                out->alpha.at(0, y, x) = alpha;
            }
            if (!up) continue;
            auto [dC, dA] = (*up)(x, y, rgb, alpha);
            // Back-to-front suffix accumulator; division-free form of the
            // transmittance chain rule.
            double acc = -dA;
            for (int h = static_cast<int>(hits.size()) - 1; h >= 0; --h) {
                const PixelHit& ph = hits[h];
                const Entry& en = pre.entries[ph.entry];
                double cdot = dC.dot(en.color);
                double grad_w = ph.T * (cdot - acc);
                acc = cdot * ph.w + (1.0 - ph.w) * acc;
                Grad2d& gd = (*g2d)[ph.entry];
                gd.d_color += dC * (ph.w * ph.T);
                gd.d_opacity += ph.g * grad_w;
                double dg = en.opacity * grad_w;  // dL/dg
                Eigen::Vector2d d(x - en.mu2d.x(), y - en.mu2d.y());
                Eigen::Vector2d ld = en.lambda * d;
                gd.d_mu2d += (dg * ph.g) * ld;
                gd.d_lambda += (-0.5 * dg * ph.g) * (d * d.transpose());
            }
        }
    }
}

// Chains screen-space gradients of one entry back to world parameters.
void chain_to_params(const Gaussian& gau, const Entry& en, const Grad2d& gd,
                     const camera::Intrinsics& intr, const camera::Extrinsics& ext,
                     GaussianGrad* out) {
    Eigen::Vector3d p = ext.R * gau.mu + ext.t;
    double z = p.z(), zz = z * z;
    Eigen::Matrix<double, 2, 3> J;
    J << intr.fx / z, 0.0, -intr.fx * p.x() / zz,
         0.0, intr.fy / z, -intr.fy * p.y() / zz;

    double norm = gau.quat.norm();
    Eigen::Vector4d qh = gau.quat / norm;
    Eigen::Matrix3d Rq = rotation_from_quat(gau.quat);
    Eigen::Matrix3d S2 = gau.scale.array().square().matrix().asDiagonal();
    Eigen::Matrix3d sigma_w = Rq * S2 * Rq.transpose();
    Eigen::Matrix3d sigma_c = ext.R * sigma_w * ext.R.transpose();

    Eigen::Matrix2d d_sigma2d = -(en.lambda * gd.d_lambda * en.lambda);
    Eigen::Matrix3d d_sigma_c = J.transpose() * d_sigma2d * J;
    Eigen::Matrix<double, 2, 3> dJ = 2.0 * d_sigma2d * J * sigma_c;

    Eigen::Vector3d dp(gd.d_mu2d.x() * intr.fx / z,
                       gd.d_mu2d.y() * intr.fy / z,
                       gd.d_mu2d.x() * (-intr.fx * p.x() / zz) +
                           gd.d_mu2d.y() * (-intr.fy * p.y() / zz));
    dp.x() += dJ(0, 2) * (-intr.fx / zz);
    dp.y() += dJ(1, 2) * (-intr.fy / zz);
    dp.z() += dJ(0, 0) * (-intr.fx / zz) + dJ(0, 2) * (2.0 * intr.fx * p.x() / (zz * z)) +
              dJ(1, 1) * (-intr.fy / zz) + dJ(1, 2) * (2.0 * intr.fy * p.y() / (zz * z));

    out->mu += ext.R.transpose() * dp;
    Eigen::Matrix3d d_sigma_w = ext.R.transpose() * d_sigma_c * ext.R;
    Eigen::Matrix3d d_rq = 2.0 * d_sigma_w * Rq * S2;
    Eigen::Matrix3d inner = Rq.transpose() * d_sigma_w * Rq;
    for (int k = 0; k < 3; ++k) out->scale[k] += 2.0 * gau.scale[k] * inner(k, k);

    // dR/d(qhat) contracted against d_rq, then through the normalization.
    double w = qh[0], xq = qh[1], yq = qh[2], zq = qh[3];
    Eigen::Matrix3d dRw, dRx, dRy, dRz;
    dRw << 0, -zq, yq, zq, 0, -xq, -yq, xq, 0;
    dRx << 0, yq, zq, yq, -2 * xq, -w, zq, w, -2 * xq;
    dRy << -2 * yq, xq, w, xq, 0, zq, -w, zq, -2 * yq;
    dRz << -2 * zq, -w, xq, w, -2 * zq, yq, xq, yq, 0;
    Eigen::Vector4d dqh(2.0 * (d_rq.array() * dRw.array()).sum(),
                        2.0 * (d_rq.array() * dRx.array()).sum(),
                        2.0 * (d_rq.array() * dRy.array()).sum(),
                        2.0 * (d_rq.array() * dRz.array()).sum());
    out->quat += (dqh - qh * qh.dot(dqh)) / norm;

    out->opacity += gd.d_opacity;
    out->color += gd.d_color;
}

CloudGrad grad_pass(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                    const camera::Extrinsics& ext, const RenderSettings& set,
                    RenderOutput* out,
                    const std::function<std::pair<Eigen::Vector3d, double>(
                        int, int, const Eigen::Vector3d&, double)>& up) {
    Prepared pre = prepare(cloud, intr, ext, set);
    std::vector<Grad2d> g2d(pre.entries.size());
    composite(pre, intr, out, &g2d, &up);
    CloudGrad grads(cloud.size());
    for (size_t e = 0; e < pre.entries.size(); ++e)
        chain_to_params(cloud.gaussians[pre.entries[e].index], pre.entries[e], g2d[e],
                        intr, ext, &grads[pre.entries[e].index]);
    return grads;
}

}  // namespace

Eigen::Matrix3d rotation_from_quat(const Eigen::Vector4d& q) {
    double n = q.norm();
    require(n > 1e-12, "quaternion: near-zero norm");
    double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    Eigen::Matrix3d R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

Eigen::Matrix3d covariance_from_scale_rot(const Eigen::Vector3d& scale,
                                          const Eigen::Vector4d& quat) {
    require(scale.minCoeff() > 0.0, "covariance: scale must be positive");
    Eigen::Matrix3d R = rotation_from_quat(quat);
    return R * scale.array().square().matrix().asDiagonal() * R.transpose();
}

ProjectedGaussian project_gaussian(const Gaussian& g, const camera::Intrinsics& intr,
                                   const camera::Extrinsics& ext,
                                   const RenderSettings& settings) {
    validate_gaussian(g);
    ProjectedGaussian out;
    out.opacity = g.opacity;
    out.color = g.color;
    Eigen::Vector3d p = ext.R * g.mu + ext.t;
    out.depth = p.z();
    if (p.z() <= settings.near_plane) {
        out.culled = true;
        return out;
    }
    out.mu2d = Eigen::Vector2d(intr.fx * p.x() / p.z() + intr.cx,
                               intr.fy * p.y() / p.z() + intr.cy);
    double zz = p.z() * p.z();
    Eigen::Matrix<double, 2, 3> J;
    J << intr.fx / p.z(), 0.0, -intr.fx * p.x() / zz,
         0.0, intr.fy / p.z(), -intr.fy * p.y() / zz;
    Eigen::Matrix3d sigma_c =
        ext.R * covariance_from_scale_rot(g.scale, g.quat) * ext.R.transpose();
    out.sigma2d = J * sigma_c * J.transpose();
    out.sigma2d += settings.lambda_blur * Eigen::Matrix2d::Identity();
    return out;
}

RenderOutput render(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                    const camera::Extrinsics& ext, const RenderSettings& settings) {
    Prepared pre = prepare(cloud, intr, ext, settings);
    RenderOutput out;
    out.rgb = Image(3, intr.height, intr.width, 0.0);
    out.alpha = Image(1, intr.height, intr.width, 0.0);
    composite<std::function<std::pair<Eigen::Vector3d, double>(
        int, int, const Eigen::Vector3d&, double)>>(pre, intr, &out, nullptr, nullptr);
    return out;
}

CloudGrad render_grad(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                      const camera::Extrinsics& ext, const Image& d_rgb,
                      const Image* d_alpha, const RenderSettings& settings) {
    require(d_rgb.channels == 3 && d_rgb.height == intr.height && d_rgb.width == intr.width,
            "render_grad: upstream rgb shape mismatch");
    if (d_alpha)
        require(d_alpha->channels == 1 && d_alpha->height == intr.height &&
                    d_alpha->width == intr.width,
                "render_grad: upstream alpha shape mismatch");
    auto up = [&](int x, int y, const Eigen::Vector3d&, double)
        -> std::pair<Eigen::Vector3d, double> {
        Eigen::Vector3d dc(d_rgb.at(0, y, x), d_rgb.at(1, y, x), d_rgb.at(2, y, x));
        double da = d_alpha ? d_alpha->at(0, y, x) : 0.0;
        return {dc, da};
    };
    return grad_pass(cloud, intr, ext, settings, nullptr, up);
}

FitResult fit_cloud(const std::vector<Image>& targets, const camera::ViewRig& rig,
                    const GaussianCloud& init, int iters, double lr, std::uint64_t seed,
                    const RenderSettings& settings) {
    (void)seed;
    int n_views = static_cast<int>(targets.size());
    require(n_views >= 2, "fit_cloud: needs at least two views");
    require(rig.size() == n_views, "fit_cloud: rig/view count mismatch");
    require(iters >= 0, "fit_cloud: negative iteration count");
    for (const Image& t : targets)
        require(t.channels == 3 && t.height == rig.intrinsics.height &&
                    t.width == rig.intrinsics.width,
                "fit_cloud: target shape mismatch");

    FitResult result;
    result.cloud = init;
    int np = init.size() * 14;
    Eigen::VectorXd m = Eigen::VectorXd::Zero(np), v = Eigen::VectorXd::Zero(np);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double pix_norm = 1.0;

    auto flatten_grad = [&](const CloudGrad& g, Eigen::VectorXd* out) {
        for (int i = 0; i < static_cast<int>(g.size()); ++i) {
            int o = i * 14;
            out->segment<3>(o) += g[i].mu;
            out->segment<3>(o + 3) += g[i].scale;
            out->segment<4>(o + 6) += g[i].quat;
            (*out)[o + 10] += g[i].opacity;
            out->segment<3>(o + 11) += g[i].color;
        }
    };

    for (int step = 1; step <= iters; ++step) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(np);
        for (int vi = 0; vi < n_views; ++vi) {
            const Image& target = targets[vi];
            pix_norm = static_cast<double>(target.size()) * n_views;
            RenderOutput out;
            out.rgb = Image(3, rig.intrinsics.height, rig.intrinsics.width, 0.0);
            out.alpha = Image(1, rig.intrinsics.height, rig.intrinsics.width, 0.0);
            auto up = [&](int x, int y, const Eigen::Vector3d& rgb, double)
                -> std::pair<Eigen::Vector3d, double> {
                Eigen::Vector3d t(target.at(0, y, x), target.at(1, y, x), target.at(2, y, x));
                return {2.0 * (rgb - t) / pix_norm, 0.0};
            };
            CloudGrad g = grad_pass(result.cloud, rig.intrinsics, rig.views[vi], settings,
                                    &out, up);
            flatten_grad(g, &grad);
            if (vi == 0) result.loss_history.push_back(0.0);
            result.loss_history.back() += image_mse(out.rgb, target) / n_views;
        }
        if (lr != 0.0) {
            for (int i = 0; i < np; ++i) {
                m[i] = b1 * m[i] + (1 - b1) * grad[i];
                v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
                double mh = m[i] / (1 - std::pow(b1, step));
                double vh = v[i] / (1 - std::pow(b2, step));
                double* p = nullptr;
                int gi = i / 14, off = i % 14;
                Gaussian& ga = result.cloud.gaussians[gi];
                if (off < 3) p = &ga.mu[off];
                else if (off < 6) p = &ga.scale[off - 3];
                else if (off < 10) p = &ga.quat[off - 6];
                else if (off == 10) p = &ga.opacity;
                else p = &ga.color[off - 11];
                *p -= lr * mh / (std::sqrt(vh) + eps);
            }
            for (Gaussian& g : result.cloud.gaussians) {
                double n = g.quat.norm();
                if (n < 1e-8) g.quat = Eigen::Vector4d(1, 0, 0, 0);
                else if (std::abs(n - 1.0) > 1e-12) g.quat /= n;
                for (int k = 0; k < 3; ++k) {
                    g.scale[k] = std::max(g.scale[k], 1e-4);
                    g.color[k] = std::clamp(g.color[k], 0.0, 1.0);
                }
                g.opacity = std::clamp(g.opacity, 0.0, 1.0);
            }
        }
    }
    result.view_losses.resize(n_views);
    for (int vi = 0; vi < n_views; ++vi) {
        RenderOutput out = render(result.cloud, rig.intrinsics, rig.views[vi], settings);
        result.view_losses[vi] = image_mse(out.rgb, targets[vi]);
    }
    return result;
}

GaussianCloud random_cloud(int n, std::uint64_t seed, const Eigen::Vector3d& center,
                           const Eigen::Vector3d& half_extent, double base_scale) {
    require(n >= 0, "random_cloud: negative count");
    require(base_scale > 0, "random_cloud: base_scale must be positive");
    Rng rng(seed);
    GaussianCloud cloud;
    cloud.gaussians.reserve(n);
    for (int i = 0; i < n; ++i) {
        Gaussian g;
        for (int k = 0; k < 3; ++k)
            g.mu[k] = center[k] + half_extent[k] * rng.uniform(-1.0, 1.0);
        for (int k = 0; k < 3; ++k) g.scale[k] = base_scale * rng.uniform(0.5, 1.5);
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        while (q.norm() < 1e-6) q = Eigen::Vector4d(rng.normal(), rng.normal(),
                                                    rng.normal(), rng.normal());
        g.quat = q / q.norm();
        g.opacity = rng.uniform(0.5, 0.9);
        for (int k = 0; k < 3; ++k) g.color[k] = rng.uniform();
        cloud.gaussians.push_back(g);
    }
    return cloud;
}

void save_cloud(const std::string& path, const GaussianCloud& cloud) {
    std::ofstream f(path, std::ios::binary);
    expect(f.good(), "save_cloud: cannot open " + path);
    f.write(kMagic, 4);
    std::uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    std::uint64_t count = cloud.gaussians.size();
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const Gaussian& g : cloud.gaussians) {
        double buf[14] = {g.mu[0],    g.mu[1],    g.mu[2],   g.scale[0], g.scale[1],
                          g.scale[2], g.quat[0],  g.quat[1], g.quat[2],  g.quat[3],
                          g.opacity,  g.color[0], g.color[1], g.color[2]};
        f.write(reinterpret_cast<const char*>(buf), sizeof(buf));
    }
    expect(f.good(), "save_cloud: write failed for " + path);
}

GaussianCloud load_cloud(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    expect(f.good(), "load_cloud: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    expect(f.good() && std::equal(magic, magic + 4, kMagic), "load_cloud: bad magic");
    std::uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    expect(f.good() && ver == kVersion, "load_cloud: unsupported version");
    std::uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    expect(f.good(), "load_cloud: truncated header");
    GaussianCloud cloud;
    cloud.gaussians.resize(count);
    for (Gaussian& g : cloud.gaussians) {
        double buf[14];
        f.read(reinterpret_cast<char*>(buf), sizeof(buf));
        expect(f.good(), "load_cloud: truncated body");
        g.mu = Eigen::Vector3d(buf[0], buf[1], buf[2]);
        g.scale = Eigen::Vector3d(buf[3], buf[4], buf[5]);
        g.quat = Eigen::Vector4d(buf[6], buf[7], buf[8], buf[9]);
        g.opacity = buf[10];
        g.color = Eigen::Vector3d(buf[11], buf[12], buf[13]);
    }
    return cloud;
}

}  // namespace mvtk::splat
