#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "camera.hpp"
#include "rng.hpp"
#include "splat.hpp"
#include "testutil.hpp"

using namespace mvtk;
using namespace mvtk::splat;
using mvtk_test::rel_err;

namespace {

camera::Intrinsics square_intr(int size, double f) {
    camera::Intrinsics intr;
    intr.width = size;
    intr.height = size;
    intr.fx = f;
    intr.fy = f;
    intr.cx = size / 2.0;
    intr.cy = size / 2.0;
    return intr;
}

// Untruncated per-pixel compositing with its own projection math; scalar
// loops throughout.
Image oracle_render(const GaussianCloud& cloud, const camera::Intrinsics& intr,
                    const camera::Extrinsics& ext, double lambda_blur) {
    struct P {
        double mx, my, a, b, c;  // mean and inverse covariance entries
        double depth, op;
        Eigen::Vector3d col;
        int idx;
    };
    std::vector<P> ps;
    for (int i = 0; i < cloud.size(); ++i) {
        const Gaussian& g = cloud.gaussians[i];
        Eigen::Vector3d p = ext.R * g.mu + ext.t;
        if (p.z() <= 1e-4) continue;
        P o;
        o.idx = i;
        o.depth = p.z();
        o.mx = intr.fx * p.x() / p.z() + intr.cx;
        o.my = intr.fy * p.y() / p.z() + intr.cy;
        Eigen::Matrix3d R = rotation_from_quat(g.quat);
        Eigen::Matrix3d sig = R * g.scale.array().square().matrix().asDiagonal() *
                              R.transpose();
        Eigen::Matrix3d sc = ext.R * sig * ext.R.transpose();
        double zz = p.z() * p.z();
        Eigen::Matrix<double, 2, 3> J;
        J << intr.fx / p.z(), 0, -intr.fx * p.x() / zz,
             0, intr.fy / p.z(), -intr.fy * p.y() / zz;
        Eigen::Matrix2d s2 = J * sc * J.transpose();
        s2(0, 0) += lambda_blur;
        s2(1, 1) += lambda_blur;
        double det = s2(0, 0) * s2(1, 1) - s2(0, 1) * s2(1, 0);
        o.a = s2(1, 1) / det;
        o.b = -s2(0, 1) / det;
        o.c = s2(0, 0) / det;
        o.op = g.opacity;
        o.col = g.color;
        ps.push_back(o);
    }
    std::sort(ps.begin(), ps.end(), [](const P& l, const P& r) {
        return l.depth != r.depth ? l.depth < r.depth : l.idx < r.idx;
    });
    Image img(3, intr.height, intr.width, 0.0);
    for (int y = 0; y < intr.height; ++y)
        for (int x = 0; x < intr.width; ++x) {
            double T = 1.0;
            for (const P& o : ps) {
                double dx = x - o.mx, dy = y - o.my;
                double q = o.a * dx * dx + 2.0 * o.b * dx * dy + o.c * dy * dy;
                double g = std::exp(-0.5 * q);
                double w = o.op * g;
                for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) += o.col[ch] * w * T;
                T *= 1.0 - w;
            }
        }
    return img;
}

GaussianCloud random_scene(Rng& rng, int n, double spread = 0.8) {
    GaussianCloud cloud;
    for (int i = 0; i < n; ++i) {
        Gaussian g;
        for (int k = 0; k < 3; ++k) g.mu[k] = rng.uniform(-spread, spread);
        for (int k = 0; k < 3; ++k) g.scale[k] = rng.uniform(0.05, 0.3);
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.quat = q / q.norm();
        g.opacity = rng.uniform(0.2, 0.95);
        for (int k = 0; k < 3; ++k) g.color[k] = rng.uniform();
        cloud.gaussians.push_back(g);
    }
    return cloud;
}

camera::Extrinsics orbit_cam(double az, double radius = 3.0, double elev = 0.15) {
    return camera::look_at(camera::orbit_position(radius, az, elev),
                           Eigen::Vector3d::Zero());
}

}  // namespace

TEST_CASE("covariance_from_scale_rot canonical cases") {
    Eigen::Vector4d identity(1, 0, 0, 0);
    Eigen::Matrix3d c = covariance_from_scale_rot(Eigen::Vector3d(1, 2, 3), identity);
    CHECK((c - Eigen::Vector3d(1, 4, 9).asDiagonal().toDenseMatrix()).norm() == 0.0);

    Rng rng(3);
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    Eigen::Matrix3d iso = covariance_from_scale_rot(Eigen::Vector3d(0.7, 0.7, 0.7), q);
    CHECK((iso - 0.49 * Eigen::Matrix3d::Identity()).norm() < 1e-12);

    // 90 degrees about z maps the x-scale onto y: diag(1,4,1) -> diag(4,1,1)
    double s = std::sqrt(0.5);
    Eigen::Vector4d qz(s, 0, 0, s);
    Eigen::Matrix3d rot = covariance_from_scale_rot(Eigen::Vector3d(1, 2, 1), qz);
    Eigen::Matrix3d expected = Eigen::Vector3d(4, 1, 1).asDiagonal();
    CHECK((rot - expected).norm() < 1e-12);

    CHECK_THROWS_AS(covariance_from_scale_rot(Eigen::Vector3d(1, 1, 1),
                                              Eigen::Vector4d::Zero()),
                    std::invalid_argument);
    CHECK_THROWS_AS(covariance_from_scale_rot(Eigen::Vector3d(0, 1, 1), identity),
                    std::invalid_argument);
}

TEST_CASE("covariance matches matrix-product oracle on random inputs") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        Eigen::Vector3d s(rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2));
        Eigen::Matrix3d c = covariance_from_scale_rot(s, q);
        Eigen::Quaterniond eq(q[0], q[1], q[2], q[3]);
        Eigen::Matrix3d R = eq.toRotationMatrix();
        Eigen::Matrix3d ref = R * s.array().square().matrix().asDiagonal() * R.transpose();
        CHECK((c - ref).norm() < 1e-12);
        CHECK((c - c.transpose()).norm() < 1e-15);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(c);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
}

TEST_CASE("project_gaussian on-axis and culling") {
    camera::Intrinsics intr = square_intr(128, 100.0);
    camera::Extrinsics ext;  // identity: camera at origin looking down +z
    Gaussian g;
    g.mu = Eigen::Vector3d(0, 0, 5);
    g.scale = Eigen::Vector3d(0.2, 0.2, 0.2);
    RenderSettings set;
    ProjectedGaussian p = project_gaussian(g, intr, ext, set);
    CHECK_FALSE(p.culled);
    CHECK(p.mu2d.x() == doctest::Approx(64.0).epsilon(1e-13));
    CHECK(p.mu2d.y() == doctest::Approx(64.0).epsilon(1e-13));
    CHECK(p.depth == doctest::Approx(5.0));
    // isotropic: sigma2d ~ (f*s/z)^2 I + lambda I
    double expected = std::pow(100.0 * 0.2 / 5.0, 2) + set.lambda_blur;
    CHECK(p.sigma2d(0, 0) == doctest::Approx(expected).epsilon(1e-10));
    CHECK(p.sigma2d(1, 1) == doctest::Approx(expected).epsilon(1e-10));
    CHECK(std::abs(p.sigma2d(0, 1)) < 1e-12);

    g.mu = Eigen::Vector3d(0, 0, -1);
    CHECK(project_gaussian(g, intr, ext, set).culled);
    g.mu = Eigen::Vector3d(0, 0, 0);
    CHECK(project_gaussian(g, intr, ext, set).culled);
}

TEST_CASE("empty cloud renders black") {
    camera::Intrinsics intr = square_intr(16, 30.0);
    RenderOutput out = render(GaussianCloud{}, intr, orbit_cam(0.3));
    for (double v : out.rgb.data) CHECK(v == 0.0);
    for (double v : out.alpha.data) CHECK(v == 0.0);
}

TEST_CASE("single opaque on-axis gaussian is pure red at center") {
    camera::Intrinsics intr = square_intr(128, 100.0);
    camera::Extrinsics ext;
    GaussianCloud cloud;
    Gaussian g;
    g.mu = Eigen::Vector3d(0, 0, 5);
    g.scale = Eigen::Vector3d(0.3, 0.3, 0.3);
    g.opacity = 1.0;
    g.color = Eigen::Vector3d(1, 0, 0);
    cloud.gaussians.push_back(g);
    RenderOutput out = render(cloud, intr, ext);
    CHECK(out.rgb.at(0, 64, 64) == doctest::Approx(1.0).epsilon(1e-12));  // g = 1 exactly
    CHECK(out.rgb.at(1, 64, 64) == 0.0);
    CHECK(out.rgb.at(2, 64, 64) == 0.0);
    CHECK(out.alpha.at(0, 64, 64) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("render matches the untruncated brute-force oracle") {
    Rng rng(17);
    double worst = 0.0;
    for (int scene = 0; scene < 12; ++scene) {
        GaussianCloud cloud = random_scene(rng, 2 + static_cast<int>(rng.below(10)));
        camera::Intrinsics intr = square_intr(32, 40.0);
        camera::Extrinsics ext = orbit_cam(rng.uniform(0, 2 * M_PI));
        RenderOutput out = render(cloud, intr, ext);
        Image ref = oracle_render(cloud, intr, ext, RenderSettings{}.lambda_blur);
        for (size_t i = 0; i < ref.data.size(); ++i)
            worst = std::max(worst, std::abs(ref.data[i] - out.rgb.data[i]));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("transmittance properties: alpha in range, permutation invariance") {
    Rng rng(23);
    GaussianCloud cloud = random_scene(rng, 9);
    camera::Intrinsics intr = square_intr(24, 30.0);
    camera::Extrinsics ext = orbit_cam(1.1);
    RenderOutput a = render(cloud, intr, ext);
    for (double v : a.alpha.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    GaussianCloud shuffled;
    std::vector<int> perm = {4, 7, 1, 8, 0, 3, 6, 2, 5};
    for (int i : perm) shuffled.gaussians.push_back(cloud.gaussians[i]);
    RenderOutput b = render(shuffled, intr, ext);
    CHECK(image_mse(a.rgb, b.rgb) == 0.0);
    CHECK(image_mse(a.alpha, b.alpha) == 0.0);
}

TEST_CASE("rigid motion equivariance") {
    Rng rng(29);
    GaussianCloud cloud = random_scene(rng, 6);
    camera::Intrinsics intr = square_intr(24, 30.0);
    camera::Extrinsics ext = orbit_cam(0.7);
    RenderOutput base = render(cloud, intr, ext);

    Eigen::Matrix3d G =
        Eigen::AngleAxisd(0.83, Eigen::Vector3d(0.2, 1.0, -0.4).normalized())
            .toRotationMatrix();
    Eigen::Quaterniond gq(G);
    GaussianCloud moved = cloud;
    for (Gaussian& g : moved.gaussians) {
        g.mu = G * g.mu;
        Eigen::Quaterniond q(g.quat[0], g.quat[1], g.quat[2], g.quat[3]);
        Eigen::Quaterniond rq = gq * q;
        g.quat = Eigen::Vector4d(rq.w(), rq.x(), rq.y(), rq.z());
    }
    camera::Extrinsics moved_cam;
    moved_cam.R = ext.R * G.transpose();
    moved_cam.t = ext.t;
    RenderOutput out = render(moved, intr, moved_cam);
    double worst = 0.0;
    for (size_t i = 0; i < base.rgb.data.size(); ++i)
        worst = std::max(worst, std::abs(base.rgb.data[i] - out.rgb.data[i]));
    CHECK(worst < 1e-9);
}

TEST_CASE("transmittance is nonincreasing along the sorted order") {
    // Two stacked translucent gaussians on the optical axis: the second must
    // see reduced transmittance, so its contribution is strictly smaller than
    // solo.
    camera::Intrinsics intr = square_intr(64, 60.0);
    camera::Extrinsics ext;
    Gaussian front, back;
    front.mu = Eigen::Vector3d(0, 0, 3);
    back.mu = Eigen::Vector3d(0, 0, 5);
    front.scale = back.scale = Eigen::Vector3d(0.3, 0.3, 0.3);
    front.opacity = 0.6;
    back.opacity = 0.8;
    front.color = Eigen::Vector3d(0, 1, 0);
    back.color = Eigen::Vector3d(1, 0, 0);
    GaussianCloud both, solo;
    both.gaussians = {front, back};
    solo.gaussians = {back};
    RenderOutput o_both = render(both, intr, ext);
    RenderOutput o_solo = render(solo, intr, ext);
    CHECK(o_both.rgb.at(0, 32, 32) < o_solo.rgb.at(0, 32, 32));
    CHECK(o_both.rgb.at(0, 32, 32) ==
          doctest::Approx(o_solo.rgb.at(0, 32, 32) * (1.0 - 0.6)).epsilon(1e-9));
}

TEST_CASE("render_grad zero upstream and occluded color") {
    Rng rng(31);
    GaussianCloud cloud = random_scene(rng, 4);
    camera::Intrinsics intr = square_intr(16, 20.0);
    camera::Extrinsics ext = orbit_cam(0.2);
    Image zero(3, 16, 16, 0.0);
    CloudGrad g = render_grad(cloud, intr, ext, zero);
    for (const auto& gg : g) {
        CHECK(gg.mu.norm() == 0.0);
        CHECK(gg.scale.norm() == 0.0);
        CHECK(gg.quat.norm() == 0.0);
        CHECK(gg.opacity == 0.0);
        CHECK(gg.color.norm() == 0.0);
    }

    // fully occluding front gaussian: rear color gradient vanishes at the
    // center pixel (T = 0 behind an opacity-1, g=1 splat)
    camera::Intrinsics axis_intr = square_intr(64, 60.0);
    camera::Extrinsics axis_ext;
    Gaussian front, back;
    front.mu = Eigen::Vector3d(0, 0, 3);
    back.mu = Eigen::Vector3d(0, 0, 5);
    front.scale = Eigen::Vector3d(2.0, 2.0, 2.0);  // huge: g ~ 1 across support
    back.scale = Eigen::Vector3d(0.05, 0.05, 0.05);
    front.opacity = 1.0;
    back.opacity = 0.9;
    front.color = Eigen::Vector3d(0.2, 0.2, 0.2);
    back.color = Eigen::Vector3d(1, 0, 0);
    GaussianCloud two;
    two.gaussians = {front, back};
    Image up(3, 64, 64, 0.0);
    up.at(0, 32, 32) = 1.0;  // only the center pixel
    CloudGrad gg = render_grad(two, axis_intr, axis_ext, up);
    CHECK(gg[1].color.norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("render_grad matches finite differences") {
    Rng rng(37);
    camera::Intrinsics intr = square_intr(16, 20.0);
    camera::Extrinsics ext = orbit_cam(0.9, 3.0, 0.1);
    GaussianCloud cloud = random_scene(rng, 2, 0.4);
    // keep opacities interior so clamping never interacts with FD probes
    for (auto& g : cloud.gaussians) g.opacity = std::clamp(g.opacity, 0.3, 0.9);

    Image d_rgb(3, 16, 16);
    Image d_alpha(1, 16, 16);
    for (double& v : d_rgb.data) v = rng.normal();
    for (double& v : d_alpha.data) v = rng.normal();

    auto loss = [&]() {
        RenderOutput out = render(cloud, intr, ext);
        double s = 0.0;
        for (size_t i = 0; i < out.rgb.data.size(); ++i) s += out.rgb.data[i] * d_rgb.data[i];
        for (size_t i = 0; i < out.alpha.data.size(); ++i)
            s += out.alpha.data[i] * d_alpha.data[i];
        return s;
    };
    CloudGrad g = render_grad(cloud, intr, ext, d_rgb, &d_alpha);

    double worst = 0.0;
    auto probe = [&](double* p, double analytic) {
        double fd = mvtk_test::central_diff(loss, p);
        worst = std::max(worst, rel_err(analytic, fd, 1e-4));
    };
    for (int i = 0; i < cloud.size(); ++i) {
        Gaussian& ga = cloud.gaussians[i];
        for (int k = 0; k < 3; ++k) probe(&ga.mu[k], g[i].mu[k]);
        for (int k = 0; k < 3; ++k) probe(&ga.scale[k], g[i].scale[k]);
        for (int k = 0; k < 4; ++k) probe(&ga.quat[k], g[i].quat[k]);
        probe(&ga.opacity, g[i].opacity);
        for (int k = 0; k < 3; ++k) probe(&ga.color[k], g[i].color[k]);
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("fit_cloud basics: lr 0 identity, ground-truth init stays put") {
    Rng rng(41);
    GaussianCloud truth = random_scene(rng, 5);
    camera::ViewRig rig = camera::uniform_rig(4, 3.0, 0.15, square_intr(24, 30.0));
    std::vector<Image> targets;
    for (const auto& v : rig.views) targets.push_back(render(truth, rig.intrinsics, v).rgb);

    FitResult frozen = fit_cloud(targets, rig, truth, 5, 0.0, 1);
    for (int i = 0; i < truth.size(); ++i) {
        CHECK(frozen.cloud.gaussians[i].mu == truth.gaussians[i].mu);
        CHECK(frozen.cloud.gaussians[i].quat == truth.gaussians[i].quat);
        CHECK(frozen.cloud.gaussians[i].opacity == truth.gaussians[i].opacity);
    }
    for (double l : frozen.view_losses) CHECK(l < 1e-10);

    FitResult touched = fit_cloud(targets, rig, truth, 10, 1e-4, 1);
    for (double l : touched.view_losses) CHECK(l < 1e-6);
}

TEST_CASE("fit_cloud recovers a perturbed cloud") {
    Rng rng(43);
    GaussianCloud truth = random_scene(rng, 4);
    camera::ViewRig rig = camera::uniform_rig(6, 3.0, 0.1, square_intr(24, 30.0));
    std::vector<Image> targets;
    for (const auto& v : rig.views) targets.push_back(render(truth, rig.intrinsics, v).rgb);

    GaussianCloud init = truth;
    for (auto& g : init.gaussians) {
        for (int k = 0; k < 3; ++k) g.mu[k] += rng.uniform(-0.05, 0.05);
        for (int k = 0; k < 3; ++k) g.color[k] = std::clamp(g.color[k] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
    }
    FitResult fit = fit_cloud(targets, rig, init, 200, 5e-3, 7);
    double mean = std::accumulate(fit.view_losses.begin(), fit.view_losses.end(), 0.0) /
                  fit.view_losses.size();
    double init_loss = fit.loss_history.front();
    CHECK(mean < init_loss);
    CHECK(mean < 5e-4);

    // determinism
    FitResult again = fit_cloud(targets, rig, init, 200, 5e-3, 7);
    for (int i = 0; i < fit.cloud.size(); ++i)
        CHECK(fit.cloud.gaussians[i].mu == again.cloud.gaussians[i].mu);
}

TEST_CASE("fit_cloud rejects bad inputs") {
    camera::ViewRig rig = camera::uniform_rig(1, 3.0, 0.1, square_intr(8, 10.0));
    std::vector<Image> one = {Image(3, 8, 8)};
    CHECK_THROWS_AS(fit_cloud(one, rig, GaussianCloud{}, 1, 0.1, 0), std::invalid_argument);
    CHECK_THROWS_AS(fit_cloud({}, camera::ViewRig{}, GaussianCloud{}, 1, 0.1, 0),
                    std::invalid_argument);
}

TEST_CASE("cloud file round-trip") {
    Rng rng(47);
    GaussianCloud cloud = random_scene(rng, 7);
    auto path = std::filesystem::temp_directory_path() / "mvtk_test_cloud.gspl";
    save_cloud(path.string(), cloud);
    GaussianCloud back = load_cloud(path.string());
    REQUIRE(back.size() == 7);
    for (int i = 0; i < 7; ++i) {
        CHECK(back.gaussians[i].mu == cloud.gaussians[i].mu);
        CHECK(back.gaussians[i].scale == cloud.gaussians[i].scale);
        CHECK(back.gaussians[i].quat == cloud.gaussians[i].quat);
        CHECK(back.gaussians[i].opacity == cloud.gaussians[i].opacity);
        CHECK(back.gaussians[i].color == cloud.gaussians[i].color);
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_cloud("/nonexistent/mvtk.gspl"), std::runtime_error);
}

TEST_CASE("random_cloud is seeded and in-bounds") {
    GaussianCloud a = random_cloud(20, 5, Eigen::Vector3d(0, 0.1, 0),
                                   Eigen::Vector3d(0.4, 0.8, 0.4), 0.08);
    GaussianCloud b = random_cloud(20, 5, Eigen::Vector3d(0, 0.1, 0),
                                   Eigen::Vector3d(0.4, 0.8, 0.4), 0.08);
    REQUIRE(a.size() == 20);
    for (int i = 0; i < 20; ++i) {
        CHECK(a.gaussians[i].mu == b.gaussians[i].mu);
        CHECK(std::abs(a.gaussians[i].mu.x()) <= 0.4);
        CHECK(std::abs(a.gaussians[i].mu.y() - 0.1) <= 0.8);
        CHECK(a.gaussians[i].scale.minCoeff() > 0.0);
        CHECK(std::abs(a.gaussians[i].quat.norm() - 1.0) < 1e-12);
        CHECK(a.gaussians[i].opacity >= 0.0);
        CHECK(a.gaussians[i].opacity <= 1.0);
    }
}
