#include "camera.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "errors.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace mvtk::camera {

void Intrinsics::validate() const {
    require(fx > 0 && fy > 0, "intrinsics: focal lengths must be positive");
    require(width > 0 && height > 0, "intrinsics: image size must be positive");
    require(cx >= 0 && cx < width && cy >= 0 && cy < height,
            "intrinsics: principal point outside image");
}

void validate_rotation(const Eigen::Matrix3d& R, double tol) {
    double ortho = (R.transpose() * R - Eigen::Matrix3d::Identity()).norm();
    require(ortho <= tol, "rotation: not orthonormal");
    require(std::abs(R.determinant() - 1.0) <= tol, "rotation: determinant != +1");
}

double rotation_correlation(const Eigen::Matrix3d& R_i, const Eigen::Matrix3d& R_j) {
    validate_rotation(R_i);
    validate_rotation(R_j);
    double cosang = ((R_i.transpose() * R_j).trace() - 1.0) / 2.0;
    cosang = std::clamp(cosang, -1.0, 1.0);
    return (cosang + 1.0) / 2.0;
}

Eigen::MatrixXd build_correlation_matrix(const ViewRig& rig) {
    int m = rig.size();
    require(m >= 1, "correlation matrix: empty rig");
    Eigen::MatrixXd C(m, m);
    for (int i = 0; i < m; ++i) {
        C(i, i) = 1.0;
        for (int j = i + 1; j < m; ++j) {
            double c = rotation_correlation(rig.views[i].R, rig.views[j].R);
            C(i, j) = c;
            C(j, i) = c;  // mirrored, so symmetry holds bit-exactly
        }
    }
    return C;
}

Eigen::VectorXd encode_camera_rotation(const Eigen::Matrix3d& R, int L) {
    validate_rotation(R);
    require(L >= 1, "camera encoding: L must be >= 1");
    Eigen::VectorXd out(18 * L);
    double r[9];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[i * 3 + j] = R(i, j);
    for (int k = 0; k < L; ++k) {
        double freq = std::ldexp(M_PI, k);  // 2^k * pi
        for (int i = 0; i < 9; ++i) out[18 * k + i] = std::sin(freq * r[i]);
        for (int i = 0; i < 9; ++i) out[18 * k + 9 + i] = std::cos(freq * r[i]);
    }
    return out;
}

Intrinsics default_intrinsics() {
    Intrinsics intr;
    intr.width = 64;
    intr.height = 96;
    intr.fx = 120.0;
    intr.fy = 120.0;
    intr.cx = intr.width / 2.0;
    intr.cy = intr.height / 2.0;
    return intr;
}

Extrinsics look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
    Eigen::Vector3d f = target - eye;
    require(f.norm() > 1e-12, "look_at: eye coincides with target");
    f.normalize();
    Eigen::Vector3d up(0, 1, 0);
    if (std::abs(f.dot(up)) > 1.0 - 1e-9) up = Eigen::Vector3d(0, 0, 1);
    Eigen::Vector3d s = f.cross(up).normalized();  // camera +x (right)
    Eigen::Vector3d u = s.cross(f);                // world up projected; camera -y
    Extrinsics e;
    e.R.row(0) = s;
    e.R.row(1) = -u;  // image y grows downward
    e.R.row(2) = f;
    e.t = -e.R * eye;
    return e;
}

Eigen::Vector3d orbit_position(double radius, double azimuth, double elevation) {
    double ce = std::cos(elevation);
    return radius * Eigen::Vector3d(std::sin(azimuth) * ce, std::sin(elevation),
                                    std::cos(azimuth) * ce);
}

ViewRig sample_azimuth_rig(int m, double radius, double elevation, std::uint64_t seed,
                           const Intrinsics& intr) {
    require(m >= 1, "sample_azimuth_rig: m must be >= 1");
    require(radius > 0, "sample_azimuth_rig: radius must be positive");
    intr.validate();
    Rng rng(seed);
    ViewRig rig;
    rig.intrinsics = intr;
    rig.views.reserve(m);
    for (int i = 0; i < m; ++i) {
        double az = rng.uniform() * 2.0 * M_PI;
        rig.views.push_back(look_at(orbit_position(radius, az, elevation),
                                    Eigen::Vector3d::Zero()));
    }
    return rig;
}

ViewRig uniform_rig(int n, double radius, double elevation, const Intrinsics& intr) {
    require(n >= 1, "uniform_rig: n must be >= 1");
    require(radius > 0, "uniform_rig: radius must be positive");
    intr.validate();
    ViewRig rig;
    rig.intrinsics = intr;
    rig.views.reserve(n);
    for (int k = 0; k < n; ++k) {
        double az = 2.0 * M_PI * k / n;
        rig.views.push_back(look_at(orbit_position(radius, az, elevation),
                                    Eigen::Vector3d::Zero()));
    }
    return rig;
}

double view_azimuth(const Extrinsics& e) {
    Eigen::Vector3d pos = -e.R.transpose() * e.t;
    double az = std::atan2(pos.x(), pos.z());
    if (az < 0) az += 2.0 * M_PI;
    return az;
}

std::string rig_to_json(const ViewRig& rig) {
    nlohmann::json j;
    j["intrinsics"] = {{"fx", rig.intrinsics.fx}, {"fy", rig.intrinsics.fy},
                       {"cx", rig.intrinsics.cx}, {"cy", rig.intrinsics.cy},
                       {"width", rig.intrinsics.width}, {"height", rig.intrinsics.height}};
    j["views"] = nlohmann::json::array();
    for (const auto& v : rig.views) {
        std::vector<double> r(9), t(3);
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) r[i * 3 + k] = v.R(i, k);
        for (int i = 0; i < 3; ++i) t[i] = v.t[i];
        j["views"].push_back({{"R", r}, {"t", t}});
    }
    return j.dump(2);
}

ViewRig rig_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ViewRig rig;
    const auto& ji = j.at("intrinsics");
    rig.intrinsics.fx = ji.at("fx").get<double>();
    rig.intrinsics.fy = ji.at("fy").get<double>();
    rig.intrinsics.cx = ji.at("cx").get<double>();
    rig.intrinsics.cy = ji.at("cy").get<double>();
    rig.intrinsics.width = ji.at("width").get<int>();
    rig.intrinsics.height = ji.at("height").get<int>();
    rig.intrinsics.validate();
    for (const auto& jv : j.at("views")) {
        Extrinsics e;
        auto r = jv.at("R").get<std::vector<double>>();
        auto t = jv.at("t").get<std::vector<double>>();
        expect(r.size() == 9 && t.size() == 3, "rig json: bad R/t lengths");
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) e.R(i, k) = r[i * 3 + k];
        for (int i = 0; i < 3; ++i) e.t[i] = t[i];
        validate_rotation(e.R);
        rig.views.push_back(e);
    }
    expect(!rig.views.empty(), "rig json: no views");
    return rig;
}

void save_rig(const std::string& path, const ViewRig& rig) {
    std::ofstream f(path);
    expect(f.good(), "save_rig: cannot open " + path);
    f << rig_to_json(rig) << "\n";
    expect(f.good(), "save_rig: write failed for " + path);
}

ViewRig load_rig(const std::string& path) {
    std::ifstream f(path);
    expect(f.good(), "load_rig: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return rig_from_json(text);
}

}  // namespace mvtk::camera
