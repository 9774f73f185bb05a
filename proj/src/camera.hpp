#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace mvtk::camera {

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    void validate() const;
};

// World -> camera map: x_cam = R * x_world + t. Camera space is the usual
// computer-vision frame: +x right, +y down in the image, +z forward.
struct Extrinsics {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
};

struct ViewRig {
    Intrinsics intrinsics;
    std::vector<Extrinsics> views;
    int size() const { return static_cast<int>(views.size()); }
};

// Throws invalid_argument unless R'R = I and det R = +1 within tol.
void validate_rotation(const Eigen::Matrix3d& R, double tol = 1e-6);

// Maps the angle between two camera orientations to [0, 1]:
// 1 for identical, 0 for opposite. The trace-derived cosine is clamped to
// [-1, 1] first so orthonormality drift cannot push the result outside range.
double rotation_correlation(const Eigen::Matrix3d& R_i, const Eigen::Matrix3d& R_j);

// Pairwise rotation_correlation over the rig; symmetric with exact unit
// diagonal.
Eigen::MatrixXd build_correlation_matrix(const ViewRig& rig);

// Sinusoidal features of the row-major flattened rotation. Layout per
// frequency k = 0..L-1, ascending: 9 entries sin(2^k pi r), then 9 entries
// cos(2^k pi r). Total length 18L.
Eigen::VectorXd encode_camera_rotation(const Eigen::Matrix3d& R, int L);

Intrinsics default_intrinsics();

// Camera at `eye` looking at `target` with +y world up (falls back to +z up
// when the view direction is vertical).
Extrinsics look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target);

// Camera position on the orbit circle: azimuth 0 sits on +z, azimuth grows
// toward +x, elevation tilts toward +y.
Eigen::Vector3d orbit_position(double radius, double azimuth, double elevation);

// m cameras at seeded uniform-random azimuths on a fixed-elevation circle,
// all looking at the origin.
ViewRig sample_azimuth_rig(int m, double radius, double elevation, std::uint64_t seed,
                           const Intrinsics& intr = default_intrinsics());

// n cameras at azimuths exactly 2*pi*k/n.
ViewRig uniform_rig(int n, double radius, double elevation,
                    const Intrinsics& intr = default_intrinsics());

// Azimuth of the camera position around the +y axis, in radians in [0, 2pi).
double view_azimuth(const Extrinsics& e);

void save_rig(const std::string& path, const ViewRig& rig);
ViewRig load_rig(const std::string& path);
std::string rig_to_json(const ViewRig& rig);
ViewRig rig_from_json(const std::string& text);

}  // namespace mvtk::camera
