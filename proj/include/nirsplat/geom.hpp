#pragma once

#include "nirsplat/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <vector>

namespace nirsplat::geom {

/// Points with camera-frame depth at or below this are treated as behind the camera.
inline constexpr double kDepthEps = 1e-6;

struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;

    /// Throws ContractViolation if focal lengths or principal point are out of range.
    void validate() const;
    Mat3 matrix() const;
};

/// World-to-camera rigid transform x_cam = R * x_world + t.
struct Pose {
    Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
    Vec3 translation = Vec3::Zero();

    static Pose identity() { return {}; }
    Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }
    Vec3 transform(const Vec3& p) const { return rotation * p + translation; }
    /// Camera centre in world coordinates.
    Vec3 center() const { return -(rotation.conjugate() * translation); }
    Pose inverse() const;
    /// (*this) after `other`: x -> this(other(x)).
    Pose compose(const Pose& other) const;
};

/// Dense per-pixel 3D points with confidences, pixel-aligned with one view.
struct PointMap {
    int width = 0;
    int height = 0;
    std::vector<Vec3> points;
    std::vector<double> confidence;
    std::vector<std::uint8_t> valid;

    PointMap() = default;
    PointMap(int w, int h)
        : width(w), height(h), points(static_cast<std::size_t>(w) * h, Vec3::Zero()),
          confidence(static_cast<std::size_t>(w) * h, 1.0), valid(static_cast<std::size_t>(w) * h, 0) {}
    std::size_t size() const { return points.size(); }
    std::size_t valid_count() const;
    /// Throws ContractViolation on ragged storage or non-positive confidence at a valid pixel.
    void validate() const;
};

struct Projection {
    Vec2 uv = Vec2::Zero();
    double depth = 0.0;
    bool behind_camera = false;
};

/// Perspective projection of a world point. Sets behind_camera when depth <= kDepthEps.
Projection project_point(const Vec3& p, const Pose& pose, const CameraIntrinsics& K);

/// Projection of a point already expressed in the camera frame.
Projection project_camera_point(const Vec3& pc, const CameraIntrinsics& K);

/// d(uv)/d(p_camera) for the point p (world frame) seen from pose.
/// Throws ContractViolation when the point is behind the camera.
Mat23 project_jacobian(const Vec3& p, const Pose& pose, const CameraIntrinsics& K);
Mat23 project_jacobian_camera(const Vec3& pc, const CameraIntrinsics& K);

/// Rodrigues exponential of an axis-angle vector.
Mat3 so3_exp(const Vec3& omega);

/// Left-applies a twist (omega, v): R' = exp(omega) R, t' = t + v.
///
/// Twist layout is [omega_x, omega_y, omega_z, v_x, v_y, v_z]. Rotation acts
/// in the camera frame; the translation increment is added directly, which
/// makes applying +xi then -xi an exact round trip.
Pose se3_apply_increment(const Pose& pose, const Vec6& twist);

/// Rotation-matrix distance in radians between two poses.
double rotation_angle_between(const Pose& a, const Pose& b);

/// Camera at `eye` looking at `target` (+z forward, +y down in image space).
Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

nlohmann::json to_json(const Pose& pose);
Pose pose_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CameraIntrinsics& K);
CameraIntrinsics intrinsics_from_json(const nlohmann::json& j);

}  // namespace nirsplat::geom
