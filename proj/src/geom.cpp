#include "nirsplat/geom.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace nirsplat::geom {

void CameraIntrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ContractViolation("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ContractViolation("intrinsics: image size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
        throw ContractViolation("intrinsics: principal point outside the image");
}

std::size_t PointMap::valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

void PointMap::validate() const {
    const std::size_t n = static_cast<std::size_t>(width) * height;
    if (points.size() != n || confidence.size() != n || valid.size() != n)
        throw ContractViolation("point map: storage does not match its dimensions");
    for (std::size_t i = 0; i < n; ++i) {
        if (valid[i] && !(std::isfinite(confidence[i]) && confidence[i] > 0.0))
            throw ContractViolation("point map: confidence must be finite and positive at valid pixels");
    }
}

Mat3 CameraIntrinsics::matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
}

Pose Pose::inverse() const {
    Pose inv;
    inv.rotation = rotation.conjugate();
    inv.translation = -(inv.rotation * translation);
    return inv;
}

Pose Pose::compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
}

Projection project_camera_point(const Vec3& pc, const CameraIntrinsics& K) {
    Projection out;
    out.depth = pc.z();
    if (pc.z() <= kDepthEps) {
        out.behind_camera = true;
        return out;
    }
    // Same arithmetic as K * pc followed by the homogeneous divide.
    const Vec3 h = K.matrix() * pc;
    out.uv = Vec2(h.x() / h.z(), h.y() / h.z());
    return out;
}

Projection project_point(const Vec3& p, const Pose& pose, const CameraIntrinsics& K) {
    return project_camera_point(pose.transform(p), K);
}

Mat23 project_jacobian_camera(const Vec3& pc, const CameraIntrinsics& K) {
    if (pc.z() <= kDepthEps) throw ContractViolation("project_jacobian: point behind camera");
    const double iz = 1.0 / pc.z();
    const double iz2 = iz * iz;
    Mat23 j;
    j << K.fx * iz, 0.0, -K.fx * pc.x() * iz2, 0.0, K.fy * iz, -K.fy * pc.y() * iz2;
    return j;
}

Mat23 project_jacobian(const Vec3& p, const Pose& pose, const CameraIntrinsics& K) {
    return project_jacobian_camera(pose.transform(p), K);
}

Mat3 so3_exp(const Vec3& omega) {
    const double theta2 = omega.squaredNorm();
    const double theta = std::sqrt(theta2);
    const Mat3 w = skew(omega);
    double a, b;
    if (theta < 1e-8) {
        a = 1.0 - theta2 / 6.0;
        b = 0.5 - theta2 / 24.0;
    } else {
        a = std::sin(theta) / theta;
        b = (1.0 - std::cos(theta)) / theta2;
    }
    return Mat3::Identity() + a * w + b * w * w;
}

Pose se3_apply_increment(const Pose& pose, const Vec6& twist) {
    if (twist.isZero(0.0)) return pose;
    const Vec3 omega = twist.head<3>();
    Pose out;
    Eigen::Quaterniond dq(so3_exp(omega));
    out.rotation = (dq * pose.rotation).normalized();
    out.translation = pose.translation + twist.tail<3>();
    return out;
}

double rotation_angle_between(const Pose& a, const Pose& b) {
    return a.rotation.angularDistance(b.rotation);
}

Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
    const Vec3 forward = (target - eye).normalized();
    const Vec3 right = forward.cross(up).normalized();
    const Vec3 down = forward.cross(right);
    Mat3 r;
    r.row(0) = right.transpose();
    r.row(1) = down.transpose();
    r.row(2) = forward.transpose();
    Pose pose;
    pose.rotation = Eigen::Quaterniond(r).normalized();
    pose.translation = -(pose.rotation * eye);
    return pose;
}

nlohmann::json to_json(const Pose& pose) {
    const auto& q = pose.rotation;
    const auto& t = pose.translation;
    return {{"q", {q.w(), q.x(), q.y(), q.z()}}, {"t", {t.x(), t.y(), t.z()}}};
}

Pose pose_from_json(const nlohmann::json& j) {
    const auto& q = j.at("q");
    const auto& t = j.at("t");
    if (q.size() != 4 || t.size() != 3) throw std::invalid_argument("pose json: expected q[4] and t[3]");
    Pose pose;
    pose.rotation = Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                                       q[3].get<double>());
    pose.translation = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
    return pose;
}

nlohmann::json to_json(const CameraIntrinsics& K) {
    return {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"w", K.width}, {"h", K.height}};
}

CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
    CameraIntrinsics K;
    K.fx = j.at("fx").get<double>();
    K.fy = j.at("fy").get<double>();
    K.cx = j.at("cx").get<double>();
    K.cy = j.at("cy").get<double>();
    K.width = j.at("w").get<int>();
    K.height = j.at("h").get<int>();
    K.validate();
    return K;
}

}  // namespace nirsplat::geom
