#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/field.hpp"
#include "nirsplat/geom.hpp"
#include "nirsplat/rng.hpp"

#include <filesystem>
#include <string>

namespace testing {

using namespace nirsplat;

/// Fresh empty directory under the system temp dir.
inline std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("nirsplat_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

inline Image random_image(int w, int h, int c, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Image img(w, h, c);
    for (auto& v : img.data) v = rng.uniform(lo, hi);
    return img;
}

inline Vec4 random_quat(Rng& rng) {
    Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q / q.norm();
}

inline field::GaussianPrimitive random_primitive(Rng& rng, int sh_degree) {
    field::GaussianPrimitive g;
    g.mu = Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
    g.opacity_logit = rng.uniform(-1, 2);
    g.log_scale = Vec3(rng.uniform(-2.5, -1.5), rng.uniform(-2.5, -1.5), rng.uniform(-2.5, -1.5));
    g.rotation = random_quat(rng);
    g.sh.resize(3 * field::sh_coeff_count(sh_degree));
    for (auto& c : g.sh) c = rng.uniform(-0.4, 0.4);
    return g;
}

inline geom::CameraIntrinsics small_camera(int w = 24, int h = 24) {
    geom::CameraIntrinsics K;
    K.width = w;
    K.height = h;
    K.fx = K.fy = 1.2 * w;
    K.cx = (w - 1) / 2.0;
    K.cy = (h - 1) / 2.0;
    return K;
}

/// Camera 2.5 units from the origin looking at it.
inline geom::Pose front_pose(double azimuth = 0.0) {
    const Vec3 eye(2.5 * std::sin(azimuth), -0.3, -2.5 * std::cos(azimuth));
    return geom::look_at(eye, Vec3::Zero(), Vec3(0, -1, 0));
}

}  // namespace testing
