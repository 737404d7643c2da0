#include "nirsplat/geom.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <numbers>

using namespace nirsplat;
using namespace nirsplat::geom;

namespace {

CameraIntrinsics cam(double f, double c) {
    CameraIntrinsics K;
    K.fx = K.fy = f;
    K.cx = K.cy = c;
    K.width = K.height = 100;
    return K;
}

Pose random_pose(Rng& rng) {
    Pose p;
    const Vec4 q = testing::random_quat(rng);
    p.rotation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]);
    p.translation = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 4));
    return p;
}

}  // namespace

TEST_CASE("project_point closed forms") {
    auto a = project_point(Vec3(0, 0, 1), Pose::identity(), cam(100, 50));
    CHECK(a.uv.x() == doctest::Approx(50));
    CHECK(a.uv.y() == doctest::Approx(50));
    CHECK(a.depth == doctest::Approx(1));
    CHECK_FALSE(a.behind_camera);

    auto b = project_point(Vec3(1, 0, 2), Pose::identity(), cam(100, 0));
    CHECK(b.uv.x() == doctest::Approx(50));
    CHECK(b.uv.y() == doctest::Approx(0));
    CHECK(b.depth == doctest::Approx(2));

    CHECK(project_point(Vec3(0, 0, -1), Pose::identity(), cam(100, 50)).behind_camera);
    CHECK(project_point(Vec3(0, 0, kDepthEps / 2), Pose::identity(), cam(100, 50)).behind_camera);
}

TEST_CASE("projection is invariant to camera-frame scaling") {
    Rng rng(3);
    const auto K = cam(80, 40);
    for (int i = 0; i < 20; ++i) {
        const Vec3 pc(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 3));
        const double s = rng.uniform(0.1, 10);
        const auto a = project_camera_point(pc, K);
        const auto b = project_camera_point(s * pc, K);
        CHECK((a.uv - b.uv).norm() < 1e-9);
    }
}

TEST_CASE("project_jacobian closed forms and finite differences") {
    const Mat23 j1 = project_jacobian(Vec3(0, 0, 1), Pose::identity(), cam(1, 0));
    Mat23 expected;
    expected << 1, 0, 0, 0, 1, 0;
    CHECK((j1 - expected).norm() < 1e-15);
    CHECK(project_jacobian(Vec3(0, 0, 2), Pose::identity(), cam(100, 0))(0, 0) == doctest::Approx(50));
    CHECK_THROWS_AS(project_jacobian(Vec3(0, 0, -1), Pose::identity(), cam(1, 0)), ContractViolation);

    Rng rng(11);
    const double h = 1e-5;
    for (int trial = 0; trial < 100; ++trial) {
        const Vec3 pc(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 4));
        const auto K = cam(rng.uniform(50, 200), rng.uniform(10, 90));
        const Mat23 J = project_jacobian_camera(pc, K);
        for (int k = 0; k < 3; ++k) {
            Vec3 e = Vec3::Zero();
            e[k] = h;
            const Vec2 num = (project_camera_point(pc + e, K).uv - project_camera_point(pc - e, K).uv) / (2 * h);
            for (int r = 0; r < 2; ++r) {
                const double denom = std::max({std::abs(J(r, k)), std::abs(num[r]), 1e-8});
                CHECK(std::abs(J(r, k) - num[r]) / denom < 1e-5);
            }
        }
    }
}

TEST_CASE("se3_apply_increment") {
    Rng rng(5);
    const Pose p = random_pose(rng);
    const Pose same = se3_apply_increment(p, Vec6::Zero());
    CHECK(same.rotation.coeffs() == p.rotation.coeffs());
    CHECK(same.translation == p.translation);

    Vec6 half_turn = Vec6::Zero();
    half_turn[2] = std::numbers::pi;
    const Pose r = se3_apply_increment(Pose::identity(), half_turn);
    CHECK((r.transform(Vec3(1, 0, 0)) - Vec3(-1, 0, 0)).norm() < 1e-9);

    for (int i = 0; i < 50; ++i) {
        const Pose base = random_pose(rng);
        Vec6 xi;
        for (int k = 0; k < 6; ++k) xi[k] = rng.uniform(-1, 1);
        if (xi.head<3>().norm() >= std::numbers::pi) xi.head<3>() *= 0.5;
        const Pose back = se3_apply_increment(se3_apply_increment(base, xi), -xi);
        CHECK(rotation_angle_between(back, base) < 1e-7);
        CHECK((back.translation - base.translation).norm() < 1e-7);
        CHECK(std::abs(back.rotation.norm() - 1.0) < 1e-9);
    }
}

TEST_CASE("so3_exp matches angle-axis and handles tiny angles") {
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        const Vec3 w(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
        const Mat3 ref = Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix();
        CHECK((so3_exp(w) - ref).norm() < 1e-12);
    }
    const Vec3 tiny(1e-10, -2e-10, 3e-11);
    CHECK((so3_exp(tiny) - (Mat3::Identity() + skew(tiny))).norm() < 1e-15);
    CHECK(so3_exp(Vec3::Zero()) == Mat3::Identity());
}

TEST_CASE("pose rotation is orthonormal") {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        Pose p = random_pose(rng);
        Vec6 xi;
        for (int k = 0; k < 6; ++k) xi[k] = rng.uniform(-3, 3);
        p = se3_apply_increment(p, xi);
        const Mat3 R = p.rotation_matrix();
        CHECK((R.transpose() * R - Mat3::Identity()).norm() < 1e-9);
        CHECK(std::abs(R.determinant() - 1.0) < 1e-9);
        CHECK(std::abs(p.rotation.norm() - 1.0) < 1e-9);
    }
}

TEST_CASE("compose, inverse and look_at") {
    Rng rng(4);
    const Pose a = random_pose(rng);
    const Pose id = a.compose(a.inverse());
    CHECK(rotation_angle_between(id, Pose::identity()) < 1e-9);
    CHECK(id.translation.norm() < 1e-9);

    const Vec3 eye(1, -2, 3);
    const Pose p = look_at(eye, Vec3::Zero(), Vec3(0, -1, 0));
    CHECK((p.center() - eye).norm() < 1e-12);
    const auto K = cam(100, 50);
    const auto proj = project_point(Vec3::Zero(), p, K);
    CHECK(proj.uv.x() == doctest::Approx(50));
    CHECK(proj.uv.y() == doctest::Approx(50));
    CHECK(proj.depth == doctest::Approx(eye.norm()));
}

TEST_CASE("intrinsics validation and JSON layout") {
    CameraIntrinsics bad = cam(100, 50);
    bad.fx = 0;
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    bad = cam(100, 100);
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    CHECK_NOTHROW(cam(100, 50).validate());

    const auto kj = to_json(cam(100, 50));
    for (const char* key : {"fx", "fy", "cx", "cy", "w", "h"}) CHECK(kj.contains(key));
    const auto K2 = intrinsics_from_json(kj);
    CHECK(K2.fx == 100);
    CHECK(K2.width == 100);

    Rng rng(2);
    const Pose p = random_pose(rng);
    const auto pj = to_json(p);
    CHECK(pj.at("q").size() == 4);
    CHECK(pj.at("t").size() == 3);
    const Pose q = pose_from_json(nlohmann::json::parse(pj.dump()));
    CHECK(q.rotation.coeffs() == p.rotation.coeffs());
    CHECK(q.translation == p.translation);
}

TEST_CASE("point map validation") {
    PointMap pm(2, 2);
    pm.valid[0] = 1;
    CHECK(pm.valid_count() == 1);
    CHECK_NOTHROW(pm.validate());
    pm.confidence[0] = 0.0;
    CHECK_THROWS_AS(pm.validate(), ContractViolation);
    pm.confidence[0] = 1.0;
    pm.points.pop_back();
    CHECK_THROWS_AS(pm.validate(), ContractViolation);
}
