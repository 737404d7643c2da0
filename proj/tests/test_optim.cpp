#include "nirsplat/optim.hpp"
#include "nirsplat/parallel.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

using namespace nirsplat;
using namespace nirsplat::optim;

namespace {

/// Straight-line evaluation of the normalised point-map distance.
double pointmap_oracle(const geom::PointMap& p, const geom::PointMap& q) {
    double zp = 0.0, zq = 0.0;
    int m = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!p.valid[i] || !q.valid[i]) continue;
        zp += std::sqrt(p.points[i].x() * p.points[i].x() + p.points[i].y() * p.points[i].y() +
                        p.points[i].z() * p.points[i].z());
        zq += std::sqrt(q.points[i].x() * q.points[i].x() + q.points[i].y() * q.points[i].y() +
                        q.points[i].z() * q.points[i].z());
        ++m;
    }
    zp /= m;
    zq /= m;
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!p.valid[i] || !q.valid[i]) continue;
        const double dx = p.points[i].x() / zp - q.points[i].x() / zq;
        const double dy = p.points[i].y() / zp - q.points[i].y() / zq;
        const double dz = p.points[i].z() / zp - q.points[i].z() / zq;
        sum += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return sum / m;
}

geom::PointMap unit_offsets(int w, int h) {
    geom::PointMap pm(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            pm.points[i] = Vec3(0.1 * x, 0.1 * y, 1.0);
            pm.valid[i] = 1;
        }
    }
    return pm;
}

struct Problem {
    field::GaussianField truth;
    field::GaussianField start;
    std::vector<TrainView> views;
};

Problem small_problem(std::uint64_t seed, int n_views = 3) {
    Rng rng(seed);
    Problem p;
    p.truth.sh_degree = 1;
    for (int i = 0; i < 6; ++i) p.truth.primitives.push_back(testing::random_primitive(rng, 1));
    p.start = p.truth;
    for (auto& g : p.start.primitives) {
        g.mu += Vec3(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05));
        for (auto& c : g.sh) c += rng.uniform(-0.1, 0.1);
    }
    const auto K = testing::small_camera(16, 16);
    for (int v = 0; v < n_views; ++v) {
        TrainView tv;
        tv.pose = testing::front_pose(0.4 * v);
        tv.K = K;
        tv.rgb = raster::render(p.truth, tv.pose, K, Vec3::Zero()).color;
        p.views.push_back(std::move(tv));
    }
    return p;
}

bool same_bits(const field::GaussianField& a, const field::GaussianField& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a.primitives[i];
        const auto& y = b.primitives[i];
        if (std::memcmp(x.mu.data(), y.mu.data(), sizeof(double) * 3) != 0) return false;
        if (std::memcmp(x.log_scale.data(), y.log_scale.data(), sizeof(double) * 3) != 0) return false;
        if (std::memcmp(x.rotation.data(), y.rotation.data(), sizeof(double) * 4) != 0) return false;
        if (std::memcmp(&x.opacity_logit, &y.opacity_logit, sizeof(double)) != 0) return false;
        if (x.sh.size() != y.sh.size() || std::memcmp(x.sh.data(), y.sh.data(), sizeof(double) * x.sh.size()) != 0)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("photometric loss examples") {
    const int w = 5, h = 4;
    Image obs(w, h, 3, 0.0);
    Image ren = obs;
    CHECK(photometric_loss(ren, obs) == 0.0);

    ren.at(2, 3, 0) = 0.3;
    Image grad;
    CHECK(photometric_loss(ren, obs, &grad) == doctest::Approx(0.3 / (w * h)).epsilon(1e-12));
    for (std::size_t i = 0; i < grad.data.size(); ++i) {
        if (i == ren.index(2, 3, 0))
            CHECK(grad.data[i] == doctest::Approx(1.0 / (w * h)));
        else
            CHECK(grad.data[i] == 0.0);
    }
    CHECK(photometric_loss(ren, obs, nullptr, Reduction::sum) == doctest::Approx(0.3));

    Rng rng(2);
    const Image a = testing::random_image(w, h, 3, rng);
    const Image b = testing::random_image(w, h, 3, rng);
    photometric_loss(a, b, &grad);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double s = (a.data[i] > b.data[i]) - (a.data[i] < b.data[i]);
        CHECK(grad.data[i] == doctest::Approx(s / (w * h)));
    }
    CHECK_THROWS(photometric_loss(a, Image(w + 1, h, 3)));
}

TEST_CASE("point-map loss matches a direct evaluation") {
    const auto target = unit_offsets(6, 5);
    CHECK(pointmap_regression_loss(target, target) == 0.0);
    for (double delta : {1e-3, 0.05, 0.7}) {
        auto pred = target;
        pred.points[13].x() += delta;
        CHECK(std::abs(pointmap_regression_loss(pred, target) - pointmap_oracle(pred, target)) < 1e-9);
    }

    Rng rng(8);
    auto pred = target;
    for (auto& p : pred.points) p += Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    pred.valid[3] = 0;
    CHECK(std::abs(pointmap_regression_loss(pred, target) - pointmap_oracle(pred, target)) < 1e-9);

    geom::PointMap empty(6, 5);
    CHECK_THROWS_AS(pointmap_regression_loss(empty, target), std::invalid_argument);
}

TEST_CASE("point-map loss is scale invariant") {
    const auto target = unit_offsets(4, 4);
    Rng rng(3);
    auto pred = target;
    for (auto& p : pred.points) p += Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
    const double base = pointmap_regression_loss(pred, target);
    for (int k = 0; k < 100; ++k) {
        const double s = std::exp(rng.uniform(-4.0, 4.0));
        auto scaled = pred;
        for (auto& p : scaled.points) p *= s;
        CHECK(pointmap_regression_loss(scaled, target) == doctest::Approx(base).epsilon(1e-10));
        CHECK(pointmap_regression_loss(target, scaled) == doctest::Approx(pointmap_regression_loss(target, pred)).epsilon(1e-10));
        auto same = target;
        for (auto& p : same.points) p *= s;
        CHECK(pointmap_regression_loss(same, target) < 1e-12);
    }
}

TEST_CASE("confidence loss") {
    const std::vector<double> L = {0.1, 0.4, 2.0, 0.05};
    const std::vector<double> ones(L.size(), 1.0);
    double sum_l = 0.0;
    for (double l : L) sum_l += l;
    CHECK(confidence_loss(ones, L, 0.2) == doctest::Approx(sum_l).epsilon(1e-15));

    const std::vector<double> O = {0.3, 2.0, 0.7, 5.0};
    double weighted = 0.0;
    for (std::size_t i = 0; i < L.size(); ++i) weighted += O[i] * L[i];
    CHECK(confidence_loss(O, L, 0.0) == doctest::Approx(weighted));

    // Golden-section search per pixel on O_i L_i - w log O_i.
    const double w = 0.2;
    double bound = 0.0;
    for (double l : L) {
        auto f = [&](double o) { return o * l - w * std::log(o); };
        double a = 1e-6, b = 100.0;
        const double r = (std::sqrt(5.0) - 1.0) / 2.0;
        for (int k = 0; k < 200; ++k) {
            const double c = b - r * (b - a), d = a + r * (b - a);
            if (f(c) < f(d))
                b = d;
            else
                a = c;
        }
        CHECK(std::abs(0.5 * (a + b) - w / l) < 1e-6);
        bound += w * (1.0 - std::log(w / l));
    }

    std::vector<double> optimum;
    for (double l : L) optimum.push_back(w / l);
    CHECK(confidence_loss(optimum, L, w) == doctest::Approx(bound).epsilon(1e-12));
    Rng rng(5);
    for (int k = 0; k < 1000; ++k) {
        std::vector<double> o;
        for (std::size_t i = 0; i < L.size(); ++i) o.push_back(std::exp(rng.uniform(-5, 5)));
        CHECK(confidence_loss(o, L, w) >= bound - 1e-12);
    }

    std::vector<double> g_o, g_l;
    confidence_loss(O, L, w, &g_o, &g_l);
    for (std::size_t i = 0; i < L.size(); ++i) {
        CHECK(g_o[i] == doctest::Approx(L[i] - w / O[i]));
        CHECK(g_l[i] == doctest::Approx(O[i]));
    }
    CHECK_THROWS_AS(confidence_loss(std::vector<double>{1.0, 0.0, 1.0, 1.0}, L, w), std::invalid_argument);
}

TEST_CASE("adam") {
    std::vector<double> x = {1.0, -2.0, 0.5};
    const std::vector<double> zero(3, 0.0);
    OptimState state;
    ParamGroup g{"x", x, zero, 0.1};
    adam_step({&g, 1}, state);
    CHECK(x == std::vector<double>{1.0, -2.0, 0.5});
    CHECK(state.step == 1);

    std::vector<double> s = {0.0};
    const std::vector<double> one = {1.0};
    OptimState fresh;
    ParamGroup gs{"s", s, one, 0.01};
    adam_step({&gs, 1}, fresh);
    CHECK(std::abs(s[0] + 0.01) < 1e-9);

    std::vector<double> q = {0.0};
    std::vector<double> dq = {0.0};
    OptimState qs;
    for (int k = 0; k < 100; ++k) {
        dq[0] = 2.0 * (q[0] - 3.0);
        ParamGroup gq{"q", q, dq, 0.1};
        adam_step({&gq, 1}, qs);
    }
    CHECK(std::abs(q[0] - 3.0) < 0.05);

    const std::vector<double> bad = {0.0, std::nan(""), 0.0};
    ParamGroup gb{"gauss.opacity", x, bad, 0.1};
    try {
        adam_step({&gb, 1}, state);
        FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("gauss.opacity") != std::string::npos);
    }
}

TEST_CASE("joint optimisation contracts") {
    auto p = small_problem(21);
    JointConfig cfg;
    cfg.iterations = 0;
    auto r = joint_optimize(p.start, p.views, cfg);
    CHECK(r.history.empty());
    CHECK(same_bits(r.field, p.start));

    cfg.iterations = 5;
    cfg.optimize_poses = true;
    cfg.lr = LearningRates{0, 0, 0, 0, 0, 0, 0};
    r = joint_optimize(p.start, p.views, cfg);
    CHECK(r.history.size() == 5);
    CHECK(same_bits(r.field, p.start));
    for (std::size_t v = 0; v < p.views.size(); ++v) {
        CHECK(r.poses[v].rotation.coeffs() == p.views[v].pose.rotation.coeffs());
        CHECK(r.poses[v].translation == p.views[v].pose.translation);
    }
    for (const auto& h : r.history) CHECK(h.total == r.history[0].total);
}

TEST_CASE("joint optimisation reduces the loss and is reproducible across worker counts") {
    auto p = small_problem(4);
    JointConfig cfg;
    cfg.iterations = 60;
    cfg.lr.sh = 0.02;
    cfg.lr.position = 5e-3;

    set_worker_count(1);
    const auto a = joint_optimize(p.start, p.views, cfg);
    set_worker_count(4);
    const auto b = joint_optimize(p.start, p.views, cfg);
    set_worker_count(1);

    REQUIRE(a.history.size() == 60);
    CHECK(a.history.back().photometric < 0.5 * a.history.front().photometric);
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(std::memcmp(&a.history[i].total, &b.history[i].total, sizeof(double)) == 0);
        CHECK(a.history[i].per_view == b.history[i].per_view);
    }
    CHECK(same_bits(a.field, b.field));
}

TEST_CASE("divergence guard") {
    auto p = small_problem(4);
    JointConfig cfg;
    cfg.iterations = 5;
    cfg.divergence_factor = 0.5;
    try {
        joint_optimize(p.start, p.views, cfg);
        FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("diverged at iteration 1") != std::string::npos);
    }
}

TEST_CASE("finite differences on a quadratic") {
    std::vector<double> x = {0.3, -1.2, 2.5, 0.0, 7.0};
    std::vector<double> grad;
    for (double v : x) grad.push_back(2.0 * v);
    auto f = [](std::span<const double> z) {
        double s = 0.0;
        for (double v : z) s += v * v;
        return s;
    };
    const auto rep = finite_diff_check(f, x, grad, 1e-5, 1e-9);
    CHECK(rep.checked == 5);
    CHECK(rep.max_rel_error < 1e-9);
    CHECK(rep.passed);

    grad[2] += 0.1;
    const auto broken = finite_diff_check(f, x, grad, 1e-5, 1e-9);
    CHECK_FALSE(broken.passed);
    CHECK(broken.worst_index == 2);

    const std::vector<int> coords = {0, 4};
    CHECK(finite_diff_check(f, x, grad, 1e-5, 1e-9, coords).checked == 2);
}

TEST_CASE("loss gradcheck suite") {
    for (const auto& r : run_gradcheck("losses")) {
        INFO(r.name);
        CHECK(r.report.passed);
        CHECK(r.report.max_rel_error <= r.tolerance);
    }
    CHECK_THROWS_AS(run_gradcheck("nope"), std::invalid_argument);
}

TEST_CASE("loss csv") {
    std::vector<LossReport> h(3);
    for (int i = 0; i < 3; ++i) h[i].total = h[i].photometric = 1.0 / (i + 1);
    const std::string path = testing::temp_dir("csv") + "/loss.csv";
    write_loss_csv(path, h);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "iteration,photometric,pointmap_reg,confidence,total");
    int rows = 0;
    while (std::getline(in, line)) {
        CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
        ++rows;
    }
    CHECK(rows == 3);
}
