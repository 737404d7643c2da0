#include "nirsplat/field.hpp"
#include "support.hpp"

#include <doctest.h>
#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <numbers>

using namespace nirsplat;
using namespace nirsplat::field;

namespace {

/// Cofactor inverse, written out independently of Eigen's solver.
Mat3 inverse3(const Mat3& m) {
    Mat3 c;
    c(0, 0) = m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1);
    c(0, 1) = m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2);
    c(0, 2) = m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1);
    c(1, 0) = m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2);
    c(1, 1) = m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0);
    c(1, 2) = m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2);
    c(2, 0) = m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0);
    c(2, 1) = m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1);
    c(2, 2) = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    const double det = m(0, 0) * c(0, 0) + m(0, 1) * c(1, 0) + m(0, 2) * c(2, 0);
    return c / det;
}

/// Associated Legendre P_l^m(x) with the Condon-Shortley phase, by the standard recurrences.
double legendre(int l, int m, double x) {
    double pmm = 1.0;
    const double s = std::sqrt(std::max(0.0, 1 - x * x));
    for (int i = 1; i <= m; ++i) pmm *= -(2 * i - 1) * s;
    if (l == m) return pmm;
    double pmm1 = x * (2 * m + 1) * pmm;
    if (l == m + 1) return pmm1;
    double pll = 0.0;
    for (int ll = m + 2; ll <= l; ++ll) {
        pll = ((2 * ll - 1) * x * pmm1 - (ll + m - 1) * pmm) / (ll - m);
        pmm = pmm1;
        pmm1 = pll;
    }
    return pll;
}

double factorial(int n) { return n <= 1 ? 1.0 : n * factorial(n - 1); }

/// Real spherical harmonic Y_l^m from spherical angles, index l^2 + l + m.
double real_sh(int l, int m, const Vec3& d) {
    const double theta = std::acos(std::clamp(d.z(), -1.0, 1.0));
    const double phi = std::atan2(d.y(), d.x());
    const int am = std::abs(m);
    const double norm = std::sqrt((2 * l + 1) / (4 * std::numbers::pi) * factorial(l - am) / factorial(l + am));
    const double p = legendre(l, am, std::cos(theta));
    if (m == 0) return norm * p;
    if (m > 0) return std::sqrt(2.0) * norm * p * std::cos(m * phi);
    return std::sqrt(2.0) * norm * p * std::sin(am * phi);
}

Vec3 random_dir(Rng& rng) {
    Vec3 d(rng.normal(), rng.normal(), rng.normal());
    return d / d.norm();
}

}  // namespace

TEST_CASE("build_covariance closed forms") {
    CHECK((build_covariance(Vec3::Zero(), Vec4(1, 0, 0, 0)) - Mat3::Identity()).norm() < 1e-15);
    const Mat3 d = build_covariance(Vec3(std::log(2.0), 0, 0), Vec4(1, 0, 0, 0));
    CHECK((d - Vec3(4, 1, 1).asDiagonal().toDenseMatrix()).norm() < 1e-12);
}

TEST_CASE("build_covariance determinant, spectrum and PSD") {
    Rng rng(21);
    for (int i = 0; i < 1000; ++i) {
        const Vec3 ls(rng.uniform(-3, 1), rng.uniform(-3, 1), rng.uniform(-3, 1));
        const Mat3 s = build_covariance(ls, testing::random_quat(rng));
        CHECK((s - s.transpose()).norm() < 1e-12);
        CHECK(s.determinant() == doctest::Approx(std::exp(2 * ls.sum())).epsilon(1e-9));
        Eigen::LLT<Mat3> llt(s);
        CHECK(llt.info() == Eigen::Success);
        if (i < 20) {
            Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(s).eigenvalues();
            Vec3 want = (2 * ls).array().exp();
            std::sort(ev.data(), ev.data() + 3);
            std::sort(want.data(), want.data() + 3);
            CHECK((ev - want).norm() < 1e-9 * want.maxCoeff());
        }
    }
}

TEST_CASE("quat_to_matrix agrees with Eigen") {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const Vec4 q = testing::random_quat(rng);
        const Mat3 ref = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
        CHECK((quat_to_matrix(q) - ref).norm() < 1e-12);
    }
    CHECK(normalize_quat(Vec4::Zero()) == Vec4(1, 0, 0, 0));
}

TEST_CASE("eval_gaussian") {
    Rng rng(13);
    GaussianPrimitive g;
    g.opacity_logit = 0.7;
    g.mu = Vec3(0.1, -0.2, 0.3);
    CHECK(eval_gaussian(g.mu, g) == doctest::Approx(sigmoid(0.7)));
    CHECK(eval_gaussian(g.mu + Vec3(0, 1, 0), g) == doctest::Approx(sigmoid(0.7) * std::exp(-0.5)));

    for (int i = 0; i < 50; ++i) {
        g = testing::random_primitive(rng, 0);
        const Vec3 p = g.mu + Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
        const Mat3 inv = inverse3(build_covariance(g.log_scale, normalize_quat(g.rotation)));
        const Vec3 d = p - g.mu;
        const double want = g.opacity() * std::exp(-0.5 * d.dot(inv * d));
        CHECK(std::abs(eval_gaussian(p, g) - want) < 1e-10);
        CHECK(eval_gaussian(p, g) < g.opacity());
    }
}

TEST_CASE("SH basis matches the Legendre table") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 d = random_dir(rng);
        std::vector<double> b(sh_coeff_count(3));
        sh_basis(3, d, b);
        for (int l = 0; l <= 3; ++l) {
            for (int m = -l; m <= l; ++m) CHECK(std::abs(b[l * l + l + m] - real_sh(l, m, d)) < 1e-9);
        }
    }
}

TEST_CASE("sh_color against a term-by-term evaluation") {
    Rng rng(19);
    for (int degree = 0; degree <= 3; ++degree) {
        std::vector<double> coeffs(3 * sh_coeff_count(degree));
        for (auto& c : coeffs) c = rng.uniform(-0.3, 0.3);
        const Vec3 d = random_dir(rng);
        Vec3 want = Vec3::Zero();
        for (int l = 0; l <= degree; ++l) {
            for (int m = -l; m <= l; ++m) {
                const int k = l * l + l + m;
                for (int c = 0; c < 3; ++c) want[c] += coeffs[k * 3 + c] * real_sh(l, m, d);
            }
        }
        CHECK((sh_color_raw(coeffs, degree, d) - want).norm() < 1e-9);
        const Vec3 clamped = (want.array() + 0.5).cwiseMax(0.0).cwiseMin(1.0);
        CHECK((sh_color(coeffs, degree, d) - clamped).norm() < 1e-9);
    }
}

TEST_CASE("SH parity and DC direction independence") {
    Rng rng(23);
    std::vector<double> dc = {0.4, -0.2, 0.1};
    CHECK(sh_color(dc, 0, random_dir(rng)) == sh_color(dc, 0, random_dir(rng)));

    std::vector<double> band1(12, 0.0);
    for (int i = 3; i < 12; ++i) band1[i] = rng.uniform(-1, 1);
    const Vec3 d = random_dir(rng);
    CHECK((sh_color_raw(band1, 1, d) + sh_color_raw(band1, 1, -d)).norm() < 1e-15);

    CHECK(dc_from_color(0.5) == 0.0);
    std::vector<double> red = {dc_from_color(0.9), dc_from_color(0.2), dc_from_color(0.3)};
    CHECK((sh_color(red, 0, d) - Vec3(0.9, 0.2, 0.3)).norm() < 1e-12);
}

TEST_CASE("SH basis gradient matches finite differences") {
    Rng rng(29);
    const double h = 1e-6;
    for (int trial = 0; trial < 10; ++trial) {
        const Vec3 d = random_dir(rng);
        std::vector<double> b(16), bp(16), bm(16);
        std::vector<Vec3> g(16);
        sh_basis(3, d, b, g);
        for (int k = 0; k < 3; ++k) {
            Vec3 e = Vec3::Zero();
            e[k] = h;
            sh_basis(3, d + e, bp);
            sh_basis(3, d - e, bm);
            for (int i = 0; i < 16; ++i) CHECK(std::abs((bp[i] - bm[i]) / (2 * h) - g[i][k]) < 1e-6);
        }
    }
}

TEST_CASE("field validation") {
    GaussianField f;
    f.sh_degree = 1;
    f.add();
    CHECK(f.primitives[0].sh.size() == 12);
    CHECK_NOTHROW(f.validate());
    f.primitives[0].sh.pop_back();
    CHECK_THROWS_AS(f.validate(), ContractViolation);
    f.sh_degree = 4;
    CHECK_THROWS_AS(f.validate(), ContractViolation);
}

namespace {

GaussianField random_field(Rng& rng, int n) {
    GaussianField f;
    f.sh_degree = 1;
    for (int i = 0; i < n; ++i) f.primitives.push_back(testing::random_primitive(rng, 1));
    return f;
}

bool same_field(const GaussianField& a, const GaussianField& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a.primitives[i];
        const auto& y = b.primitives[i];
        if (x.mu != y.mu || x.opacity_logit != y.opacity_logit || x.log_scale != y.log_scale ||
            x.rotation != y.rotation || x.sh != y.sh)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("ADC no-op and prune") {
    Rng rng(31);
    const GaussianField f = random_field(rng, 6);
    const std::vector<double> low(6, 0.0);
    AdcConfig cfg;
    CHECK(same_field(adaptive_density_control(f, low, cfg), f));

    GaussianField g = f;
    g.primitives[2].opacity_logit = -20;
    const auto r = adaptive_density_control_tracked(g, low, cfg);
    CHECK(r.field.size() == 5);
    CHECK(r.pruned == 1);
    CHECK(std::find(r.source.begin(), r.source.end(), 2) == r.source.end());

    GaussianField dead = f;
    for (auto& p : dead.primitives) p.opacity_logit = -30;
    dead.primitives[4].opacity_logit = -25;
    const auto kept = adaptive_density_control_tracked(dead, low, cfg);
    REQUIRE(kept.field.size() == 1);
    CHECK(kept.source[0] == 4);

    CHECK_THROWS_AS(adaptive_density_control(f, std::vector<double>(5, 0.0), cfg), ContractViolation);
}

TEST_CASE("ADC clone moves against the gradient") {
    GaussianField f;
    f.sh_degree = 0;
    auto& g = f.add();
    g.log_scale = Vec3::Constant(std::log(0.001));
    g.opacity_logit = 2;
    AdcConfig cfg;
    cfg.split_scale = 0.01;
    const std::vector<double> high = {1.0};
    const std::vector<Vec3> grad = {Vec3(0, 2, 0)};
    const auto r = adaptive_density_control_tracked(f, high, cfg, grad);
    REQUIRE(r.field.size() == 2);
    CHECK(r.cloned == 1);
    CHECK(r.created == std::vector<bool>{false, true});
    CHECK((r.field.primitives[1].mu - Vec3(0, -0.001, 0)).norm() < 1e-15);
}

TEST_CASE("ADC split children stay near the parent") {
    Rng rng(37);
    AdcConfig cfg;
    cfg.split_scale = 0.01;
    int total = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        GaussianField f;
        f.sh_degree = 0;
        auto& g = f.add();
        g = testing::random_primitive(rng, 0);
        g.log_scale = Vec3(rng.uniform(-2, -1), rng.uniform(-2, -1), rng.uniform(-2, -1));
        cfg.seed = static_cast<std::uint64_t>(trial);
        const auto r = adaptive_density_control_tracked(f, std::vector<double>{1.0}, cfg);
        REQUIRE(r.field.size() == 2);
        const Mat3 inv = inverse3(build_covariance(g.log_scale, normalize_quat(g.rotation)));
        for (const auto& c : r.field.primitives) {
            const Vec3 d = c.mu - g.mu;
            CHECK(std::sqrt(d.dot(inv * d)) < 4.0);
            CHECK((c.log_scale - (g.log_scale.array() - std::log(1.6)).matrix()).norm() < 1e-15);
            ++total;
        }
    }
    CHECK(total == 2000);
}

TEST_CASE("ADC is deterministic for a seed") {
    Rng rng(41);
    const GaussianField f = random_field(rng, 20);
    std::vector<double> norms(20);
    for (auto& n : norms) n = rng.uniform(0, 4e-4);
    AdcConfig cfg;
    cfg.split_scale = 0.15;
    cfg.seed = 9;
    CHECK(same_field(adaptive_density_control(f, norms, cfg), adaptive_density_control(f, norms, cfg)));
}
