#include "nirsplat/field.hpp"

#include "nirsplat/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <string>

namespace nirsplat::field {

namespace {

constexpr double kShC1 = 0.4886025119029199;
constexpr std::array<double, 5> kShC2 = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                         -1.0925484305920792, 0.5462742152960396};
constexpr std::array<double, 7> kShC3 = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                         0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                         -0.5900435899266435};

}  // namespace

Mat3 GaussianPrimitive::covariance() const { return build_covariance(log_scale, rotation); }

GaussianPrimitive& GaussianField::add() {
    auto& g = primitives.emplace_back();
    g.sh.assign(static_cast<std::size_t>(sh_coeff_count(sh_degree)) * 3, 0.0);
    return g;
}

void GaussianField::validate() const {
    if (sh_degree < 0 || sh_degree > kMaxShDegree)
        throw ContractViolation("field: sh_degree must be in [0, 3], got " + std::to_string(sh_degree));
    const std::size_t want = static_cast<std::size_t>(sh_coeff_count(sh_degree)) * 3;
    for (std::size_t i = 0; i < primitives.size(); ++i) {
        if (primitives[i].sh.size() != want)
            throw ContractViolation("field: primitive " + std::to_string(i) + " has wrong SH size");
    }
}

Mat3 quat_to_matrix(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Vec4 quat_to_matrix_vjp(const Vec4& q, const Mat3& g) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4 out;
    out[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    out[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                  w * g(2, 1) - 2 * x * g(2, 2));
    out[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                  z * g(2, 1) - 2 * y * g(2, 2));
    out[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                  x * g(2, 0) + y * g(2, 1));
    return out;
}

Vec4 normalize_quat(const Vec4& q) {
    const double n = q.norm();
    if (n < 1e-12) return Vec4(1, 0, 0, 0);
    return q / n;
}

Vec4 normalize_quat_vjp(const Vec4& q_raw, const Vec4& grad_unit) {
    const double n = q_raw.norm();
    if (n < 1e-12) return Vec4::Zero();
    const Vec4 u = q_raw / n;
    return (grad_unit - u * u.dot(grad_unit)) / n;
}

Mat3 build_covariance(const Vec3& log_scale, const Vec4& rotation) {
    const Mat3 r = quat_to_matrix(normalize_quat(rotation));
    const Vec3 s2 = (2.0 * log_scale).array().exp();
    Mat3 sigma = r * s2.asDiagonal() * r.transpose();
    // Exact symmetry regardless of rounding in the product.
    return 0.5 * (sigma + sigma.transpose());
}

double eval_gaussian(const Vec3& p, const GaussianPrimitive& g) {
    const Mat3 r = quat_to_matrix(normalize_quat(g.rotation));
    const Vec3 inv_s2 = (-2.0 * g.log_scale).array().exp();
    const Vec3 local = r.transpose() * (p - g.mu);
    const double maha = (local.array().square() * inv_s2.array()).sum();
    return g.opacity() * std::exp(-0.5 * maha);
}

void sh_basis(int degree, const Vec3& d, std::span<double> b, std::span<Vec3> grad) {
    const double x = d.x(), y = d.y(), z = d.z();
    const bool want_grad = !grad.empty();
    b[0] = kShC0;
    if (want_grad) grad[0].setZero();
    if (degree < 1) return;
    b[1] = -kShC1 * y;
    b[2] = kShC1 * z;
    b[3] = -kShC1 * x;
    if (want_grad) {
        grad[1] = Vec3(0, -kShC1, 0);
        grad[2] = Vec3(0, 0, kShC1);
        grad[3] = Vec3(-kShC1, 0, 0);
    }
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    b[4] = kShC2[0] * x * y;
    b[5] = kShC2[1] * y * z;
    b[6] = kShC2[2] * (2 * zz - xx - yy);
    b[7] = kShC2[3] * x * z;
    b[8] = kShC2[4] * (xx - yy);
    if (want_grad) {
        grad[4] = kShC2[0] * Vec3(y, x, 0);
        grad[5] = kShC2[1] * Vec3(0, z, y);
        grad[6] = kShC2[2] * Vec3(-2 * x, -2 * y, 4 * z);
        grad[7] = kShC2[3] * Vec3(z, 0, x);
        grad[8] = kShC2[4] * Vec3(2 * x, -2 * y, 0);
    }
    if (degree < 3) return;
    b[9] = kShC3[0] * y * (3 * xx - yy);
    b[10] = kShC3[1] * x * y * z;
    b[11] = kShC3[2] * y * (4 * zz - xx - yy);
    b[12] = kShC3[3] * z * (2 * zz - 3 * xx - 3 * yy);
    b[13] = kShC3[4] * x * (4 * zz - xx - yy);
    b[14] = kShC3[5] * z * (xx - yy);
    b[15] = kShC3[6] * x * (xx - 3 * yy);
    if (want_grad) {
        grad[9] = kShC3[0] * Vec3(6 * x * y, 3 * xx - 3 * yy, 0);
        grad[10] = kShC3[1] * Vec3(y * z, x * z, x * y);
        grad[11] = kShC3[2] * Vec3(-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z);
        grad[12] = kShC3[3] * Vec3(-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy);
        grad[13] = kShC3[4] * Vec3(4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z);
        grad[14] = kShC3[5] * Vec3(2 * x * z, -2 * y * z, xx - yy);
        grad[15] = kShC3[6] * Vec3(3 * xx - 3 * yy, -6 * x * y, 0);
    }
}

Vec3 sh_color_raw(std::span<const double> coeffs, int degree, const Vec3& dir) {
    std::array<double, 16> basis{};
    sh_basis(degree, dir, basis);
    Vec3 out = Vec3::Zero();
    for (int k = 0; k < sh_coeff_count(degree); ++k) {
        for (int c = 0; c < 3; ++c) out[c] += coeffs[k * 3 + c] * basis[k];
    }
    return out;
}

Vec3 sh_color(std::span<const double> coeffs, int degree, const Vec3& dir) {
    Vec3 raw = sh_color_raw(coeffs, degree, dir);
    return (raw.array() + 0.5).min(1.0).max(0.0);
}

AdcResult adaptive_density_control_tracked(const GaussianField& in, std::span<const double> grad_norms,
                                           const AdcConfig& cfg, std::span<const Vec3> position_grads) {
    if (grad_norms.size() != in.size())
        throw ContractViolation("adaptive_density_control: grad norms not aligned with primitives");
    if (!position_grads.empty() && position_grads.size() != in.size())
        throw ContractViolation("adaptive_density_control: position grads not aligned with primitives");

    AdcResult out;
    out.field.sh_degree = in.sh_degree;
    Rng rng(cfg.seed);
    const double split_shrink = std::log(1.6);

    auto keep = [&](const GaussianPrimitive& g, int src, bool created) {
        out.field.primitives.push_back(g);
        out.source.push_back(src);
        out.created.push_back(created);
    };

    for (std::size_t i = 0; i < in.size(); ++i) {
        const auto& g = in.primitives[i];
        const int src = static_cast<int>(i);
        if (g.opacity() < cfg.prune_opacity) {
            ++out.pruned;
            continue;
        }
        if (!(grad_norms[i] > cfg.densify_grad)) {
            keep(g, src, false);
            continue;
        }
        if (g.max_scale() < cfg.split_scale) {
            keep(g, src, false);
            GaussianPrimitive clone = g;
            if (!position_grads.empty() && position_grads[i].norm() > 0.0)
                clone.mu -= g.max_scale() * position_grads[i].normalized();
            keep(clone, src, true);
            ++out.cloned;
            continue;
        }
        const Mat3 r = quat_to_matrix(normalize_quat(g.rotation));
        const Vec3 scale = g.log_scale.array().exp();
        for (int child = 0; child < 2; ++child) {
            Vec3 z;
            do {
                z = Vec3(rng.normal(), rng.normal(), rng.normal());
            } while (z.squaredNorm() > 9.0);
            GaussianPrimitive c = g;
            c.mu = g.mu + r * scale.cwiseProduct(z);
            c.log_scale = g.log_scale.array() - split_shrink;
            keep(c, src, true);
        }
        ++out.split;
    }

    if (out.field.empty() && !in.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < in.size(); ++i) {
            if (in.primitives[i].opacity_logit > in.primitives[best].opacity_logit) best = i;
        }
        keep(in.primitives[best], static_cast<int>(best), false);
        --out.pruned;
    }
    return out;
}

GaussianField adaptive_density_control(const GaussianField& field, std::span<const double> grad_norms,
                                       const AdcConfig& cfg, std::span<const Vec3> position_grads) {
    return adaptive_density_control_tracked(field, grad_norms, cfg, position_grads).field;
}

}  // namespace nirsplat::field
