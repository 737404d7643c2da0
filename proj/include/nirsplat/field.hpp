#pragma once

#include "nirsplat/common.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace nirsplat::field {

inline constexpr int kMaxShDegree = 3;
inline constexpr double kShC0 = 0.28209479177387814;

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

struct GaussianPrimitive {
    Vec3 mu = Vec3::Zero();
    double opacity_logit = 0.0;
    Vec3 log_scale = Vec3::Zero();
    /// Quaternion (w, x, y, z); normalised wherever it is consumed.
    Vec4 rotation = Vec4(1, 0, 0, 0);
    /// (degree+1)^2 coefficients x 3 channels, coefficient-major: sh[k * 3 + c].
    std::vector<double> sh;

    double opacity() const { return sigmoid(opacity_logit); }
    Mat3 covariance() const;
    double max_scale() const { return std::exp(log_scale.maxCoeff()); }
};

struct GaussianField {
    int sh_degree = 1;
    std::vector<GaussianPrimitive> primitives;

    std::size_t size() const { return primitives.size(); }
    bool empty() const { return primitives.empty(); }
    /// Appends a primitive with SH storage sized for this field's degree.
    GaussianPrimitive& add();
    /// Throws ContractViolation on a degree outside [0, 3] or mismatched SH sizes.
    void validate() const;
};

/// Rotation matrix of a unit quaternion (w, x, y, z).
Mat3 quat_to_matrix(const Vec4& q);
/// Pulls a gradient on R back to the (unit) quaternion components.
Vec4 quat_to_matrix_vjp(const Vec4& q, const Mat3& grad_r);
/// Normalises q, falling back to identity for a zero vector.
Vec4 normalize_quat(const Vec4& q);
/// Pulls a gradient on normalize(q) back to the raw q.
Vec4 normalize_quat_vjp(const Vec4& q_raw, const Vec4& grad_unit);

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
Mat3 build_covariance(const Vec3& log_scale, const Vec4& rotation);

/// alpha * exp(-1/2 (p - mu)^T Sigma^-1 (p - mu)).
double eval_gaussian(const Vec3& p, const GaussianPrimitive& g);

/// Real SH basis (3DGS sign convention) evaluated at a unit direction.
/// When `grad` is given, it receives dB_k/d(direction) for each basis function.
void sh_basis(int degree, const Vec3& dir, std::span<double> basis, std::span<Vec3> grad = {});

/// sum_k c_k B_k(dir) per channel, before the 0.5 offset and clamp.
Vec3 sh_color_raw(std::span<const double> coeffs, int degree, const Vec3& dir);
/// clamp(0.5 + raw, 0, 1).
Vec3 sh_color(std::span<const double> coeffs, int degree, const Vec3& dir);

/// SH DC coefficient whose rendered color is `color`.
inline double dc_from_color(double color) { return (color - 0.5) / kShC0; }

struct AdcConfig {
    double prune_opacity = 0.005;
    double densify_grad = 2e-4;
    /// Absolute world-space scale; callers derive it from the scene extent.
    double split_scale = 0.01;
    std::uint64_t seed = 0;
};

struct AdcResult {
    GaussianField field;
    /// Index of the input primitive each output primitive came from.
    std::vector<int> source;
    /// True for clones and split children.
    std::vector<bool> created;
    int pruned = 0;
    int cloned = 0;
    int split = 0;
};

/// Prune / clone / split pass.
///
/// `position_grads`, when non-empty, gives the direction clones are shifted in
/// (against the gradient, by the primitive's largest scale). Split children
/// are drawn from the parent Gaussian truncated at Mahalanobis radius 3.
AdcResult adaptive_density_control_tracked(const GaussianField& field, std::span<const double> grad_norms,
                                           const AdcConfig& cfg, std::span<const Vec3> position_grads = {});

GaussianField adaptive_density_control(const GaussianField& field, std::span<const double> grad_norms,
                                       const AdcConfig& cfg, std::span<const Vec3> position_grads = {});

}  // namespace nirsplat::field
