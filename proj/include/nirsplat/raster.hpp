#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/field.hpp"
#include "nirsplat/geom.hpp"

#include <memory>
#include <vector>

namespace nirsplat::raster {

/// Low-pass added to every projected covariance, in px^2.
inline constexpr double kBlurEps = 0.3;
inline constexpr double kAlphaMax = 0.999;
inline constexpr double kTransmittanceMin = 1e-4;
/// Footprint cutoff as a squared Mahalanobis radius (3 sigma).
inline constexpr double kCutoffMaha2 = 9.0;

struct Projected2D {
    Vec2 center = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    double depth = 0.0;
    bool culled = false;
};

/// EWA projection: cov2d = J W Sigma W^T J^T + kBlurEps * I.
Projected2D project_gaussian_2d(const field::GaussianPrimitive& g, const geom::Pose& pose,
                                const geom::CameraIntrinsics& K);

struct RenderOutput {
    Image color;  ///< H x W x 3
    Image alpha;  ///< H x W x 1, equals 1 - final transmittance
    std::vector<int> contrib_count;
};

struct RenderGradients {
    std::vector<Vec3> mu;
    std::vector<double> opacity_logit;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> rotation;
    /// Same layout as the field's SH storage, primitives back to back.
    std::vector<double> sh;
    /// d loss / d projected centre (pixels); feeds densification statistics.
    std::vector<Vec2> mean2d;
    /// Gradient w.r.t. a twist applied to the pose at identity (see geom::se3_apply_increment).
    Vec6 pose_twist = Vec6::Zero();

    void resize(std::size_t n, int sh_degree);
};

struct RenderTape;

/// Forward/backward renderer that keeps the forward tape for the backward pass.
///
/// Rows are processed in fixed chunks and per-chunk gradient buffers are
/// reduced in chunk order, so results are identical at any worker count.
class Rasterizer {
public:
    Rasterizer();
    ~Rasterizer();
    Rasterizer(Rasterizer&&) noexcept;
    Rasterizer& operator=(Rasterizer&&) noexcept;

    RenderOutput forward(const field::GaussianField& field, const geom::Pose& pose,
                         const geom::CameraIntrinsics& K, const Vec3& background);

    /// Gradients of sum(upstream * color). Throws std::logic_error without a prior forward.
    RenderGradients backward(const Image& upstream) const;

    bool has_tape() const { return static_cast<bool>(tape_); }

private:
    std::unique_ptr<RenderTape> tape_;
};

RenderOutput render(const field::GaussianField& field, const geom::Pose& pose, const geom::CameraIntrinsics& K,
                    const Vec3& background);

/// Forward + backward in one call.
RenderGradients render_backward(const field::GaussianField& field, const geom::Pose& pose,
                                const geom::CameraIntrinsics& K, const Vec3& background, const Image& upstream);

/// Composites arbitrary per-primitive values (N x k) with the same visibility and
/// weights as render(); used for depth and auxiliary channels.
Image render_features(const field::GaussianField& field, const geom::Pose& pose, const geom::CameraIntrinsics& K,
                      const RowMatrix& values, const VecX& background);

/// Smallest |maha^2 - 9| over all pixel/primitive pairs within the bounding boxes.
/// Finite-difference checks use it to keep pixels away from the footprint cutoff.
double cutoff_margin(const field::GaussianField& field, const geom::Pose& pose, const geom::CameraIntrinsics& K);

}  // namespace nirsplat::raster
