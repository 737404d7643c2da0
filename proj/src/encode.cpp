#include "nirsplat/encode.hpp"

#include <cmath>
#include <numbers>

namespace nirsplat::encode {

namespace {

/// Back-projected border pixels can land a round-off hair outside the image.
constexpr double kBorderSlack = 1e-9;

double snap_inside(double v) { return v < 0.0 && v > -kBorderSlack ? 0.0 : v; }

/// y = x W^T + b one row at a time in a fixed summation order, so a grid row
/// and a single-pixel encoding agree bit for bit.
RowMatrix affine_rows(const nn::Linear& l, const RowMatrix& x) {
    const RowMatrix& w = l.weight.value;
    RowMatrix y(x.rows(), w.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index o = 0; o < w.rows(); ++o) {
            double s = l.has_bias ? l.bias.value(0, o) : 0.0;
            for (Eigen::Index k = 0; k < w.cols(); ++k) s += x(i, k) * w(o, k);
            y(i, o) = s;
        }
    }
    return y;
}

}  // namespace

AnchorSet anchor_points(const geom::PointMap& pmap, const geom::Pose& pose, const geom::CameraIntrinsics& K) {
    AnchorSet out;
    const std::size_t n = pmap.size();
    out.uv = RowMatrix::Zero(static_cast<Eigen::Index>(n), 2);
    out.valid.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!pmap.valid[i]) continue;
        const auto proj = geom::project_point(pmap.points[i], pose, K);
        if (proj.behind_camera) continue;
        const Vec2 uv(snap_inside(proj.uv.x()), snap_inside(proj.uv.y()));
        if (!(uv.x() >= 0.0 && uv.x() < K.width && uv.y() >= 0.0 && uv.y() < K.height)) continue;
        out.uv.row(static_cast<Eigen::Index>(i)) = uv.transpose();
        out.valid[i] = 1;
    }
    return out;
}

PositionalEncoder::PositionalEncoder(const EncoderConfig& cfg, std::uint64_t seed)
    : lambda(1, cfg.frequencies), layer0(4 * cfg.frequencies, cfg.hidden), layer1(cfg.hidden, cfg.out_dim),
      cfg_(cfg) {
    for (int f = 0; f < cfg.frequencies; ++f) lambda.value(0, f) = std::ldexp(std::numbers::pi, f);
    Rng rng(seed);
    layer0.init(rng);
    layer1.init(rng);
}

RowMatrix PositionalEncoder::sinusoidal(const RowMatrix& norm_uv) const {
    const int f_count = cfg_.frequencies;
    RowMatrix e(norm_uv.rows(), 4 * f_count);
    for (Eigen::Index i = 0; i < norm_uv.rows(); ++i) {
        for (int j = 0; j < 2; ++j) {
            for (int f = 0; f < f_count; ++f) {
                const double arg = lambda.value(0, f) * norm_uv(i, j);
                e(i, j * f_count + f) = std::sin(arg);
                e(i, 2 * f_count + j * f_count + f) = std::cos(arg);
            }
        }
    }
    return e;
}

RowMatrix PositionalEncoder::forward(const RowMatrix& norm_uv, Cache* cache) const {
    RowMatrix feats = sinusoidal(norm_uv);
    RowMatrix pre = affine_rows(layer0, feats);
    RowMatrix out = affine_rows(layer1, nn::silu(pre));
    if (cache) {
        cache->norm_uv = norm_uv;
        cache->features = std::move(feats);
        cache->hidden_pre = std::move(pre);
    }
    return out;
}

void PositionalEncoder::backward(const Cache& cache, const RowMatrix& d_out) {
    const RowMatrix hidden = nn::silu(cache.hidden_pre);
    const RowMatrix d_hidden = layer1.backward(hidden, d_out);
    const RowMatrix d_pre = nn::silu_backward(cache.hidden_pre, d_hidden);
    const RowMatrix d_feat = layer0.backward(cache.features, d_pre);
    const int f_count = cfg_.frequencies;
    for (Eigen::Index i = 0; i < d_feat.rows(); ++i) {
        for (int j = 0; j < 2; ++j) {
            const double u = cache.norm_uv(i, j);
            for (int f = 0; f < f_count; ++f) {
                const double s = cache.features(i, j * f_count + f);
                const double c = cache.features(i, 2 * f_count + j * f_count + f);
                lambda.grad(0, f) += u * (d_feat(i, j * f_count + f) * c - d_feat(i, 2 * f_count + j * f_count + f) * s);
            }
        }
    }
}

void PositionalEncoder::collect(nn::ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".lambda", &lambda});
    out.push_back({prefix + ".mlp.w0", &layer0.weight});
    out.push_back({prefix + ".mlp.b0", &layer0.bias});
    out.push_back({prefix + ".mlp.w1", &layer1.weight});
    out.push_back({prefix + ".mlp.b1", &layer1.bias});
}

Vec2 normalize_uv(const Vec2& uv, int width, int height) {
    return Vec2(2.0 * uv.x() / width - 1.0, 2.0 * uv.y() / height - 1.0);
}

VecX positional_encoding(const Vec2& uv, int width, int height, const PositionalEncoder& enc) {
    RowMatrix p(1, 2);
    p.row(0) = normalize_uv(uv, width, height).transpose();
    return enc.forward(p).row(0).transpose();
}

PeGrid pe_grid(const geom::PointMap& pmap, const geom::Pose& pose, const geom::CameraIntrinsics& K,
               const PositionalEncoder& enc) {
    if (pmap.width != K.width || pmap.height != K.height)
        throw ContractViolation("pe_grid: point map is not aligned with the view");
    const AnchorSet anchors = anchor_points(pmap, pose, K);
    PeGrid grid;
    grid.width = K.width;
    grid.height = K.height;
    grid.valid = anchors.valid;
    const Eigen::Index n = static_cast<Eigen::Index>(pmap.size());
    RowMatrix norm(n, 2);
    grid.reference.resize(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec2 pixel(static_cast<double>(i % K.width), static_cast<double>(i / K.width));
        if (anchors.valid[i]) {
            const Vec2 uv = anchors.uv.row(i).transpose();
            grid.reference.row(i) = uv.transpose();
            norm.row(i) = normalize_uv(uv, K.width, K.height).transpose();
        } else {
            grid.reference.row(i) = pixel.transpose();
            norm.row(i).setZero();
        }
    }
    grid.pe = enc.forward(norm, &grid.cache);
    return grid;
}

}  // namespace nirsplat::encode
