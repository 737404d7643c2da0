#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/geom.hpp"
#include "nirsplat/nn.hpp"

#include <cstdint>
#include <vector>

namespace nirsplat::encode {

/// Anchors of a point map in one view: projected pixel coordinates per point.
struct AnchorSet {
    RowMatrix uv;  // N x 2
    std::vector<std::uint8_t> valid;
};

/// Projects every valid point; points behind the camera or outside [0,W)x[0,H) are invalid.
AnchorSet anchor_points(const geom::PointMap& pmap, const geom::Pose& pose, const geom::CameraIntrinsics& K);

struct EncoderConfig {
    int frequencies = 8;
    int hidden = 64;
    int out_dim = 32;
};

/// Learnable sinusoidal encoding of anchor positions followed by a two-layer MLP.
///
/// Coordinates are normalised to [-1, 1] first; each frequency has its own
/// learnable scale lambda_f (initialised to 2^f * pi) applied to both axes.
/// Pre-MLP layout: [sin(l_f u) | sin(l_f v) | cos(l_f u) | cos(l_f v)], f fastest.
class PositionalEncoder {
public:
    PositionalEncoder() = default;
    PositionalEncoder(const EncoderConfig& cfg, std::uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    int out_dim() const { return cfg_.out_dim; }

    struct Cache {
        RowMatrix norm_uv;
        RowMatrix features;
        RowMatrix hidden_pre;
    };

    /// Sin/cos features for normalised coordinates (N x 2) -> N x 4F.
    RowMatrix sinusoidal(const RowMatrix& norm_uv) const;
    /// Full encoding of normalised coordinates.
    RowMatrix forward(const RowMatrix& norm_uv, Cache* cache = nullptr) const;
    /// Accumulates gradients for lambda and the MLP.
    void backward(const Cache& cache, const RowMatrix& d_out);

    void collect(nn::ParamList& out, const std::string& prefix = "pe");

    nn::Param lambda;  // 1 x F
    nn::Linear layer0;
    nn::Linear layer1;

private:
    EncoderConfig cfg_;
};

/// (2u/W - 1, 2v/H - 1).
Vec2 normalize_uv(const Vec2& uv, int width, int height);

/// Encoding of a single pixel position.
VecX positional_encoding(const Vec2& uv, int width, int height, const PositionalEncoder& enc);

struct PeGrid {
    int width = 0;
    int height = 0;
    RowMatrix pe;  // (H*W) x D
    /// Anchor pixel coordinates per pixel; falls back to the pixel itself when invalid.
    RowMatrix reference;  // (H*W) x 2
    std::vector<std::uint8_t> valid;
    PositionalEncoder::Cache cache;
};

/// Dense positional grid: every pixel carries the encoding of its own anchor.
/// Invalid anchors receive the encoding of the normalised origin and are flagged.
PeGrid pe_grid(const geom::PointMap& pmap, const geom::Pose& pose, const geom::CameraIntrinsics& K,
               const PositionalEncoder& enc);

}  // namespace nirsplat::encode
