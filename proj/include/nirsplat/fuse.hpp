#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/field.hpp"
#include "nirsplat/geom.hpp"
#include "nirsplat/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nirsplat::fuse {

enum class FeatureKind { rgb, nir, nr, ntr, txt };

/// Dense (H*W x C) feature grid or an L x C token sequence.
struct FeatureMap {
    FeatureKind kind = FeatureKind::rgb;
    int height = 0;
    int width = 0;
    bool tokens = false;
    RowMatrix data;

    static FeatureMap dense(FeatureKind kind, int height, int width, RowMatrix data);
    static FeatureMap token_sequence(FeatureKind kind, RowMatrix data);
    int channels() const { return static_cast<int>(data.cols()); }
    int count() const { return static_cast<int>(data.rows()); }
};

/// Three 3x3 convolutions (receptive field 7) with SiLU between them.
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    FeatureExtractor(int in_channels, int channels, std::uint64_t seed);

    struct Cache {
        RowMatrix input;
        RowMatrix pre0;
        RowMatrix pre1;
        int height = 0;
        int width = 0;
    };

    FeatureMap forward(const Image& image, FeatureKind kind, Cache* cache = nullptr) const;
    /// Accumulates weight gradients from d loss / d features.
    void backward(const Cache& cache, const RowMatrix& d_features);
    void collect(nn::ParamList& out, const std::string& prefix);

    int in_channels() const { return conv0.in_ch; }

    nn::Conv3x3 conv0, conv1, conv2;
};

/// Features of an RGB (3 channels) or NIR (1 channel) image.
FeatureMap extract_features(const Image& image, FeatureKind which, const FeatureExtractor& net);

/// Bilinear read of a (H*W x C) map at a continuous pixel location, clamped to the border.
/// The optional outputs receive d value / d x and d value / d y (zero along a clamped axis).
void bilinear_sample(const RowMatrix& map, int height, int width, double x, double y, double* out, int channels,
                     int channel_offset = 0, double* d_dx = nullptr, double* d_dy = nullptr);

enum class AttentionKind { deformable, token };

struct BlockConfig {
    int channels = 32;
    int heads = 4;
    int points = 4;
    int ffn_hidden = 64;
    /// When false the block returns the projected attention output only
    /// (no residual, layer norms or feed-forward sublayer).
    bool residual = true;
};

/// Cross-attention block: deformable sampling of a dense key/value map, or
/// scaled dot-product attention over a token sequence.
class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(AttentionKind kind, const BlockConfig& cfg, std::uint64_t seed);

    struct Cache {
        RowMatrix query_in;   // [x | pe]
        RowMatrix q;
        RowMatrix offsets;
        RowMatrix weights;    // softmaxed, N x (heads*points) or N x (heads*L)
        RowMatrix values;     // projected key/value stream
        RowMatrix keys;       // token mode
        RowMatrix attended;   // per-head combined values before W_o
        RowMatrix attn;       // after W_o
        RowMatrix sum1;
        nn::LayerNorm::Cache ln1;
        RowMatrix y1;
        RowMatrix ffn_pre;
        nn::LayerNorm::Cache ln2;
        RowMatrix reference;
    };

    struct Grads {
        RowMatrix d_query;
        RowMatrix d_keyval;
        RowMatrix d_pe;
    };

    /// query/pe: N x C dense; keyval: dense (same H, W) or tokens; reference: N x 2 pixel coordinates.
    RowMatrix forward(const FeatureMap& query, const FeatureMap& keyval, const RowMatrix& pe,
                      const RowMatrix& reference, Cache* cache = nullptr) const;
    Grads backward(const FeatureMap& query, const FeatureMap& keyval, const Cache& cache, const RowMatrix& d_out);
    void collect(nn::ParamList& out, const std::string& prefix);

    AttentionKind kind() const { return kind_; }
    const BlockConfig& config() const { return cfg_; }

    nn::Linear w_q;
    nn::Linear w_k;        // token mode only, bias-free
    nn::Linear w_v;        // bias-free
    nn::Linear w_o;        // bias-free
    nn::Linear offset_net; // deformable mode only
    nn::Linear weight_net; // deformable mode only
    nn::LayerNorm ln1, ln2;
    nn::Linear ffn0, ffn1;

private:
    AttentionKind kind_ = AttentionKind::deformable;
    BlockConfig cfg_;
};

/// Caches for a stack of blocks applied one after another.
struct StackCache {
    std::vector<RowMatrix> inputs;
    std::vector<AttentionBlock::Cache> blocks;
};

/// RGB stream queries NIR through stacked deformable blocks.
FeatureMap fuse_nir_rgb(const FeatureMap& f_rgb, const FeatureMap& f_nir, const RowMatrix& pe,
                        const RowMatrix& reference, const std::vector<AttentionBlock>& blocks,
                        StackCache* cache = nullptr);

/// Fused features query the text tokens through stacked token-attention blocks.
FeatureMap fuse_text(const FeatureMap& f_nr, const FeatureMap& f_txt, const RowMatrix& pe,
                     const std::vector<AttentionBlock>& blocks, StackCache* cache = nullptr);

struct StackGrads {
    RowMatrix d_query;
    RowMatrix d_keyval;
    RowMatrix d_pe;
};

StackGrads stack_backward(std::vector<AttentionBlock>& blocks, const FeatureMap& query, const FeatureMap& keyval,
                          const StackCache& cache, const RowMatrix& d_out);

struct DecoderConfig {
    int channels = 32;
    int hidden = 64;
    int sh_degree = 1;
    double offset_scale = 0.02;
    double log_scale_min = std::log(1e-4);
    double log_scale_max = std::log(0.1);
};

/// Raw output layout of the decoder head.
struct DecoderLayout {
    static constexpr int kMu = 0;
    static constexpr int kOpacity = 3;
    static constexpr int kScale = 4;
    static constexpr int kRotation = 7;
    static constexpr int kSh = 11;
    static int confidence(int sh_degree) { return kSh + 3 * field::sh_coeff_count(sh_degree); }
    static int width(int sh_degree) { return confidence(sh_degree) + 1; }
};

/// Per-pixel MLP producing one Gaussian per valid point-map pixel.
class GaussDecoder {
public:
    GaussDecoder() = default;
    GaussDecoder(const DecoderConfig& cfg, std::uint64_t seed);

    struct Cache {
        std::vector<int> pixels;  // decoded pixel index per primitive
        RowMatrix input;
        RowMatrix hidden_pre;
        RowMatrix raw;
    };

    struct Output {
        field::GaussianField field;
        /// Predicted confidence per primitive (exp of the confidence head).
        std::vector<double> confidence;
    };

    Output forward(const FeatureMap& f_ntr, const geom::PointMap& pmap, Cache* cache = nullptr) const;

    /// Gradients per primitive, aligned with Output::field.
    struct PrimitiveGrads {
        std::vector<Vec3> mu;
        std::vector<double> opacity_logit;
        std::vector<Vec3> log_scale;
        std::vector<Vec4> rotation;
        std::vector<double> sh;
        std::vector<double> confidence;
    };

    /// Accumulates weight gradients; returns d loss / d f_ntr (dense, zero at undecoded pixels).
    RowMatrix backward(const Cache& cache, const PrimitiveGrads& grads, int n_pixels);
    void collect(nn::ParamList& out, const std::string& prefix);

    const DecoderConfig& config() const { return cfg_; }

    nn::Linear layer0;
    nn::Linear layer1;

private:
    DecoderConfig cfg_;
};

/// One primitive per valid point-map pixel. Throws std::invalid_argument when no pixel is valid.
field::GaussianField decode_gaussians(const FeatureMap& f_ntr, const geom::PointMap& pmap, const GaussDecoder& dec);

}  // namespace nirsplat::fuse
