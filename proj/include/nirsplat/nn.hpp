#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace nirsplat::nn {

/// A named learnable tensor together with its accumulated gradient.
struct Param {
    RowMatrix value;
    RowMatrix grad;

    Param() = default;
    Param(int rows, int cols) : value(RowMatrix::Zero(rows, cols)), grad(RowMatrix::Zero(rows, cols)) {}
    void zero_grad() { grad.setZero(); }
    std::span<double> values() { return {value.data(), static_cast<std::size_t>(value.size())}; }
    std::span<const double> grads() const { return {grad.data(), static_cast<std::size_t>(grad.size())}; }
};

struct ParamRef {
    std::string name;
    Param* param;
};
using ParamList = std::vector<ParamRef>;

/// y = x W^T + b, rows are samples.
struct Linear {
    Param weight;  // out x in
    Param bias;    // 1 x out (0 x 0 when bias-free)
    bool has_bias = true;

    Linear() = default;
    Linear(int in, int out, bool with_bias = true);
    int in_dim() const { return static_cast<int>(weight.value.cols()); }
    int out_dim() const { return static_cast<int>(weight.value.rows()); }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    void init(Rng& rng, double gain = 1.0);
    RowMatrix forward(const RowMatrix& x) const;
    /// Accumulates parameter gradients; returns d loss / d x.
    RowMatrix backward(const RowMatrix& x, const RowMatrix& dy);
    void collect(ParamList& out, const std::string& prefix);
};

RowMatrix silu(const RowMatrix& x);
RowMatrix silu_backward(const RowMatrix& x, const RowMatrix& dy);

/// Per-row normalisation over channels with learnable gain and shift.
struct LayerNorm {
    Param gamma;  // 1 x C
    Param beta;   // 1 x C
    double eps = 1e-5;

    struct Cache {
        RowMatrix xhat;
        VecX inv_std;
    };

    LayerNorm() = default;
    explicit LayerNorm(int channels);
    RowMatrix forward(const RowMatrix& x, Cache* cache) const;
    RowMatrix backward(const Cache& cache, const RowMatrix& dy);
    void collect(ParamList& out, const std::string& prefix);
};

/// 3x3 convolution, stride 1, zero padding; maps are (H*W) x C row-major.
struct Conv3x3 {
    Param weight;  // out x (9 * in), tap-major: column = tap * in + channel
    Param bias;    // 1 x out
    int in_ch = 0;
    int out_ch = 0;

    Conv3x3() = default;
    Conv3x3(int in, int out);
    void init(Rng& rng);
    RowMatrix forward(const RowMatrix& x, int height, int width) const;
    RowMatrix backward(const RowMatrix& x, int height, int width, const RowMatrix& dy);
    void collect(ParamList& out, const std::string& prefix);
};

void zero_grads(const ParamList& params);
std::size_t parameter_count(const ParamList& params);

}  // namespace nirsplat::nn
