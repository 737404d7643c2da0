#include "nirsplat/nn.hpp"

#include <cmath>

namespace nirsplat::nn {

Linear::Linear(int in, int out, bool with_bias) : weight(out, in), has_bias(with_bias) {
    if (with_bias) bias = Param(1, out);
}

void Linear::init(Rng& rng, double gain) {
    const double bound = gain / std::sqrt(static_cast<double>(in_dim()));
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = rng.uniform(-bound, bound);
    if (has_bias) bias.value.setZero();
}

RowMatrix Linear::forward(const RowMatrix& x) const {
    RowMatrix y = x * weight.value.transpose();
    if (has_bias) y.rowwise() += bias.value.row(0);
    return y;
}

RowMatrix Linear::backward(const RowMatrix& x, const RowMatrix& dy) {
    weight.grad.noalias() += dy.transpose() * x;
    if (has_bias) bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value;
}

void Linear::collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &weight});
    if (has_bias) out.push_back({prefix + ".b", &bias});
}

RowMatrix silu(const RowMatrix& x) {
    return x.unaryExpr([](double v) { return v * sigmoid(v); });
}

RowMatrix silu_backward(const RowMatrix& x, const RowMatrix& dy) {
    RowMatrix dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        const double s = sigmoid(v);
        dx.data()[i] = dy.data()[i] * s * (1.0 + v * (1.0 - s));
    }
    return dx;
}

LayerNorm::LayerNorm(int channels) : gamma(1, channels), beta(1, channels) { gamma.value.setOnes(); }

RowMatrix LayerNorm::forward(const RowMatrix& x, Cache* cache) const {
    const Eigen::Index n = x.rows();
    const Eigen::Index c = x.cols();
    RowMatrix xhat(n, c);
    VecX inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().mean();
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (x.row(i).array() - mean) * inv_std[i];
    }
    RowMatrix y = xhat.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

RowMatrix LayerNorm::backward(const Cache& cache, const RowMatrix& dy) {
    const Eigen::Index n = dy.rows();
    const double c = static_cast<double>(dy.cols());
    gamma.grad.row(0) += (dy.array() * cache.xhat.array()).matrix().colwise().sum();
    beta.grad.row(0) += dy.colwise().sum();
    RowMatrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    RowMatrix dx(n, dy.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean_d = dxhat.row(i).mean();
        const double mean_dx = (dxhat.row(i).array() * cache.xhat.row(i).array()).sum() / c;
        dx.row(i) = cache.inv_std[i] * (dxhat.row(i).array() - mean_d - cache.xhat.row(i).array() * mean_dx);
    }
    return dx;
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
}

Conv3x3::Conv3x3(int in, int out) : weight(out, 9 * in), bias(1, out), in_ch(in), out_ch(out) {}

void Conv3x3::init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(9.0 * in_ch);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = rng.uniform(-bound, bound);
    bias.value.setZero();
}

namespace {

RowMatrix im2col(const RowMatrix& x, int height, int width, int ch) {
    RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(height) * width, 9 * ch);
    for (int y = 0; y < height; ++y) {
        for (int xx = 0; xx < width; ++xx) {
            const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
            for (int tap = 0; tap < 9; ++tap) {
                const int sy = y + tap / 3 - 1;
                const int sx = xx + tap % 3 - 1;
                if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
                cols.block(row, tap * ch, 1, ch) = x.row(static_cast<Eigen::Index>(sy) * width + sx);
            }
        }
    }
    return cols;
}

RowMatrix col2im(const RowMatrix& cols, int height, int width, int ch) {
    RowMatrix x = RowMatrix::Zero(static_cast<Eigen::Index>(height) * width, ch);
    for (int y = 0; y < height; ++y) {
        for (int xx = 0; xx < width; ++xx) {
            const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
            for (int tap = 0; tap < 9; ++tap) {
                const int sy = y + tap / 3 - 1;
                const int sx = xx + tap % 3 - 1;
                if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
                x.row(static_cast<Eigen::Index>(sy) * width + sx) += cols.block(row, tap * ch, 1, ch);
            }
        }
    }
    return x;
}

}  // namespace

RowMatrix Conv3x3::forward(const RowMatrix& x, int height, int width) const {
    RowMatrix y = im2col(x, height, width, in_ch) * weight.value.transpose();
    y.rowwise() += bias.value.row(0);
    return y;
}

RowMatrix Conv3x3::backward(const RowMatrix& x, int height, int width, const RowMatrix& dy) {
    const RowMatrix cols = im2col(x, height, width, in_ch);
    weight.grad.noalias() += dy.transpose() * cols;
    bias.grad.row(0) += dy.colwise().sum();
    return col2im(dy * weight.value, height, width, in_ch);
}

void Conv3x3::collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &weight});
    out.push_back({prefix + ".b", &bias});
}

void zero_grads(const ParamList& params) {
    for (const auto& p : params) p.param->zero_grad();
}

std::size_t parameter_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.param->value.size());
    return n;
}

}  // namespace nirsplat::nn
