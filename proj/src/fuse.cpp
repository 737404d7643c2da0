#include "nirsplat/fuse.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nirsplat::fuse {

FeatureMap FeatureMap::dense(FeatureKind kind, int height, int width, RowMatrix data) {
    if (data.rows() != static_cast<Eigen::Index>(height) * width)
        throw ContractViolation("feature map: row count does not match H*W");
    FeatureMap f;
    f.kind = kind;
    f.height = height;
    f.width = width;
    f.data = std::move(data);
    return f;
}

FeatureMap FeatureMap::token_sequence(FeatureKind kind, RowMatrix data) {
    FeatureMap f;
    f.kind = kind;
    f.tokens = true;
    f.height = static_cast<int>(data.rows());
    f.width = 1;
    f.data = std::move(data);
    return f;
}

// ---------------------------------------------------------------------------
// Feature extraction

FeatureExtractor::FeatureExtractor(int in_channels, int channels, std::uint64_t seed)
    : conv0(in_channels, channels), conv1(channels, channels), conv2(channels, channels) {
    Rng rng(seed);
    conv0.init(rng);
    conv1.init(rng);
    conv2.init(rng);
}

FeatureMap FeatureExtractor::forward(const Image& image, FeatureKind kind, Cache* cache) const {
    if (image.channels != conv0.in_ch)
        throw ContractViolation("extract_features: expected " + std::to_string(conv0.in_ch) + " channels, got " +
                                std::to_string(image.channels));
    const int h = image.height;
    const int w = image.width;
    RowMatrix input = Eigen::Map<const RowMatrix>(image.data.data(), static_cast<Eigen::Index>(h) * w, image.channels);
    RowMatrix pre0 = conv0.forward(input, h, w);
    RowMatrix pre1 = conv1.forward(nn::silu(pre0), h, w);
    RowMatrix out = conv2.forward(nn::silu(pre1), h, w);
    if (cache) {
        cache->input = std::move(input);
        cache->pre0 = std::move(pre0);
        cache->pre1 = std::move(pre1);
        cache->height = h;
        cache->width = w;
    }
    return FeatureMap::dense(kind, h, w, std::move(out));
}

void FeatureExtractor::backward(const Cache& cache, const RowMatrix& d_features) {
    const int h = cache.height;
    const int w = cache.width;
    const RowMatrix a1 = nn::silu(cache.pre1);
    const RowMatrix d_a1 = conv2.backward(a1, h, w, d_features);
    const RowMatrix d_pre1 = nn::silu_backward(cache.pre1, d_a1);
    const RowMatrix a0 = nn::silu(cache.pre0);
    const RowMatrix d_a0 = conv1.backward(a0, h, w, d_pre1);
    const RowMatrix d_pre0 = nn::silu_backward(cache.pre0, d_a0);
    conv0.backward(cache.input, h, w, d_pre0);
}

void FeatureExtractor::collect(nn::ParamList& out, const std::string& prefix) {
    conv0.collect(out, prefix + ".conv0");
    conv1.collect(out, prefix + ".conv1");
    conv2.collect(out, prefix + ".conv2");
}

FeatureMap extract_features(const Image& image, FeatureKind which, const FeatureExtractor& net) {
    const int want = which == FeatureKind::rgb ? 3 : which == FeatureKind::nir ? 1 : -1;
    if (want < 0) throw ContractViolation("extract_features: kind must be rgb or nir");
    if (image.channels != want) throw ContractViolation("extract_features: channel count does not match kind");
    return net.forward(image, which);
}

// ---------------------------------------------------------------------------
// Bilinear sampling

namespace {

struct BilinearTap {
    int i00, i10, i01, i11;
    double fx, fy;
    bool clamp_x, clamp_y;
};

BilinearTap bilinear_tap(int height, int width, double x, double y) {
    BilinearTap t{};
    t.clamp_x = !(x >= 0.0 && x <= width - 1);
    t.clamp_y = !(y >= 0.0 && y <= height - 1);
    x = std::clamp(x, 0.0, static_cast<double>(width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(height - 1));
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    x0 = std::min(x0, std::max(0, width - 2));
    y0 = std::min(y0, std::max(0, height - 2));
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    t.fx = x - x0;
    t.fy = y - y0;
    t.i00 = y0 * width + x0;
    t.i10 = y0 * width + x1;
    t.i01 = y1 * width + x0;
    t.i11 = y1 * width + x1;
    return t;
}

}  // namespace

void bilinear_sample(const RowMatrix& map, int height, int width, double x, double y, double* out, int channels,
                     int channel_offset, double* d_dx, double* d_dy) {
    const BilinearTap t = bilinear_tap(height, width, x, y);
    const double w00 = (1 - t.fx) * (1 - t.fy), w10 = t.fx * (1 - t.fy), w01 = (1 - t.fx) * t.fy,
                 w11 = t.fx * t.fy;
    for (int c = 0; c < channels; ++c) {
        const int col = channel_offset + c;
        const double v00 = map(t.i00, col), v10 = map(t.i10, col), v01 = map(t.i01, col), v11 = map(t.i11, col);
        out[c] = w00 * v00 + w10 * v10 + w01 * v01 + w11 * v11;
        if (d_dx) d_dx[c] = t.clamp_x ? 0.0 : (1 - t.fy) * (v10 - v00) + t.fy * (v11 - v01);
        if (d_dy) d_dy[c] = t.clamp_y ? 0.0 : (1 - t.fx) * (v01 - v00) + t.fx * (v11 - v10);
    }
}

namespace {

void bilinear_scatter(RowMatrix& map, int height, int width, double x, double y, const double* grad, int channels,
                      int channel_offset) {
    const BilinearTap t = bilinear_tap(height, width, x, y);
    const double w00 = (1 - t.fx) * (1 - t.fy), w10 = t.fx * (1 - t.fy), w01 = (1 - t.fx) * t.fy,
                 w11 = t.fx * t.fy;
    for (int c = 0; c < channels; ++c) {
        const int col = channel_offset + c;
        map(t.i00, col) += w00 * grad[c];
        map(t.i10, col) += w10 * grad[c];
        map(t.i01, col) += w01 * grad[c];
        map(t.i11, col) += w11 * grad[c];
    }
}

RowMatrix concat_cols(const RowMatrix& a, const RowMatrix& b) {
    RowMatrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

void softmax_rows_grouped(RowMatrix& m, int groups, int group_size) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (int g = 0; g < groups; ++g) {
            auto seg = m.row(i).segment(g * group_size, group_size);
            const double mx = seg.maxCoeff();
            seg = (seg.array() - mx).exp();
            seg /= seg.sum();
        }
    }
}

RowMatrix softmax_backward_grouped(const RowMatrix& w, const RowMatrix& dw, int groups, int group_size) {
    RowMatrix out(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (int g = 0; g < groups; ++g) {
            const auto ws = w.row(i).segment(g * group_size, group_size);
            const auto ds = dw.row(i).segment(g * group_size, group_size);
            const double dot = ws.dot(ds);
            out.row(i).segment(g * group_size, group_size) = ws.array() * (ds.array() - dot);
        }
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention block

AttentionBlock::AttentionBlock(AttentionKind kind, const BlockConfig& cfg, std::uint64_t seed)
    : kind_(kind), cfg_(cfg) {
    const int c = cfg.channels;
    if (c % cfg.heads != 0) throw ContractViolation("attention block: channels must divide evenly into heads");
    Rng rng(seed);
    w_q = nn::Linear(2 * c, c);
    w_q.init(rng);
    w_v = nn::Linear(c, c, false);
    w_v.init(rng);
    w_o = nn::Linear(c, c, false);
    w_o.init(rng);
    if (kind == AttentionKind::token) {
        w_k = nn::Linear(c, c, false);
        w_k.init(rng);
    } else {
        offset_net = nn::Linear(c, cfg.heads * cfg.points * 2);
        weight_net = nn::Linear(c, cfg.heads * cfg.points);
        // Zero weights; offsets start on rings of growing radius, one direction per head.
        for (int h = 0; h < cfg.heads; ++h) {
            const double angle = 2.0 * std::numbers::pi * h / cfg.heads;
            for (int p = 0; p < cfg.points; ++p) {
                offset_net.bias.value(0, 2 * (h * cfg.points + p)) = std::cos(angle) * (p + 1);
                offset_net.bias.value(0, 2 * (h * cfg.points + p) + 1) = std::sin(angle) * (p + 1);
            }
        }
    }
    ln1 = nn::LayerNorm(c);
    ln2 = nn::LayerNorm(c);
    ffn0 = nn::Linear(c, cfg.ffn_hidden);
    ffn0.init(rng);
    ffn1 = nn::Linear(cfg.ffn_hidden, c);
    ffn1.init(rng);
}

RowMatrix AttentionBlock::forward(const FeatureMap& query, const FeatureMap& keyval, const RowMatrix& pe,
                                  const RowMatrix& reference, Cache* cache) const {
    const int c = cfg_.channels;
    const int heads = cfg_.heads;
    const int dh = c / heads;
    const Eigen::Index n = query.data.rows();
    if (query.channels() != c || keyval.channels() != c || pe.cols() != c || pe.rows() != n)
        throw ContractViolation("attention block: channel width mismatch");
    if ((kind_ == AttentionKind::token) != keyval.tokens)
        throw ContractViolation("attention block: key/value variant does not match block kind");

    Cache local;
    Cache& cc = cache ? *cache : local;
    cc.query_in = concat_cols(query.data, pe);
    cc.q = w_q.forward(cc.query_in);
    cc.values = w_v.forward(keyval.data);
    cc.attended = RowMatrix::Zero(n, c);

    if (kind_ == AttentionKind::deformable) {
        if (keyval.height != query.height || keyval.width != query.width)
            throw ContractViolation("attention block: dense key/value map must match the query grid");
        if (reference.rows() != n || reference.cols() != 2)
            throw ContractViolation("attention block: reference points must be N x 2");
        const int pts = cfg_.points;
        cc.reference = reference;
        cc.offsets = offset_net.forward(cc.q);
        cc.weights = weight_net.forward(cc.q);
        softmax_rows_grouped(cc.weights, heads, pts);
        std::vector<double> sample(dh);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int h = 0; h < heads; ++h) {
                for (int p = 0; p < pts; ++p) {
                    const int k = h * pts + p;
                    const double x = reference(i, 0) + cc.offsets(i, 2 * k);
                    const double y = reference(i, 1) + cc.offsets(i, 2 * k + 1);
                    bilinear_sample(cc.values, keyval.height, keyval.width, x, y, sample.data(), dh, h * dh);
                    const double wgt = cc.weights(i, k);
                    for (int ch = 0; ch < dh; ++ch) cc.attended(i, h * dh + ch) += wgt * sample[ch];
                }
            }
        }
    } else {
        if (keyval.count() < 1) throw ContractViolation("attention block: empty token sequence");
        const int len = keyval.count();
        cc.keys = w_k.forward(keyval.data);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        cc.weights.resize(n, static_cast<Eigen::Index>(heads) * len);
        for (int h = 0; h < heads; ++h) {
            cc.weights.middleCols(h * len, len) =
                (cc.q.middleCols(h * dh, dh) * cc.keys.middleCols(h * dh, dh).transpose()) * scale;
        }
        softmax_rows_grouped(cc.weights, heads, len);
        for (int h = 0; h < heads; ++h) {
            cc.attended.middleCols(h * dh, dh) = cc.weights.middleCols(h * len, len) * cc.values.middleCols(h * dh, dh);
        }
    }
    cc.attn = w_o.forward(cc.attended);
    if (!cfg_.residual) return cc.attn;

    cc.sum1 = query.data + cc.attn;
    cc.y1 = ln1.forward(cc.sum1, &cc.ln1);
    cc.ffn_pre = ffn0.forward(cc.y1);
    const RowMatrix sum2 = cc.y1 + ffn1.forward(nn::silu(cc.ffn_pre));
    return ln2.forward(sum2, &cc.ln2);
}

AttentionBlock::Grads AttentionBlock::backward(const FeatureMap& query, const FeatureMap& keyval, const Cache& cc,
                                               const RowMatrix& d_out) {
    const int c = cfg_.channels;
    const int heads = cfg_.heads;
    const int dh = c / heads;
    const Eigen::Index n = query.data.rows();

    Grads g;
    RowMatrix d_attn;
    if (cfg_.residual) {
        const RowMatrix d_sum2 = ln2.backward(cc.ln2, d_out);
        const RowMatrix d_hidden = ffn1.backward(nn::silu(cc.ffn_pre), d_sum2);
        RowMatrix d_y1 = d_sum2 + ffn0.backward(cc.y1, nn::silu_backward(cc.ffn_pre, d_hidden));
        const RowMatrix d_sum1 = ln1.backward(cc.ln1, d_y1);
        g.d_query = d_sum1;
        d_attn = d_sum1;
    } else {
        g.d_query = RowMatrix::Zero(n, c);
        d_attn = d_out;
    }
    const RowMatrix d_attended = w_o.backward(cc.attended, d_attn);
    RowMatrix d_values = RowMatrix::Zero(cc.values.rows(), c);
    RowMatrix d_q;

    if (kind_ == AttentionKind::deformable) {
        const int pts = cfg_.points;
        RowMatrix d_offsets = RowMatrix::Zero(n, 2 * heads * pts);
        RowMatrix d_weights = RowMatrix::Zero(n, heads * pts);
        std::vector<double> sample(dh), sdx(dh), sdy(dh), d_sample(dh);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int h = 0; h < heads; ++h) {
                for (int p = 0; p < pts; ++p) {
                    const int k = h * pts + p;
                    const double x = cc.reference(i, 0) + cc.offsets(i, 2 * k);
                    const double y = cc.reference(i, 1) + cc.offsets(i, 2 * k + 1);
                    bilinear_sample(cc.values, keyval.height, keyval.width, x, y, sample.data(), dh, h * dh,
                                    sdx.data(), sdy.data());
                    const double wgt = cc.weights(i, k);
                    double dw = 0.0, dx = 0.0, dy = 0.0;
                    for (int ch = 0; ch < dh; ++ch) {
                        const double da = d_attended(i, h * dh + ch);
                        dw += da * sample[ch];
                        d_sample[ch] = wgt * da;
                        dx += d_sample[ch] * sdx[ch];
                        dy += d_sample[ch] * sdy[ch];
                    }
                    d_weights(i, k) = dw;
                    d_offsets(i, 2 * k) = dx;
                    d_offsets(i, 2 * k + 1) = dy;
                    bilinear_scatter(d_values, keyval.height, keyval.width, x, y, d_sample.data(), dh, h * dh);
                }
            }
        }
        const RowMatrix d_logits = softmax_backward_grouped(cc.weights, d_weights, heads, pts);
        d_q = offset_net.backward(cc.q, d_offsets) + weight_net.backward(cc.q, d_logits);
        g.d_keyval = w_v.backward(keyval.data, d_values);
    } else {
        const int len = keyval.count();
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        d_q = RowMatrix::Zero(n, c);
        RowMatrix d_keys = RowMatrix::Zero(len, c);
        for (int h = 0; h < heads; ++h) {
            const RowMatrix a = cc.weights.middleCols(h * len, len);
            const RowMatrix d_att_h = d_attended.middleCols(h * dh, dh);
            d_values.middleCols(h * dh, dh) = a.transpose() * d_att_h;
            const RowMatrix d_a = d_att_h * cc.values.middleCols(h * dh, dh).transpose();
            const RowMatrix d_s = softmax_backward_grouped(a, d_a, 1, len) * scale;
            d_q.middleCols(h * dh, dh) = d_s * cc.keys.middleCols(h * dh, dh);
            d_keys.middleCols(h * dh, dh) = d_s.transpose() * cc.q.middleCols(h * dh, dh);
        }
        g.d_keyval = w_v.backward(keyval.data, d_values) + w_k.backward(keyval.data, d_keys);
    }
    const RowMatrix d_query_in = w_q.backward(cc.query_in, d_q);
    g.d_query += d_query_in.leftCols(c);
    g.d_pe = d_query_in.rightCols(c);
    return g;
}

void AttentionBlock::collect(nn::ParamList& out, const std::string& prefix) {
    w_q.collect(out, prefix + ".w_q");
    if (kind_ == AttentionKind::token) w_k.collect(out, prefix + ".w_k");
    w_v.collect(out, prefix + ".w_v");
    w_o.collect(out, prefix + ".w_o");
    if (kind_ == AttentionKind::deformable) {
        offset_net.collect(out, prefix + ".offset");
        weight_net.collect(out, prefix + ".weight");
    }
    ln1.collect(out, prefix + ".ln1");
    ln2.collect(out, prefix + ".ln2");
    ffn0.collect(out, prefix + ".ffn0");
    ffn1.collect(out, prefix + ".ffn1");
}

// ---------------------------------------------------------------------------
// Stacks

namespace {

FeatureMap run_stack(const FeatureMap& query, const FeatureMap& keyval, const RowMatrix& pe,
                     const RowMatrix& reference, const std::vector<AttentionBlock>& blocks, FeatureKind out_kind,
                     StackCache* cache) {
    if (cache) {
        cache->inputs.clear();
        cache->blocks.assign(blocks.size(), {});
    }
    RowMatrix x = query.data;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (cache) cache->inputs.push_back(x);
        FeatureMap q = FeatureMap::dense(query.kind, query.height, query.width, x);
        x = blocks[b].forward(q, keyval, pe, reference, cache ? &cache->blocks[b] : nullptr);
    }
    return FeatureMap::dense(out_kind, query.height, query.width, std::move(x));
}

}  // namespace

FeatureMap fuse_nir_rgb(const FeatureMap& f_rgb, const FeatureMap& f_nir, const RowMatrix& pe,
                        const RowMatrix& reference, const std::vector<AttentionBlock>& blocks, StackCache* cache) {
    if (f_rgb.tokens || f_nir.tokens || f_rgb.height != f_nir.height || f_rgb.width != f_nir.width ||
        f_rgb.channels() != f_nir.channels() || pe.rows() != f_rgb.count() || pe.cols() != f_rgb.channels())
        throw ContractViolation("fuse_nir_rgb: RGB, NIR and positional maps must share shape");
    for (const auto& b : blocks) {
        if (b.kind() != AttentionKind::deformable) throw ContractViolation("fuse_nir_rgb: blocks must be deformable");
    }
    return run_stack(f_rgb, f_nir, pe, reference, blocks, FeatureKind::nr, cache);
}

FeatureMap fuse_text(const FeatureMap& f_nr, const FeatureMap& f_txt, const RowMatrix& pe,
                     const std::vector<AttentionBlock>& blocks, StackCache* cache) {
    if (!f_txt.tokens || f_txt.count() < 1) throw ContractViolation("fuse_text: token sequence must be non-empty");
    if (f_nr.tokens || f_txt.channels() != f_nr.channels() || pe.rows() != f_nr.count() ||
        pe.cols() != f_nr.channels())
        throw ContractViolation("fuse_text: channel width mismatch");
    for (const auto& b : blocks) {
        if (b.kind() != AttentionKind::token) throw ContractViolation("fuse_text: blocks must be token attention");
    }
    return run_stack(f_nr, f_txt, pe, RowMatrix(), blocks, FeatureKind::ntr, cache);
}

StackGrads stack_backward(std::vector<AttentionBlock>& blocks, const FeatureMap& query, const FeatureMap& keyval,
                          const StackCache& cache, const RowMatrix& d_out) {
    StackGrads g;
    g.d_keyval = RowMatrix::Zero(keyval.data.rows(), keyval.data.cols());
    g.d_pe = RowMatrix::Zero(query.data.rows(), query.data.cols());
    RowMatrix d = d_out;
    for (std::size_t b = blocks.size(); b-- > 0;) {
        const FeatureMap q = FeatureMap::dense(query.kind, query.height, query.width, cache.inputs[b]);
        auto bg = blocks[b].backward(q, keyval, cache.blocks[b], d);
        d = std::move(bg.d_query);
        g.d_keyval += bg.d_keyval;
        g.d_pe += bg.d_pe;
    }
    g.d_query = std::move(d);
    return g;
}

// ---------------------------------------------------------------------------
// Gaussian decoder

GaussDecoder::GaussDecoder(const DecoderConfig& cfg, std::uint64_t seed)
    : layer0(cfg.channels, cfg.hidden), layer1(cfg.hidden, DecoderLayout::width(cfg.sh_degree)), cfg_(cfg) {
    Rng rng(seed);
    layer0.init(rng);
    layer1.init(rng, 0.1);
}

GaussDecoder::Output GaussDecoder::forward(const FeatureMap& f_ntr, const geom::PointMap& pmap, Cache* cache) const {
    if (f_ntr.tokens || f_ntr.height != pmap.height || f_ntr.width != pmap.width)
        throw ContractViolation("decode_gaussians: features are not aligned with the point map");
    std::vector<int> pixels;
    for (std::size_t i = 0; i < pmap.size(); ++i) {
        if (pmap.valid[i]) pixels.push_back(static_cast<int>(i));
    }
    if (pixels.empty()) throw std::invalid_argument("decode_gaussians: point map has no valid pixels");

    const int d = cfg_.sh_degree;
    const int n_coeffs = field::sh_coeff_count(d);
    RowMatrix input(static_cast<Eigen::Index>(pixels.size()), f_ntr.channels());
    for (std::size_t k = 0; k < pixels.size(); ++k) input.row(k) = f_ntr.data.row(pixels[k]);
    RowMatrix pre = layer0.forward(input);
    RowMatrix raw = layer1.forward(nn::silu(pre));

    Output out;
    out.field.sh_degree = d;
    out.field.primitives.reserve(pixels.size());
    out.confidence.resize(pixels.size());
    const double lo = cfg_.log_scale_min;
    const double span = cfg_.log_scale_max - cfg_.log_scale_min;
    for (std::size_t k = 0; k < pixels.size(); ++k) {
        auto r = raw.row(k);
        auto& g = out.field.add();
        for (int a = 0; a < 3; ++a) {
            g.mu[a] = pmap.points[pixels[k]][a] + std::tanh(r(DecoderLayout::kMu + a)) * cfg_.offset_scale;
            g.log_scale[a] = lo + span * sigmoid(r(DecoderLayout::kScale + a));
        }
        g.opacity_logit = r(DecoderLayout::kOpacity);
        const Vec4 q_raw(r(DecoderLayout::kRotation) + 1.0, r(DecoderLayout::kRotation + 1),
                         r(DecoderLayout::kRotation + 2), r(DecoderLayout::kRotation + 3));
        g.rotation = field::normalize_quat(q_raw);
        for (int c = 0; c < 3; ++c) g.sh[c] = field::dc_from_color(sigmoid(r(DecoderLayout::kSh + c)));
        for (int j = 3; j < 3 * n_coeffs; ++j) g.sh[j] = r(DecoderLayout::kSh + j);
        out.confidence[k] = std::exp(r(DecoderLayout::confidence(d)));
    }
    if (cache) {
        cache->pixels = std::move(pixels);
        cache->input = std::move(input);
        cache->hidden_pre = std::move(pre);
        cache->raw = std::move(raw);
    }
    return out;
}

RowMatrix GaussDecoder::backward(const Cache& cache, const PrimitiveGrads& grads, int n_pixels) {
    const int d = cfg_.sh_degree;
    const int n_coeffs = field::sh_coeff_count(d);
    const Eigen::Index n = cache.raw.rows();
    const double span = cfg_.log_scale_max - cfg_.log_scale_min;
    RowMatrix d_raw = RowMatrix::Zero(n, cache.raw.cols());
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto r = cache.raw.row(k);
        for (int a = 0; a < 3; ++a) {
            if (!grads.mu.empty()) {
                const double t = std::tanh(r(DecoderLayout::kMu + a));
                d_raw(k, DecoderLayout::kMu + a) = grads.mu[k][a] * cfg_.offset_scale * (1.0 - t * t);
            }
            if (!grads.log_scale.empty()) {
                const double s = sigmoid(r(DecoderLayout::kScale + a));
                d_raw(k, DecoderLayout::kScale + a) = grads.log_scale[k][a] * span * s * (1.0 - s);
            }
        }
        if (!grads.opacity_logit.empty()) d_raw(k, DecoderLayout::kOpacity) = grads.opacity_logit[k];
        if (!grads.rotation.empty()) {
            const Vec4 q_raw(r(DecoderLayout::kRotation) + 1.0, r(DecoderLayout::kRotation + 1),
                             r(DecoderLayout::kRotation + 2), r(DecoderLayout::kRotation + 3));
            const Vec4 dq = field::normalize_quat_vjp(q_raw, grads.rotation[k]);
            for (int a = 0; a < 4; ++a) d_raw(k, DecoderLayout::kRotation + a) = dq[a];
        }
        if (!grads.sh.empty()) {
            const double* gs = grads.sh.data() + static_cast<std::size_t>(k) * n_coeffs * 3;
            for (int c = 0; c < 3; ++c) {
                const double s = sigmoid(r(DecoderLayout::kSh + c));
                d_raw(k, DecoderLayout::kSh + c) = gs[c] / field::kShC0 * s * (1.0 - s);
            }
            for (int j = 3; j < 3 * n_coeffs; ++j) d_raw(k, DecoderLayout::kSh + j) = gs[j];
        }
        if (!grads.confidence.empty()) {
            const int ci = DecoderLayout::confidence(d);
            d_raw(k, ci) = grads.confidence[k] * std::exp(r(ci));
        }
    }
    const RowMatrix d_hidden = layer1.backward(nn::silu(cache.hidden_pre), d_raw);
    const RowMatrix d_input = layer0.backward(cache.input, nn::silu_backward(cache.hidden_pre, d_hidden));
    RowMatrix d_features = RowMatrix::Zero(n_pixels, cache.input.cols());
    for (Eigen::Index k = 0; k < n; ++k) d_features.row(cache.pixels[k]) = d_input.row(k);
    return d_features;
}

void GaussDecoder::collect(nn::ParamList& out, const std::string& prefix) {
    layer0.collect(out, prefix + ".l0");
    layer1.collect(out, prefix + ".l1");
}

field::GaussianField decode_gaussians(const FeatureMap& f_ntr, const geom::PointMap& pmap, const GaussDecoder& dec) {
    return dec.forward(f_ntr, pmap).field;
}

}  // namespace nirsplat::fuse
