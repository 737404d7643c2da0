#include "nirsplat/encode.hpp"
#include "nirsplat/fuse.hpp"
#include "nirsplat/optim.hpp"
#include "nirsplat/raster.hpp"
#include "nirsplat/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace nirsplat::optim {

namespace {

constexpr double kTolerance = 2e-3;
constexpr double kStep = 1e-5;

RowMatrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
    RowMatrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

double weighted_sum(const RowMatrix& a, const RowMatrix& w) { return (a.array() * w.array()).sum(); }

/// Every `stride`-th coordinate of [0, n), so large parameter sets stay cheap.
std::vector<int> strided(std::size_t n, std::size_t max_count) {
    std::vector<int> out;
    const std::size_t stride = std::max<std::size_t>(1, (n + max_count - 1) / max_count);
    for (std::size_t i = 0; i < n; i += stride) out.push_back(static_cast<int>(i));
    return out;
}

/// Checks analytic parameter gradients of a network against central differences.
/// `loss` evaluates the scalar at the current parameter values; `analytic` zeroes and
/// accumulates parameter gradients.
GradcheckResult check_params(const std::string& name, const nn::ParamList& params,
                             const std::function<double()>& loss, const std::function<void()>& analytic,
                             std::size_t max_coords = 400) {
    analytic();
    std::vector<double> x, g;
    for (const auto& p : params) {
        x.insert(x.end(), p.param->value.data(), p.param->value.data() + p.param->value.size());
        g.insert(g.end(), p.param->grad.data(), p.param->grad.data() + p.param->grad.size());
    }
    auto assign = [&](std::span<const double> v) {
        std::size_t off = 0;
        for (const auto& p : params) {
            std::copy_n(v.begin() + off, p.param->value.size(), p.param->value.data());
            off += p.param->value.size();
        }
    };
    const std::vector<double> saved = x;
    const auto coords = strided(x.size(), max_coords);
    auto rep = finite_diff_check(
        [&](std::span<const double> v) {
            assign(v);
            return loss();
        },
        x, g, kStep, kTolerance, coords);
    assign(saved);
    return {name, rep, kTolerance};
}

GradcheckResult check_input(const std::string& name, RowMatrix& input, const RowMatrix& analytic,
                            const std::function<double()>& loss, std::size_t max_coords = 400) {
    const RowMatrix saved = input;
    std::vector<double> x(input.data(), input.data() + input.size());
    std::vector<double> g(analytic.data(), analytic.data() + analytic.size());
    auto rep = finite_diff_check(
        [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), input.data());
            return loss();
        },
        x, g, kStep, kTolerance, strided(x.size(), max_coords));
    input = saved;
    return {name, rep, kTolerance};
}

// ---------------------------------------------------------------------------
// Rasterizer

struct RasterProblem {
    field::GaussianField field;
    geom::Pose pose;
    geom::CameraIntrinsics K;
    Image weights;
};

RasterProblem raster_problem() {
    RasterProblem p;
    p.K = {22.0, 21.0, 7.5, 8.0, 16, 16};
    p.pose = geom::look_at(Vec3(0.4, -0.3, -3.0), Vec3(0.0, 0.0, 0.0), Vec3(0.0, -1.0, 0.0));
    // Scan seeds until no pixel sits close to a footprint cutoff.
    for (std::uint64_t seed = 11;; ++seed) {
        Rng rng(seed);
        p.field = field::GaussianField();
        p.field.sh_degree = 1;
        for (int i = 0; i < 3; ++i) {
            auto& g = p.field.add();
            g.mu = Vec3(rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), rng.uniform(-0.2, 0.2));
            g.opacity_logit = rng.uniform(-0.5, 0.8);
            g.log_scale = Vec3(std::log(rng.uniform(0.08, 0.2)), std::log(rng.uniform(0.08, 0.2)),
                               std::log(rng.uniform(0.08, 0.2)));
            g.rotation = Vec4(1.0 + rng.uniform(-0.3, 0.3), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                              rng.uniform(-0.4, 0.4));
            for (auto& c : g.sh) c = rng.uniform(-0.4, 0.4);
        }
        if (raster::cutoff_margin(p.field, p.pose, p.K) > 0.05) {
            p.weights = Image(p.K.width, p.K.height, 3);
            for (double& w : p.weights.data) w = rng.uniform(-1.0, 1.0);
            return p;
        }
    }
}

double raster_objective(const RasterProblem& p, const field::GaussianField& f, const geom::Pose& pose) {
    const auto out = raster::render(f, pose, p.K, Vec3(0.1, 0.2, 0.05));
    double s = 0.0;
    for (std::size_t i = 0; i < out.color.data.size(); ++i) s += out.color.data[i] * p.weights.data[i];
    return s;
}

std::vector<GradcheckResult> raster_suite() {
    const RasterProblem p = raster_problem();
    const Vec3 bg(0.1, 0.2, 0.05);
    const auto g = raster::render_backward(p.field, p.pose, p.K, bg, p.weights);
    const std::size_t n = p.field.primitives.size();
    const int n_coeffs = field::sh_coeff_count(p.field.sh_degree);

    struct Accessor {
        std::string name;
        int per_prim;
        std::function<double&(field::GaussianPrimitive&, int)> ref;
        std::function<double(std::size_t, int)> grad;
    };
    const std::vector<Accessor> classes = {
        {"raster.mu", 3, [](field::GaussianPrimitive& q, int k) -> double& { return q.mu[k]; },
         [&](std::size_t i, int k) { return g.mu[i][k]; }},
        {"raster.opacity", 1, [](field::GaussianPrimitive& q, int) -> double& { return q.opacity_logit; },
         [&](std::size_t i, int) { return g.opacity_logit[i]; }},
        {"raster.log_scale", 3, [](field::GaussianPrimitive& q, int k) -> double& { return q.log_scale[k]; },
         [&](std::size_t i, int k) { return g.log_scale[i][k]; }},
        {"raster.rotation", 4, [](field::GaussianPrimitive& q, int k) -> double& { return q.rotation[k]; },
         [&](std::size_t i, int k) { return g.rotation[i][k]; }},
        {"raster.sh_dc", 3, [](field::GaussianPrimitive& q, int k) -> double& { return q.sh[k]; },
         [&](std::size_t i, int k) { return g.sh[i * n_coeffs * 3 + k]; }},
        {"raster.sh_rest", 3 * (n_coeffs - 1),
         [](field::GaussianPrimitive& q, int k) -> double& { return q.sh[3 + k]; },
         [&](std::size_t i, int k) { return g.sh[i * n_coeffs * 3 + 3 + k]; }},
    };

    std::vector<GradcheckResult> out;
    for (const auto& cls : classes) {
        field::GaussianField work = p.field;
        std::vector<double> x, a;
        for (std::size_t i = 0; i < n; ++i) {
            for (int k = 0; k < cls.per_prim; ++k) {
                x.push_back(cls.ref(work.primitives[i], k));
                a.push_back(cls.grad(i, k));
            }
        }
        auto rep = finite_diff_check(
            [&](std::span<const double> v) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (int k = 0; k < cls.per_prim; ++k) cls.ref(work.primitives[i], k) = v[i * cls.per_prim + k];
                }
                return raster_objective(p, work, p.pose);
            },
            x, a, kStep, kTolerance);
        out.push_back({cls.name, rep, kTolerance});
    }

    std::vector<double> twist(6, 0.0);
    std::vector<double> a(g.pose_twist.data(), g.pose_twist.data() + 6);
    auto rep = finite_diff_check(
        [&](std::span<const double> v) {
            Vec6 xi;
            for (int k = 0; k < 6; ++k) xi[k] = v[k];
            return raster_objective(p, p.field, geom::se3_apply_increment(p.pose, xi));
        },
        twist, a, kStep, kTolerance);
    out.push_back({"raster.pose_twist", rep, kTolerance});
    return out;
}

// ---------------------------------------------------------------------------
// Positional encoder

std::vector<GradcheckResult> encode_suite() {
    encode::PositionalEncoder enc({4, 8, 6}, 5);
    Rng rng(17);
    const RowMatrix uv = random_matrix(rng, 6, 2, -0.9, 0.9);
    const RowMatrix w = random_matrix(rng, 6, 6);
    nn::ParamList params;
    enc.collect(params);
    auto loss = [&] { return weighted_sum(enc.forward(uv), w); };
    auto analytic = [&] {
        nn::zero_grads(params);
        encode::PositionalEncoder::Cache cache;
        enc.forward(uv, &cache);
        enc.backward(cache, w);
    };
    std::vector<GradcheckResult> out;
    out.push_back(check_params("encode.lambda", {params[0]}, loss, analytic));
    out.push_back(check_params("encode.mlp", {params.begin() + 1, params.end()}, loss, analytic));
    return out;
}

// ---------------------------------------------------------------------------
// Fusion and decoder

/// Smallest distance of any deformable sampling location to an integer grid line,
/// ignoring locations outside the map (clamped reads have no kink there).
double lattice_margin(const fuse::AttentionBlock::Cache& c, const fuse::BlockConfig& cfg, int h, int w) {
    double m = 1.0;
    for (Eigen::Index i = 0; i < c.offsets.rows(); ++i) {
        for (int k = 0; k < cfg.heads * cfg.points; ++k) {
            const double x = c.reference(i, 0) + c.offsets(i, 2 * k);
            const double y = c.reference(i, 1) + c.offsets(i, 2 * k + 1);
            if (x > 0.0 && x < w - 1) m = std::min(m, std::abs(x - std::round(x)));
            if (y > 0.0 && y < h - 1) m = std::min(m, std::abs(y - std::round(y)));
            m = std::min({m, std::abs(x), std::abs(x - (w - 1)), std::abs(y), std::abs(y - (h - 1))});
        }
    }
    return m;
}

std::vector<GradcheckResult> fuse_suite() {
    const int h = 4, w = 4, c = 8;
    const fuse::BlockConfig cfg{c, 2, 2, 12, true};
    std::vector<GradcheckResult> out;

    // Deformable stack of two blocks.
    for (std::uint64_t seed = 3;; ++seed) {
        Rng rng(seed);
        std::vector<fuse::AttentionBlock> blocks;
        for (int b = 0; b < 2; ++b) {
            blocks.emplace_back(fuse::AttentionKind::deformable, cfg, seed * 10 + b);
            // Generic sampling locations: random offset weights move samples off the lattice.
            auto& off = blocks.back().offset_net;
            off.weight.value = random_matrix(rng, off.weight.value.rows(), off.weight.value.cols(), -0.3, 0.3);
            auto& wn = blocks.back().weight_net;
            wn.weight.value = random_matrix(rng, wn.weight.value.rows(), wn.weight.value.cols(), -0.5, 0.5);
            for (auto* ln : {&blocks.back().ln1, &blocks.back().ln2}) {
                ln->gamma.value = random_matrix(rng, 1, c, 0.5, 1.5);
                ln->beta.value = random_matrix(rng, 1, c, -0.2, 0.2);
            }
        }
        RowMatrix rgb = random_matrix(rng, h * w, c);
        RowMatrix nir = random_matrix(rng, h * w, c);
        RowMatrix pe = random_matrix(rng, h * w, c);
        RowMatrix ref(h * w, 2);
        for (int i = 0; i < h * w; ++i) {
            ref(i, 0) = (i % w) + rng.uniform(-0.3, 0.3);
            ref(i, 1) = (i / w) + rng.uniform(-0.3, 0.3);
        }
        const RowMatrix up = random_matrix(rng, h * w, c);

        fuse::StackCache cache;
        auto make = [&](const RowMatrix& d) { return fuse::FeatureMap::dense(fuse::FeatureKind::rgb, h, w, d); };
        fuse::fuse_nir_rgb(make(rgb), make(nir), pe, ref, blocks, &cache);
        double margin = 1.0;
        for (const auto& bc : cache.blocks) margin = std::min(margin, lattice_margin(bc, cfg, h, w));
        if (margin < 2e-3) continue;

        auto loss = [&] { return weighted_sum(fuse::fuse_nir_rgb(make(rgb), make(nir), pe, ref, blocks).data, up); };
        nn::ParamList params;
        for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].collect(params, "nr" + std::to_string(b));
        fuse::StackGrads sg;
        auto analytic = [&] {
            nn::zero_grads(params);
            fuse::StackCache cc;
            fuse::fuse_nir_rgb(make(rgb), make(nir), pe, ref, blocks, &cc);
            sg = fuse::stack_backward(blocks, make(rgb), make(nir), cc, up);
        };
        out.push_back(check_params("fuse.deformable.params", params, loss, analytic, 600));
        out.push_back(check_input("fuse.deformable.d_query", rgb, sg.d_query, loss));
        out.push_back(check_input("fuse.deformable.d_keyval", nir, sg.d_keyval, loss));
        out.push_back(check_input("fuse.deformable.d_pe", pe, sg.d_pe, loss));
        break;
    }

    // Token attention stack.
    {
        Rng rng(41);
        std::vector<fuse::AttentionBlock> blocks;
        blocks.emplace_back(fuse::AttentionKind::token, cfg, 77);
        RowMatrix nr = random_matrix(rng, h * w, c);
        RowMatrix txt = random_matrix(rng, 5, c);
        RowMatrix pe = random_matrix(rng, h * w, c);
        const RowMatrix up = random_matrix(rng, h * w, c);
        auto q = [&] { return fuse::FeatureMap::dense(fuse::FeatureKind::nr, h, w, nr); };
        auto t = [&] { return fuse::FeatureMap::token_sequence(fuse::FeatureKind::txt, txt); };
        auto loss = [&] { return weighted_sum(fuse::fuse_text(q(), t(), pe, blocks).data, up); };
        nn::ParamList params;
        blocks[0].collect(params, "txt");
        fuse::StackGrads sg;
        auto analytic = [&] {
            nn::zero_grads(params);
            fuse::StackCache cc;
            fuse::fuse_text(q(), t(), pe, blocks, &cc);
            sg = fuse::stack_backward(blocks, q(), t(), cc, up);
        };
        out.push_back(check_params("fuse.token.params", params, loss, analytic, 600));
        out.push_back(check_input("fuse.token.d_query", nr, sg.d_query, loss));
        out.push_back(check_input("fuse.token.d_keyval", txt, sg.d_keyval, loss));
        out.push_back(check_input("fuse.token.d_pe", pe, sg.d_pe, loss));
    }

    // Feature extractor.
    {
        Rng rng(5);
        fuse::FeatureExtractor ext(3, c, 9);
        Image img(w, h, 3);
        for (double& v : img.data) v = rng.uniform(0.0, 1.0);
        const RowMatrix up = random_matrix(rng, h * w, c);
        nn::ParamList params;
        ext.collect(params, "rgb");
        auto loss = [&] { return weighted_sum(ext.forward(img, fuse::FeatureKind::rgb).data, up); };
        auto analytic = [&] {
            nn::zero_grads(params);
            fuse::FeatureExtractor::Cache cc;
            ext.forward(img, fuse::FeatureKind::rgb, &cc);
            ext.backward(cc, up);
        };
        out.push_back(check_params("fuse.extractor.params", params, loss, analytic, 600));
    }

    // Gaussian decoder.
    {
        Rng rng(8);
        fuse::DecoderConfig dcfg;
        dcfg.channels = c;
        dcfg.hidden = 12;
        dcfg.sh_degree = 1;
        dcfg.offset_scale = 0.05;
        fuse::GaussDecoder dec(dcfg, 21);
        dec.layer1.weight.value = random_matrix(rng, dec.layer1.weight.value.rows(), dec.layer1.weight.value.cols());
        RowMatrix feats = random_matrix(rng, h * w, c);
        geom::PointMap pm(w, h);
        for (std::size_t i = 0; i < pm.size(); ++i) {
            pm.points[i] = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 3));
            pm.valid[i] = (i % 5) != 2;
        }
        const int n_coeffs = field::sh_coeff_count(dcfg.sh_degree);
        const std::size_t n = pm.valid_count();
        fuse::GaussDecoder::PrimitiveGrads pg;
        for (std::size_t k = 0; k < n; ++k) {
            pg.mu.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            pg.opacity_logit.push_back(rng.uniform(-1, 1));
            pg.log_scale.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            pg.rotation.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            for (int j = 0; j < 3 * n_coeffs; ++j) pg.sh.push_back(rng.uniform(-1, 1));
            pg.confidence.push_back(rng.uniform(-1, 1));
        }
        auto make = [&] { return fuse::FeatureMap::dense(fuse::FeatureKind::ntr, h, w, feats); };
        auto loss = [&] {
            const auto o = dec.forward(make(), pm);
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const auto& g = o.field.primitives[k];
                s += g.mu.dot(pg.mu[k]) + g.opacity_logit * pg.opacity_logit[k] + g.log_scale.dot(pg.log_scale[k]) +
                     g.rotation.dot(pg.rotation[k]) + o.confidence[k] * pg.confidence[k];
                for (int j = 0; j < 3 * n_coeffs; ++j) s += g.sh[j] * pg.sh[k * 3 * n_coeffs + j];
            }
            return s;
        };
        nn::ParamList params;
        dec.collect(params, "dec");
        RowMatrix d_feats;
        auto analytic = [&] {
            nn::zero_grads(params);
            fuse::GaussDecoder::Cache cc;
            dec.forward(make(), pm, &cc);
            d_feats = dec.backward(cc, pg, h * w);
        };
        out.push_back(check_params("fuse.decoder.params", params, loss, analytic, 600));
        out.push_back(check_input("fuse.decoder.d_features", feats, d_feats, loss));
    }

    // Extract -> NIR/RGB fusion -> text fusion -> decode -> render, through every stage.
    for (std::uint64_t seed = 50;; ++seed) {
        Rng rng(seed);
        const fuse::BlockConfig ecfg{c, 2, 2, 12, true};
        fuse::FeatureExtractor rgb_net(3, c, seed + 1), nir_net(1, c, seed + 2);
        std::vector<fuse::AttentionBlock> nr{fuse::AttentionBlock(fuse::AttentionKind::deformable, ecfg, seed + 3)};
        std::vector<fuse::AttentionBlock> tx{fuse::AttentionBlock(fuse::AttentionKind::token, ecfg, seed + 4)};
        auto& off = nr[0].offset_net;
        off.weight.value = random_matrix(rng, off.weight.value.rows(), off.weight.value.cols(), -0.3, 0.3);
        fuse::DecoderConfig dcfg;
        dcfg.channels = c;
        dcfg.hidden = 12;
        dcfg.sh_degree = 1;
        dcfg.offset_scale = 0.1;
        dcfg.log_scale_min = std::log(0.15);
        dcfg.log_scale_max = std::log(0.5);
        fuse::GaussDecoder dec(dcfg, seed + 5);
        dec.layer1.weight.value = random_matrix(rng, dec.layer1.weight.value.rows(), dec.layer1.weight.value.cols(), -0.3, 0.3);

        const geom::CameraIntrinsics K{6.0, 6.0, 1.5, 1.5, w, h};
        const geom::Pose pose = geom::look_at(Vec3(0.2, -0.1, -2.5), Vec3::Zero(), Vec3(0, -1, 0));
        geom::PointMap pm(w, h);
        const geom::Pose inv = pose.inverse();
        for (int i = 0; i < h * w; ++i) {
            const double depth = rng.uniform(2.3, 2.7);
            const Vec3 pc(((i % w) - K.cx) / K.fx * depth, ((i / w) - K.cy) / K.fy * depth, depth);
            pm.points[i] = inv.transform(pc);
            pm.valid[i] = (i % 7) != 3;
        }
        Image rgb(w, h, 3), nir(w, h, 1);
        for (double& v : rgb.data) v = rng.uniform(0.0, 1.0);
        for (double& v : nir.data) v = rng.uniform(0.0, 1.0);
        RowMatrix pe = random_matrix(rng, h * w, c);
        RowMatrix ref(h * w, 2);
        for (int i = 0; i < h * w; ++i) {
            ref(i, 0) = (i % w) + rng.uniform(-0.3, 0.3);
            ref(i, 1) = (i / w) + rng.uniform(-0.3, 0.3);
        }
        RowMatrix txt = random_matrix(rng, 2, c);
        Image up(w, h, 3);
        for (double& v : up.data) v = rng.uniform(-1.0, 1.0);
        const Vec3 bg(0.1, 0.05, 0.2);

        struct Pass {
            fuse::FeatureExtractor::Cache rgb, nir;
            fuse::FeatureMap f_rgb, f_nir, f_nr, f_ntr;
            fuse::StackCache nr, tx;
            fuse::GaussDecoder::Cache dec;
            fuse::GaussDecoder::Output decoded;
        };
        auto tokens = [&] { return fuse::FeatureMap::token_sequence(fuse::FeatureKind::txt, txt); };
        auto forward = [&](Pass& p) {
            p.f_rgb = rgb_net.forward(rgb, fuse::FeatureKind::rgb, &p.rgb);
            p.f_nir = nir_net.forward(nir, fuse::FeatureKind::nir, &p.nir);
            p.f_nr = fuse::fuse_nir_rgb(p.f_rgb, p.f_nir, pe, ref, nr, &p.nr);
            p.f_ntr = fuse::fuse_text(p.f_nr, tokens(), pe, tx, &p.tx);
            p.decoded = dec.forward(p.f_ntr, pm, &p.dec);
        };
        auto loss = [&] {
            Pass p;
            forward(p);
            const auto img = raster::render(p.decoded.field, pose, K, bg).color;
            double s = 0.0;
            for (std::size_t i = 0; i < img.data.size(); ++i) s += img.data[i] * up.data[i];
            return s;
        };

        Pass probe;
        forward(probe);
        double margin = lattice_margin(probe.nr.blocks[0], ecfg, h, w);
        margin = std::min(margin, raster::cutoff_margin(probe.decoded.field, pose, K));
        if (margin < 2e-3) continue;

        nn::ParamList params;
        rgb_net.collect(params, "rgb");
        nir_net.collect(params, "nir");
        nr[0].collect(params, "nr");
        tx[0].collect(params, "txt");
        dec.collect(params, "dec");
        RowMatrix d_txt;
        auto analytic = [&] {
            nn::zero_grads(params);
            Pass p;
            forward(p);
            const auto rg = raster::render_backward(p.decoded.field, pose, K, bg, up);
            fuse::GaussDecoder::PrimitiveGrads pg;
            pg.mu = rg.mu;
            pg.opacity_logit = rg.opacity_logit;
            pg.log_scale = rg.log_scale;
            pg.rotation = rg.rotation;
            pg.sh = rg.sh;
            pg.confidence.assign(p.decoded.field.size(), 0.0);
            const RowMatrix d_ntr = dec.backward(p.dec, pg, h * w);
            const auto gt = fuse::stack_backward(tx, p.f_nr, tokens(), p.tx, d_ntr);
            d_txt = gt.d_keyval;
            const auto gn = fuse::stack_backward(nr, p.f_rgb, p.f_nir, p.nr, gt.d_query);
            rgb_net.backward(p.rgb, gn.d_query);
            nir_net.backward(p.nir, gn.d_keyval);
        };
        out.push_back(check_params("fuse.end_to_end.params", params, loss, analytic, 800));
        out.push_back(check_input("fuse.end_to_end.d_text", txt, d_txt, loss));
        break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

std::vector<GradcheckResult> losses_suite() {
    std::vector<GradcheckResult> out;
    Rng rng(101);
    {
        Image a(6, 5, 3), b(6, 5, 3);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            b.data[i] = rng.uniform(0.0, 1.0);
            // Stay away from the kink at equality.
            a.data[i] = b.data[i] + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 0.3);
        }
        Image g;
        photometric_loss(a, b, &g);
        auto rep = finite_diff_check(
            [&](std::span<const double> v) {
                Image r = a;
                std::copy(v.begin(), v.end(), r.data.begin());
                return photometric_loss(r, b);
            },
            a.data, g.data, kStep, kTolerance);
        out.push_back({"losses.photometric", rep, kTolerance});
    }
    {
        geom::PointMap p(5, 4), q(5, 4);
        for (std::size_t i = 0; i < p.size(); ++i) {
            q.points[i] = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 3));
            p.points[i] = q.points[i] * 1.3 + Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
            p.valid[i] = q.valid[i] = (i % 7) != 3;
        }
        std::vector<Vec3> g;
        pointmap_regression_loss(p, q, &g);
        std::vector<double> x, a;
        for (std::size_t i = 0; i < p.size(); ++i) {
            for (int k = 0; k < 3; ++k) {
                x.push_back(p.points[i][k]);
                a.push_back(g[i][k]);
            }
        }
        auto rep = finite_diff_check(
            [&](std::span<const double> v) {
                geom::PointMap r = p;
                for (std::size_t i = 0; i < r.size(); ++i) r.points[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
                return pointmap_regression_loss(r, q);
            },
            x, a, kStep, kTolerance);
        out.push_back({"losses.pointmap_regression", rep, kTolerance});
    }
    {
        std::vector<double> o(12), l(12);
        for (std::size_t i = 0; i < o.size(); ++i) {
            o[i] = rng.uniform(0.2, 2.0);
            l[i] = rng.uniform(0.05, 1.0);
        }
        std::vector<double> go, gl;
        confidence_loss(o, l, 0.2, &go, &gl);
        auto rep_o = finite_diff_check([&](std::span<const double> v) { return confidence_loss(v, l, 0.2); }, o, go,
                                       kStep, kTolerance);
        out.push_back({"losses.confidence.d_conf", rep_o, kTolerance});
        auto rep_l = finite_diff_check([&](std::span<const double> v) { return confidence_loss(o, v, 0.2); }, l, gl,
                                       kStep, kTolerance);
        out.push_back({"losses.confidence.d_loss", rep_l, kTolerance});
    }
    return out;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck(const std::string& suite) {
    std::vector<GradcheckResult> out;
    auto append = [&](std::vector<GradcheckResult> r) { out.insert(out.end(), r.begin(), r.end()); };
    if (suite == "raster" || suite == "all") append(raster_suite());
    if (suite == "encode" || suite == "all") append(encode_suite());
    if (suite == "fuse" || suite == "all") append(fuse_suite());
    if (suite == "losses" || suite == "all") append(losses_suite());
    if (out.empty()) throw std::invalid_argument("unknown gradcheck suite: " + suite);
    return out;
}

}  // namespace nirsplat::optim
