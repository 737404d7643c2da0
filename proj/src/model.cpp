#include "nirsplat/model.hpp"

#include "nirsplat/raster.hpp"
#include "nirsplat/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>

namespace nirsplat::model {

FusionMode fusion_from_string(const std::string& s) {
    if (s == "attention") return FusionMode::attention;
    if (s == "concat") return FusionMode::concat;
    if (s == "sum") return FusionMode::sum;
    throw std::invalid_argument("unknown fusion mode: " + s);
}

std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::attention: return "attention";
        case FusionMode::concat: return "concat";
        case FusionMode::sum: return "sum";
    }
    return "attention";
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"channels", c.channels},
            {"heads", c.heads},
            {"points", c.points},
            {"blocks", c.blocks},
            {"ffn_hidden", c.ffn_hidden},
            {"pe_frequencies", c.encoder.frequencies},
            {"pe_hidden", c.encoder.hidden},
            {"decoder_hidden", c.decoder_hidden},
            {"sh_degree", c.sh_degree},
            {"offset_scale", c.offset_scale},
            {"scale_min", c.scale_min},
            {"scale_max", c.scale_max},
            {"fusion", to_string(c.fusion)},
            {"use_text", c.use_text},
            {"max_tokens", c.max_tokens},
            {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.channels = j.value("channels", c.channels);
    c.heads = j.value("heads", c.heads);
    c.points = j.value("points", c.points);
    c.blocks = j.value("blocks", c.blocks);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.encoder.frequencies = j.value("pe_frequencies", c.encoder.frequencies);
    c.encoder.hidden = j.value("pe_hidden", c.encoder.hidden);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.sh_degree = j.value("sh_degree", c.sh_degree);
    c.offset_scale = j.value("offset_scale", c.offset_scale);
    c.scale_min = j.value("scale_min", c.scale_min);
    c.scale_max = j.value("scale_max", c.scale_max);
    c.fusion = fusion_from_string(j.value("fusion", to_string(c.fusion)));
    c.use_text = j.value("use_text", c.use_text);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.seed = j.value("seed", c.seed);
    return c;
}

NirSplatModel::NirSplatModel(const ModelConfig& cfg, double scene_extent) : cfg_(cfg) {
    std::uint64_t s = cfg.seed;
    const int c = cfg.channels;
    rgb_net_ = fuse::FeatureExtractor(cfg.fusion == FusionMode::concat ? 4 : 3, c, splitmix64(s));
    nir_net_ = fuse::FeatureExtractor(1, c, splitmix64(s));
    encode::EncoderConfig ecfg = cfg.encoder;
    ecfg.out_dim = c;
    pe_ = encode::PositionalEncoder(ecfg, splitmix64(s));
    const fuse::BlockConfig bcfg{c, cfg.heads, cfg.points, cfg.ffn_hidden, true};
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::uint64_t nr_seed = splitmix64(s);
        const std::uint64_t txt_seed = splitmix64(s);
        if (cfg.fusion == FusionMode::attention) nr_blocks_.emplace_back(fuse::AttentionKind::deformable, bcfg, nr_seed);
        if (cfg.use_text) txt_blocks_.emplace_back(fuse::AttentionKind::token, bcfg, txt_seed);
    }
    fuse::DecoderConfig dcfg;
    dcfg.channels = c;
    dcfg.hidden = cfg.decoder_hidden;
    dcfg.sh_degree = cfg.sh_degree;
    dcfg.offset_scale = cfg.offset_scale * scene_extent;
    dcfg.log_scale_min = std::log(cfg.scale_min * scene_extent);
    dcfg.log_scale_max = std::log(cfg.scale_max * scene_extent);
    decoder_ = fuse::GaussDecoder(dcfg, splitmix64(s));
}

namespace {

Image stack_channels(const Image& rgb, const Image& nir) {
    Image out(rgb.width, rgb.height, 4);
    for (int i = 0; i < rgb.pixel_count(); ++i) {
        for (int c = 0; c < 3; ++c) out.data[4 * i + c] = rgb.data[3 * i + c];
        out.data[4 * i + 3] = nir.data[i];
    }
    return out;
}

}  // namespace

fuse::GaussDecoder::Output NirSplatModel::forward(const ModelView& view, const RowMatrix& text, Cache* cache) const {
    Cache local;
    Cache& cc = cache ? *cache : local;
    const bool attention = cfg_.fusion == FusionMode::attention;
    if (view.rgb.channels != 3 || view.nir.channels != 1) throw ContractViolation("model: expected RGB and NIR images");
    if (cfg_.use_text && text.rows() < 1) throw ContractViolation("model: text is enabled but no tokens were given");

    cc.input = cfg_.fusion == FusionMode::concat ? stack_channels(view.rgb, view.nir) : view.rgb;
    cc.f_rgb = rgb_net_.forward(cc.input, fuse::FeatureKind::rgb, &cc.rgb);
    if (cfg_.fusion != FusionMode::concat) cc.f_nir = nir_net_.forward(view.nir, fuse::FeatureKind::nir, &cc.nir);
    if (attention || cfg_.use_text) cc.pe = encode::pe_grid(view.pmap, view.pose, view.K, pe_);

    switch (cfg_.fusion) {
        case FusionMode::attention:
            cc.f_nr = fuse::fuse_nir_rgb(cc.f_rgb, cc.f_nir, cc.pe.pe, cc.pe.reference, nr_blocks_, &cc.nr_stack);
            break;
        case FusionMode::sum:
            cc.f_nr = fuse::FeatureMap::dense(fuse::FeatureKind::nr, cc.f_rgb.height, cc.f_rgb.width,
                                              cc.f_rgb.data + cc.f_nir.data);
            break;
        case FusionMode::concat:
            cc.f_nr = fuse::FeatureMap::dense(fuse::FeatureKind::nr, cc.f_rgb.height, cc.f_rgb.width, cc.f_rgb.data);
            break;
    }
    if (cfg_.use_text) {
        cc.f_ntr = fuse::fuse_text(cc.f_nr, fuse::FeatureMap::token_sequence(fuse::FeatureKind::txt, text), cc.pe.pe,
                                   txt_blocks_, &cc.txt_stack);
    } else {
        cc.f_ntr = cc.f_nr;
        cc.f_ntr.kind = fuse::FeatureKind::ntr;
    }
    return decoder_.forward(cc.f_ntr, view.pmap, &cc.decoder);
}

void NirSplatModel::backward(const RowMatrix& text, const Cache& cc, const fuse::GaussDecoder::PrimitiveGrads& grads) {
    const bool attention = cfg_.fusion == FusionMode::attention;
    const int n_pixels = cc.f_ntr.count();
    const RowMatrix d_ntr = decoder_.backward(cc.decoder, grads, n_pixels);
    RowMatrix d_pe;
    if (attention || cfg_.use_text) d_pe = RowMatrix::Zero(n_pixels, cfg_.channels);

    RowMatrix d_nr;
    if (cfg_.use_text) {
        auto sg = fuse::stack_backward(txt_blocks_, cc.f_nr, fuse::FeatureMap::token_sequence(fuse::FeatureKind::txt, text),
                                       cc.txt_stack, d_ntr);
        d_nr = std::move(sg.d_query);
        d_pe += sg.d_pe;
    } else {
        d_nr = d_ntr;
    }

    switch (cfg_.fusion) {
        case FusionMode::attention: {
            auto sg = fuse::stack_backward(nr_blocks_, cc.f_rgb, cc.f_nir, cc.nr_stack, d_nr);
            rgb_net_.backward(cc.rgb, sg.d_query);
            nir_net_.backward(cc.nir, sg.d_keyval);
            d_pe += sg.d_pe;
            break;
        }
        case FusionMode::sum:
            rgb_net_.backward(cc.rgb, d_nr);
            nir_net_.backward(cc.nir, d_nr);
            break;
        case FusionMode::concat:
            rgb_net_.backward(cc.rgb, d_nr);
            break;
    }
    if (attention || cfg_.use_text) pe_.backward(cc.pe.cache, d_pe);
}

nn::ParamList NirSplatModel::parameters() {
    nn::ParamList out;
    pe_.collect(out, "pe");
    rgb_net_.collect(out, "fuse.rgb");
    if (cfg_.fusion != FusionMode::concat) nir_net_.collect(out, "fuse.nir");
    for (std::size_t b = 0; b < nr_blocks_.size(); ++b) nr_blocks_[b].collect(out, "fuse.nr" + std::to_string(b));
    for (std::size_t b = 0; b < txt_blocks_.size(); ++b) txt_blocks_[b].collect(out, "fuse.txt" + std::to_string(b));
    decoder_.collect(out, "fuse.dec");
    return out;
}

field::GaussianField decode_scene(const NirSplatModel& model, const std::vector<ModelView>& views,
                                  const RowMatrix& text) {
    field::GaussianField merged;
    merged.sh_degree = model.config().sh_degree;
    for (const auto& v : views) {
        auto out = model.forward(v, text);
        for (auto& g : out.field.primitives) merged.primitives.push_back(std::move(g));
    }
    return merged;
}

std::vector<optim::LossReport> train_network(NirSplatModel& model, const std::vector<ModelView>& views,
                                             const RowMatrix& text, const NetworkTrainConfig& cfg) {
    if (views.empty()) throw std::invalid_argument("train_network: at least one view is required");
    const std::size_t n_views = views.size();
    const int sh_stride = 3 * field::sh_coeff_count(model.config().sh_degree);
    nn::ParamList params = model.parameters();
    optim::OptimState state;
    std::vector<optim::LossReport> history;
    std::vector<raster::Rasterizer> rasterizers(n_views);

    for (int it = 0; it < cfg.iterations; ++it) {
        nn::zero_grads(params);
        std::vector<NirSplatModel::Cache> caches(n_views);
        std::vector<fuse::GaussDecoder::Output> outs;
        std::vector<std::size_t> offsets;
        field::GaussianField merged;
        merged.sh_degree = model.config().sh_degree;
        for (std::size_t v = 0; v < n_views; ++v) {
            outs.push_back(model.forward(views[v], text, &caches[v]));
            offsets.push_back(merged.primitives.size());
            merged.primitives.insert(merged.primitives.end(), outs.back().field.primitives.begin(),
                                     outs.back().field.primitives.end());
        }

        optim::LossReport report;
        raster::RenderGradients grads;
        grads.resize(merged.primitives.size(), merged.sh_degree);
        const double view_weight = cfg.weights.photometric / static_cast<double>(n_views);
        for (std::size_t v = 0; v < n_views; ++v) {
            const auto r = rasterizers[v].forward(merged, views[v].pose, views[v].K, cfg.background);
            Image upstream;
            const double l = optim::photometric_loss(r.color, views[v].rgb, &upstream);
            report.per_view.push_back(l);
            report.photometric += l / static_cast<double>(n_views);
            for (double& u : upstream.data) u *= view_weight;
            const auto g = rasterizers[v].backward(upstream);
            for (std::size_t i = 0; i < merged.primitives.size(); ++i) {
                grads.mu[i] += g.mu[i];
                grads.opacity_logit[i] += g.opacity_logit[i];
                grads.log_scale[i] += g.log_scale[i];
                grads.rotation[i] += g.rotation[i];
            }
            for (std::size_t k = 0; k < g.sh.size(); ++k) grads.sh[k] += g.sh[k];
        }

        for (std::size_t v = 0; v < n_views; ++v) {
            const auto& out = outs[v];
            const auto& pixels = caches[v].decoder.pixels;
            const std::size_t n = out.field.primitives.size();
            const std::size_t off = offsets[v];
            fuse::GaussDecoder::PrimitiveGrads pg;
            pg.mu.assign(grads.mu.begin() + off, grads.mu.begin() + off + n);
            pg.opacity_logit.assign(grads.opacity_logit.begin() + off, grads.opacity_logit.begin() + off + n);
            pg.log_scale.assign(grads.log_scale.begin() + off, grads.log_scale.begin() + off + n);
            pg.rotation.assign(grads.rotation.begin() + off, grads.rotation.begin() + off + n);
            pg.sh.assign(grads.sh.begin() + off * sh_stride, grads.sh.begin() + (off + n) * sh_stride);
            pg.confidence.assign(n, 0.0);

            const bool reg = cfg.weights.pointmap_reg > 0.0;
            const bool conf = cfg.weights.confidence > 0.0;
            if (reg || conf) {
                // Decoded centres form a pixel-aligned point map over the decoded pixels.
                geom::PointMap predicted(views[v].pmap.width, views[v].pmap.height);
                std::vector<double> o(predicted.size(), 1.0);
                for (std::size_t k = 0; k < n; ++k) {
                    predicted.points[pixels[k]] = out.field.primitives[k].mu;
                    predicted.valid[pixels[k]] = 1;
                    o[pixels[k]] = out.confidence[k];
                }
                const double m = static_cast<double>(n);
                std::vector<double> weights(predicted.size(), 0.0), per_pixel;
                for (std::size_t k = 0; k < n; ++k)
                    weights[pixels[k]] = cfg.weights.pointmap_reg + cfg.weights.confidence * o[pixels[k]];
                const double plain = optim::pointmap_regression_loss(predicted, views[v].pmap, nullptr, &per_pixel);
                std::vector<Vec3> d_points;
                optim::pointmap_regression_loss(predicted, views[v].pmap, &d_points, nullptr, weights);
                std::vector<double> conf_o(n), conf_l(n), d_o;
                for (std::size_t k = 0; k < n; ++k) {
                    conf_o[k] = out.confidence[k];
                    conf_l[k] = per_pixel[pixels[k]];
                }
                const double conf_value = optim::confidence_loss(conf_o, conf_l, cfg.weights.w_conf, &d_o) / m;
                report.pointmap_reg += plain / static_cast<double>(n_views);
                report.confidence += conf_value / static_cast<double>(n_views);
                const double vw = 1.0 / static_cast<double>(n_views);
                for (std::size_t k = 0; k < n; ++k) {
                    pg.mu[k] += vw * d_points[pixels[k]];
                    if (conf) pg.confidence[k] = vw * cfg.weights.confidence * d_o[k] / m;
                }
            }
            model.backward(text, caches[v], pg);
        }
        report.total = cfg.weights.photometric * report.photometric + cfg.weights.pointmap_reg * report.pointmap_reg +
                       cfg.weights.confidence * report.confidence;
        if (!std::isfinite(report.total))
            throw std::runtime_error("train_network: non-finite loss at iteration " + std::to_string(it));

        std::vector<optim::ParamGroup> groups;
        for (auto& p : params) groups.push_back({p.name, p.param->values(), p.param->grads(), cfg.lr});
        optim::adam_step(groups, state, cfg.adam);
        history.push_back(report);
        if (cfg.on_iteration) cfg.on_iteration(it, report);
    }
    return history;
}

}  // namespace nirsplat::model
