#include "nirsplat/train.hpp"

#include "nirsplat/metrics.hpp"
#include "nirsplat/raster.hpp"
#include "nirsplat/spectra.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

namespace nirsplat::train {

namespace {

InitMode init_from_string(const std::string& s) {
    if (s == "pointmap") return InitMode::pointmap;
    if (s == "ground_truth") return InitMode::ground_truth;
    if (s == "fused") return InitMode::fused;
    throw std::invalid_argument("unknown init mode: " + s);
}

std::string to_string(InitMode m) {
    switch (m) {
        case InitMode::pointmap: return "pointmap";
        case InitMode::ground_truth: return "ground_truth";
        case InitMode::fused: return "fused";
    }
    return "pointmap";
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) throw std::invalid_argument("unknown key '" + k + "' in " + where);
    }
}

nlohmann::json weights_json(const optim::LossWeights& w) {
    return {{"photometric", w.photometric}, {"pointmap_reg", w.pointmap_reg}, {"confidence", w.confidence},
            {"w_conf", w.w_conf}};
}

optim::LossWeights weights_from(const nlohmann::json& j, optim::LossWeights w) {
    reject_unknown(j, {"photometric", "pointmap_reg", "confidence", "w_conf"}, "weights");
    w.photometric = j.value("photometric", w.photometric);
    w.pointmap_reg = j.value("pointmap_reg", w.pointmap_reg);
    w.confidence = j.value("confidence", w.confidence);
    w.w_conf = j.value("w_conf", w.w_conf);
    return w;
}

std::string hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    // Splat-stage photometric only; the point-map terms need pixel-aligned predictions.
    c.joint.weights.pointmap_reg = 0.0;
    c.joint.weights.confidence = 0.0;
    c.joint.adc_interval = 100;
    c.joint.adc_stop = 500;
    if (j.is_null()) return c;
    if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
    reject_unknown(j,
                   {"init", "iterations", "views", "seed", "init_stride", "init_opacity", "optimize_gaussians",
                    "optimize_poses", "adc_interval", "adc_stop", "densify_grad", "prune_opacity", "split_scale",
                    "lr", "weights", "reduction", "background", "model", "net_iterations", "net_lr", "net_weights"},
                   "train config");
    c.init = init_from_string(j.value("init", to_string(c.init)));
    c.iterations = j.value("iterations", c.iterations);
    c.views = j.value("views", c.views);
    c.seed = j.value("seed", c.seed);
    c.init_stride = j.value("init_stride", c.init_stride);
    c.init_opacity = j.value("init_opacity", c.init_opacity);
    auto& jc = c.joint;
    jc.optimize_gaussians = j.value("optimize_gaussians", jc.optimize_gaussians);
    jc.optimize_poses = j.value("optimize_poses", jc.optimize_poses);
    jc.adc_interval = j.value("adc_interval", jc.adc_interval);
    jc.adc_stop = j.value("adc_stop", jc.adc_stop);
    jc.adc.densify_grad = j.value("densify_grad", jc.adc.densify_grad);
    jc.adc.prune_opacity = j.value("prune_opacity", jc.adc.prune_opacity);
    // Fraction of the scene extent; converted in train_scene.
    jc.adc.split_scale = j.value("split_scale", jc.adc.split_scale);
    if (j.contains("lr")) {
        const auto& l = j["lr"];
        reject_unknown(l, {"position", "opacity", "scale", "rotation", "sh", "pose", "network"}, "lr");
        jc.lr.position = l.value("position", jc.lr.position);
        jc.lr.opacity = l.value("opacity", jc.lr.opacity);
        jc.lr.scale = l.value("scale", jc.lr.scale);
        jc.lr.rotation = l.value("rotation", jc.lr.rotation);
        jc.lr.sh = l.value("sh", jc.lr.sh);
        jc.lr.pose = l.value("pose", jc.lr.pose);
        jc.lr.network = l.value("network", jc.lr.network);
    }
    if (j.contains("weights")) jc.weights = weights_from(j["weights"], jc.weights);
    if (j.contains("reduction")) {
        const std::string r = j["reduction"].get<std::string>();
        if (r != "mean" && r != "sum") throw std::invalid_argument("reduction must be mean or sum");
        jc.reduction = r == "sum" ? optim::Reduction::sum : optim::Reduction::mean;
    }
    if (j.contains("background")) {
        const auto& b = j["background"];
        jc.background = Vec3(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>());
    }
    if (j.contains("model")) c.model = model::model_config_from_json(j["model"]);
    c.net_iterations = j.value("net_iterations", c.net_iterations);
    c.net_lr = j.value("net_lr", c.net_lr);
    if (j.contains("net_weights")) c.net_weights = weights_from(j["net_weights"], c.net_weights);
    return c;
}

nlohmann::json to_json(const TrainConfig& c) {
    const auto& jc = c.joint;
    return {{"init", to_string(c.init)},
            {"iterations", c.iterations},
            {"views", c.views},
            {"seed", c.seed},
            {"init_stride", c.init_stride},
            {"init_opacity", c.init_opacity},
            {"optimize_gaussians", jc.optimize_gaussians},
            {"optimize_poses", jc.optimize_poses},
            {"adc_interval", jc.adc_interval},
            {"adc_stop", jc.adc_stop},
            {"densify_grad", jc.adc.densify_grad},
            {"prune_opacity", jc.adc.prune_opacity},
            {"split_scale", jc.adc.split_scale},
            {"lr",
             {{"position", jc.lr.position},
              {"opacity", jc.lr.opacity},
              {"scale", jc.lr.scale},
              {"rotation", jc.lr.rotation},
              {"sh", jc.lr.sh},
              {"pose", jc.lr.pose},
              {"network", jc.lr.network}}},
            {"weights", weights_json(jc.weights)},
            {"reduction", jc.reduction == optim::Reduction::sum ? "sum" : "mean"},
            {"background", {jc.background.x(), jc.background.y(), jc.background.z()}},
            {"model", model::to_json(c.model)},
            {"net_iterations", c.net_iterations},
            {"net_lr", c.net_lr},
            {"net_weights", weights_json(c.net_weights)}};
}

field::GaussianField pointmap_init(const std::vector<scene::ViewData>& views, const geom::CameraIntrinsics& K,
                                   int stride, double opacity, int sh_degree) {
    if (stride < 1) throw ContractViolation("pointmap_init: stride must be positive");
    field::GaussianField f;
    f.sh_degree = sh_degree;
    const double logit = std::log(opacity / (1.0 - opacity));
    for (const auto& v : views) {
        for (int y = 0; y < v.pmap.height; y += stride) {
            for (int x = 0; x < v.pmap.width; x += stride) {
                const std::size_t i = static_cast<std::size_t>(y) * v.pmap.width + x;
                if (!v.pmap.valid[i]) continue;
                const double depth = v.pose.transform(v.pmap.points[i]).z();
                if (!(depth > geom::kDepthEps)) continue;
                auto& g = f.add();
                g.mu = v.pmap.points[i];
                g.opacity_logit = logit;
                g.log_scale = Vec3::Constant(std::log(0.5 * stride * depth / K.fx));
                for (int c = 0; c < 3; ++c) g.sh[c] = field::dc_from_color(v.rgb.at(y, x, c));
            }
        }
    }
    if (f.primitives.empty()) throw std::invalid_argument("pointmap_init: no valid point-map pixels");
    return f;
}

std::string scene_prompt(const scene::SceneBundle& bundle, const std::vector<scene::ViewData>& views) {
    if (bundle.prompt_meta.empty()) throw std::runtime_error("scene has no prompt metadata");
    const nlohmann::json meta = io::read_json(bundle.path(bundle.prompt_meta));
    spectra::PromptMetadata pm;
    pm.img_description = meta.at("img_description").get<std::string>();
    pm.weather = spectra::weather_from_json(meta.at("weather"));
    // Index statistics over pixels the point maps mark as scene content.
    std::vector<double> nir, red, green;
    for (const auto& v : views) {
        for (int i = 0; i < v.rgb.pixel_count(); ++i) {
            if (!v.pmap.valid[i]) continue;
            nir.push_back(v.nir.data[i]);
            red.push_back(v.rgb.data[3 * i]);
            green.push_back(v.rgb.data[3 * i + 1]);
        }
    }
    if (nir.empty()) {
        for (const auto& v : views) {
            for (int i = 0; i < v.rgb.pixel_count(); ++i) {
                nir.push_back(v.nir.data[i]);
                red.push_back(v.rgb.data[3 * i]);
                green.push_back(v.rgb.data[3 * i + 1]);
            }
        }
    }
    auto column = [](const std::vector<double>& d) {
        Image m(static_cast<int>(d.size()), 1, 1);
        m.data = d;
        return m;
    };
    const Image n = column(nir), r = column(red), g = column(green);
    pm.ndvi = spectra::index_stats(spectra::ndvi(n, r));
    pm.ndwi = spectra::index_stats(spectra::ndwi(g, n));
    pm.ci = spectra::index_stats(spectra::chlorophyll_index(n, g));
    return spectra::assemble_prompt(pm);
}

TrainOutput train_scene(const scene::SceneBundle& bundle, const TrainConfig& cfg) {
    const int n_total = static_cast<int>(bundle.views.size());
    const auto [train_idx, test_idx] = scene::split_views(n_total, cfg.views, bundle.seed);
    std::vector<scene::ViewData> data;
    for (int i : train_idx) data.push_back(scene::load_view(bundle, i));

    TrainOutput out;
    out.train_views = train_idx;
    io::Checkpoint& ck = out.checkpoint;
    field::GaussianField init;
    std::vector<optim::LossReport> history;

    switch (cfg.init) {
        case InitMode::pointmap:
            init = pointmap_init(data, bundle.K, cfg.init_stride, cfg.init_opacity, bundle.sh_degree);
            break;
        case InitMode::ground_truth:
            if (bundle.gt_field.empty()) throw std::runtime_error("scene has no ground-truth field");
            init = io::read_ply(bundle.path(bundle.gt_field));
            break;
        case InitMode::fused: {
            model::ModelConfig mc = cfg.model;
            mc.sh_degree = bundle.sh_degree;
            model::NirSplatModel net(mc, bundle.extent);
            RowMatrix text;
            if (mc.use_text) text = spectra::embed_text(scene_prompt(bundle, data), mc.channels, mc.max_tokens).tokens;
            std::vector<model::ModelView> mv;
            for (const auto& d : data) mv.push_back({d.rgb, d.nir, d.pmap, d.pose, bundle.K});
            model::NetworkTrainConfig nc;
            nc.iterations = cfg.net_iterations;
            nc.lr = cfg.net_lr;
            nc.weights = cfg.net_weights;
            nc.background = cfg.joint.background;
            history = model::train_network(net, mv, text, nc);
            init = model::decode_scene(net, mv, text);
            for (const auto& p : net.parameters()) {
                const auto& v = p.param->value;
                ck.tensors[p.name] = io::make_tensor(
                    {static_cast<std::uint32_t>(v.rows()), static_cast<std::uint32_t>(v.cols())},
                    std::vector<double>(v.data(), v.data() + v.size()));
            }
            break;
        }
    }

    std::vector<optim::TrainView> views;
    for (const auto& d : data) views.push_back({d.pose, bundle.K, d.rgb});
    optim::JointConfig jc = cfg.joint;
    jc.iterations = cfg.iterations;
    jc.scene_extent = bundle.extent;
    jc.adc.split_scale = cfg.joint.adc.split_scale * bundle.extent;
    jc.adc.seed = cfg.seed;
    auto result = optim::joint_optimize(init, views, jc);
    history.insert(history.end(), result.history.begin(), result.history.end());

    out.field = std::move(result.field);
    for (const auto& v : bundle.views) out.poses.push_back(v.pose);
    for (std::size_t k = 0; k < train_idx.size(); ++k) out.poses[train_idx[k]] = result.poses[k];
    out.history = std::move(history);

    const nlohmann::json config = to_json(cfg);
    ck.header["format"] = "nirsplat-checkpoint";
    ck.header["iteration"] = cfg.iterations;
    ck.header["seed"] = cfg.seed;
    ck.header["config_hash"] = hex64(io::config_hash(config));
    ck.header["config"] = config;
    ck.header["train_views"] = train_idx;
    ck.header["intrinsics"] = geom::to_json(bundle.K);
    ck.header["scene_extent"] = bundle.extent;
    ck.header["poses"] = nlohmann::json::array();
    for (const auto& p : out.poses) ck.header["poses"].push_back(geom::to_json(p));
    io::store_field(ck, out.field);
    return out;
}

EvalReport evaluate(const field::GaussianField& f, const scene::SceneBundle& bundle, const std::vector<int>& indices,
                    const EvalOptions& opt) {
    EvalReport rep;
    for (int i : indices) {
        const auto d = scene::load_view(bundle, i);
        geom::Pose pose = d.pose;
        if (opt.refine_pose_iters > 0) {
            optim::JointConfig jc;
            jc.iterations = opt.refine_pose_iters;
            jc.optimize_gaussians = false;
            jc.optimize_poses = true;
            jc.lr.pose = opt.pose_lr;
            pose = optim::joint_optimize(f, {{pose, bundle.K, d.rgb}}, jc).poses[0];
        }
        Image img = raster::render(f, pose, bundle.K, Vec3::Zero()).color;
        if (opt.quantize) img = io::quantize8(img);
        rep.views.push_back({i, metrics::psnr(img, d.rgb), metrics::ssim(img, d.rgb)});
    }
    for (const auto& v : rep.views) {
        rep.mean_psnr += v.psnr;
        rep.mean_ssim += v.ssim;
    }
    if (!rep.views.empty()) {
        rep.mean_psnr /= static_cast<double>(rep.views.size());
        rep.mean_ssim /= static_cast<double>(rep.views.size());
    }
    return rep;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["views"] = nlohmann::json::array();
    for (const auto& v : r.views) j["views"].push_back({{"index", v.index}, {"psnr", v.psnr}, {"ssim", v.ssim}});
    j["mean_psnr"] = r.mean_psnr;
    j["mean_ssim"] = r.mean_ssim;
    return j;
}

std::vector<int> split_indices(const scene::SceneBundle& bundle, const io::Checkpoint* ck, const std::string& split) {
    if (split != "train" && split != "test" && split != "all")
        throw std::invalid_argument("split must be train, test or all");
    const int n = static_cast<int>(bundle.views.size());
    if (split == "all") {
        std::vector<int> all(n);
        for (int i = 0; i < n; ++i) all[i] = i;
        return all;
    }
    if (ck && ck->header.contains("train_views")) {
        const auto train = ck->header["train_views"].get<std::vector<int>>();
        if (split == "train") return train;
        std::vector<int> test;
        for (int i = 0; i < n; ++i) {
            if (std::find(train.begin(), train.end(), i) == train.end()) test.push_back(i);
        }
        return test;
    }
    return bundle.indices(split == "train");
}

std::vector<geom::Pose> checkpoint_poses(const io::Checkpoint& ck) {
    std::vector<geom::Pose> out;
    for (const auto& p : ck.header.at("poses")) out.push_back(geom::pose_from_json(p));
    return out;
}

geom::CameraIntrinsics checkpoint_intrinsics(const io::Checkpoint& ck) {
    return geom::intrinsics_from_json(ck.header.at("intrinsics"));
}

}  // namespace nirsplat::train

namespace nirsplat::train {

geom::Pose perturb_pose(const geom::Pose& pose, double angle, double shift, Rng& rng) {
    auto direction = [&rng] {
        Vec3 d(rng.normal(), rng.normal(), rng.normal());
        return Vec3(d / d.norm());
    };
    Vec6 twist;
    twist.head<3>() = angle * direction();
    twist.tail<3>() = shift * direction();
    return geom::se3_apply_increment(pose, twist);
}

}  // namespace nirsplat::train
