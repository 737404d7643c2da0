#include "nirsplat/scene.hpp"

#include "nirsplat/io.hpp"
#include "nirsplat/raster.hpp"
#include "nirsplat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <stdexcept>

namespace nirsplat::scene {

namespace {

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string numbered(const char* stem, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem, i, ext);
    return buf;
}

struct WeatherRow {
    const char* description;
    double values[11];
};

// temp, dew, humidity, precip, precipprob, cloudcover, solarradiation, uvindex, windgust, windspeed, visibility
const WeatherRow kWeather[] = {
    {"A potted plant on a bench under strong midday sunlight, with overlapping leaves casting hard shadows.",
     {29.4, 14.2, 39.0, 0.0, 0.0, 8.5, 812.0, 8.0, 21.6, 9.4, 24.1}},
    {"A leafy seedling photographed indoors under artificial grow lights with partial occlusion by its stem.",
     {22.1, 11.8, 52.0, 0.0, 5.0, 64.0, 120.0, 1.0, 7.2, 3.1, 16.0}},
    {"A medium shrub at dusk in low light, with dense foliage and soft, uneven illumination.",
     {17.6, 13.9, 79.0, 0.4, 35.0, 71.2, 42.0, 0.0, 30.2, 14.8, 11.3}},
    {"A young tomato plant in normal daylight with broad leaves and a thin central stem.",
     {24.3, 12.5, 47.0, 0.0, 10.0, 28.0, 560.0, 6.0, 15.1, 7.7, 20.5}},
};

}  // namespace

std::vector<int> SceneBundle::indices(bool train) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < views.size(); ++i) {
        if (views[i].train == train) out.push_back(static_cast<int>(i));
    }
    return out;
}

std::pair<std::vector<int>, std::vector<int>> split_views(int n_total, int k, std::uint64_t seed) {
    if (k < 1 || k >= n_total)
        throw std::invalid_argument("split_views: need 1 <= k < n_total (k=" + std::to_string(k) +
                                    ", n=" + std::to_string(n_total) + ")");
    std::vector<int> idx(n_total);
    for (int i = 0; i < n_total; ++i) idx[i] = i;
    Rng rng(seed);
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_total - i)));
        std::swap(idx[i], idx[j]);
    }
    std::vector<int> train(idx.begin(), idx.begin() + k);
    std::vector<int> test(idx.begin() + k, idx.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

double scene_extent(const std::vector<geom::Pose>& poses) {
    double e = 0.0;
    for (std::size_t i = 0; i < poses.size(); ++i) {
        for (std::size_t j = i + 1; j < poses.size(); ++j) e = std::max(e, (poses[i].center() - poses[j].center()).norm());
    }
    return e;
}

std::vector<geom::Pose> ring_poses(int n_views, double radius, double height) {
    std::vector<geom::Pose> out;
    for (int i = 0; i < n_views; ++i) {
        const double a = 2.0 * std::numbers::pi * i / n_views;
        const Vec3 eye(radius * std::cos(a), -height, radius * std::sin(a));
        out.push_back(geom::look_at(eye, Vec3::Zero(), Vec3(0.0, -1.0, 0.0)));
    }
    return out;
}

geom::CameraIntrinsics default_intrinsics(int width, int height) {
    const double f = 1.2 * std::max(width, height);
    return {f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height};
}

Image synth_rgb(const field::GaussianField& f, const geom::Pose& pose, const geom::CameraIntrinsics& K,
                double exposure) {
    Image img = raster::render(f, pose, K, Vec3::Zero()).color;
    for (double& v : img.data) v = std::clamp(exposure * v, 0.0, 1.0);
    return img;
}

Image synth_nir(const field::GaussianField& f, const std::vector<double>& albedo, const geom::Pose& pose,
                const geom::CameraIntrinsics& K) {
    const Image rgb = raster::render(f, pose, K, Vec3::Zero()).color;
    RowMatrix values(static_cast<Eigen::Index>(albedo.size()), 1);
    for (std::size_t i = 0; i < albedo.size(); ++i) values(i, 0) = albedo[i];
    const Image alb = raster::render_features(f, pose, K, values, VecX::Zero(1));
    Image nir(K.width, K.height, 1);
    for (int i = 0; i < K.width * K.height; ++i) {
        const double lum = 0.299 * rgb.data[3 * i] + 0.587 * rgb.data[3 * i + 1] + 0.114 * rgb.data[3 * i + 2];
        nir.data[i] = std::clamp(0.35 * lum + 0.65 * alb.data[i], 0.0, 1.0);
    }
    return nir;
}

geom::PointMap synth_pointmap(const field::GaussianField& f, const geom::Pose& pose, const geom::CameraIntrinsics& K) {
    RowMatrix values(static_cast<Eigen::Index>(f.primitives.size()), 2);
    for (std::size_t i = 0; i < f.primitives.size(); ++i) {
        values(i, 0) = pose.transform(f.primitives[i].mu).z();
        values(i, 1) = 1.0;
    }
    const Image comp = raster::render_features(f, pose, K, values, VecX::Zero(2));
    geom::PointMap pm(K.width, K.height);
    const geom::Pose inv = pose.inverse();
    for (int y = 0; y < K.height; ++y) {
        for (int x = 0; x < K.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * K.width + x;
            const double cover = comp.data[2 * i + 1];
            pm.confidence[i] = std::max(cover, 1e-3);
            if (cover < 0.5) continue;
            const double d = comp.data[2 * i] / cover;
            if (!(d > geom::kDepthEps)) continue;
            const Vec3 pc((x - K.cx) / K.fx * d, (y - K.cy) / K.fy * d, d);
            pm.points[i] = inv.transform(pc);
            pm.valid[i] = 1;
        }
    }
    return pm;
}

void write_pointmap(const std::string& path, const geom::PointMap& pm) {
    std::vector<double> v;
    v.reserve(pm.size() * 5);
    for (std::size_t i = 0; i < pm.size(); ++i) {
        v.insert(v.end(), {pm.points[i].x(), pm.points[i].y(), pm.points[i].z(), pm.confidence[i],
                           pm.valid[i] ? 1.0 : 0.0});
    }
    io::write_tensor(path, io::make_tensor({static_cast<std::uint32_t>(pm.height),
                                            static_cast<std::uint32_t>(pm.width), 5u},
                                           v));
}

geom::PointMap read_pointmap(const std::string& path) {
    const io::Tensor t = io::read_tensor(path);
    if (t.dims.size() != 3 || t.dims[2] != 5) throw std::runtime_error("point map tensor must be H x W x 5: " + path);
    geom::PointMap pm(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]));
    for (std::size_t i = 0; i < pm.size(); ++i) {
        const float* r = t.values.data() + 5 * i;
        pm.points[i] = Vec3(r[0], r[1], r[2]);
        pm.confidence[i] = r[3];
        pm.valid[i] = r[4] > 0.5f;
    }
    return pm;
}

void write_manifest(const SceneBundle& b) {
    nlohmann::json j;
    j["version"] = 1;
    j["intrinsics"] = geom::to_json(b.K);
    j["extent"] = b.extent;
    j["seed"] = b.seed;
    j["sh_degree"] = b.sh_degree;
    if (!b.prompt_meta.empty()) j["prompt_meta"] = b.prompt_meta;
    if (!b.gt_field.empty()) j["gt_field"] = b.gt_field;
    if (!b.gt_nir_albedo.empty()) j["gt_nir_albedo"] = b.gt_nir_albedo;
    j["views"] = nlohmann::json::array();
    for (const auto& v : b.views) {
        j["views"].push_back({{"rgb", v.rgb},
                              {"nir", v.nir},
                              {"pointmap", v.pointmap},
                              {"pose", geom::to_json(v.pose)},
                              {"split", v.train ? "train" : "test"}});
    }
    io::write_json(b.path("meta.json"), j);
}

SceneBundle load_scene(const std::string& dir) {
    SceneBundle b;
    b.dir = dir;
    const nlohmann::json j = io::read_json(dir + "/meta.json");
    try {
        b.K = geom::intrinsics_from_json(j.at("intrinsics"));
        b.extent = j.at("extent").get<double>();
        b.seed = j.value("seed", std::uint64_t{0});
        b.sh_degree = j.value("sh_degree", 1);
        b.prompt_meta = j.value("prompt_meta", std::string());
        b.gt_field = j.value("gt_field", std::string());
        b.gt_nir_albedo = j.value("gt_nir_albedo", std::string());
        for (const auto& v : j.at("views")) {
            SceneView sv;
            sv.rgb = v.at("rgb").get<std::string>();
            sv.nir = v.at("nir").get<std::string>();
            sv.pointmap = v.at("pointmap").get<std::string>();
            sv.pose = geom::pose_from_json(v.at("pose"));
            sv.train = v.at("split").get<std::string>() == "train";
            b.views.push_back(std::move(sv));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("invalid scene manifest " + dir + "/meta.json: " + e.what());
    }
    b.K.validate();
    if (b.indices(true).empty()) throw std::runtime_error("scene manifest has no train view: " + dir);
    auto check = [&](const std::string& rel) {
        if (!rel.empty() && !std::filesystem::is_regular_file(b.path(rel))) throw io::MissingFile(b.path(rel));
    };
    for (const auto& v : b.views) {
        check(v.rgb);
        check(v.nir);
        check(v.pointmap);
    }
    check(b.prompt_meta);
    check(b.gt_field);
    check(b.gt_nir_albedo);
    return b;
}

ViewData load_view(const SceneBundle& b, int index) {
    const auto& v = b.views.at(static_cast<std::size_t>(index));
    ViewData d;
    d.rgb = io::read_png(b.path(v.rgb));
    d.nir = io::read_png(b.path(v.nir));
    d.pmap = read_pointmap(b.path(v.pointmap));
    d.pose = v.pose;
    if (d.rgb.channels != 3 || d.nir.channels != 1 || d.rgb.width != b.K.width || d.rgb.height != b.K.height ||
        d.nir.width != b.K.width || d.nir.height != b.K.height || d.pmap.width != b.K.width ||
        d.pmap.height != b.K.height)
        throw std::runtime_error("view " + std::to_string(index) + " does not match the scene intrinsics");
    return d;
}

SynthResult synth_scene(const SynthConfig& cfg, const std::string& out_dir) {
    if (cfg.n_gaussians < 1 || cfg.n_views < 2) throw std::invalid_argument("synth: need >= 1 Gaussian and >= 2 views");
    std::filesystem::create_directories(out_dir);
    Rng rng(cfg.seed);
    SynthResult r;
    r.field.sh_degree = cfg.sh_degree;
    const int n_coeffs = field::sh_coeff_count(cfg.sh_degree);
    // Parameters are rounded to float so checkpoints (float payload) hold them exactly.
    for (int i = 0; i < cfg.n_gaussians; ++i) {
        auto& g = r.field.add();
        for (int a = 0; a < 3; ++a) g.mu[a] = f32(rng.uniform(-0.5, 0.5));
        g.opacity_logit = f32(rng.uniform(1.0, 3.0));
        for (int a = 0; a < 3; ++a) g.log_scale[a] = f32(std::log(rng.uniform(0.06, 0.16)));
        Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q = field::normalize_quat(q);
        for (int a = 0; a < 4; ++a) g.rotation[a] = f32(q[a]);
        for (int c = 0; c < 3; ++c) g.sh[c] = f32(field::dc_from_color(rng.uniform(0.15, 0.85)));
        for (int k = 3; k < 3 * n_coeffs; ++k) g.sh[k] = f32(rng.uniform(-0.15, 0.15));
        r.nir_albedo.push_back(f32(rng.uniform(0.0, 1.0)));
    }

    auto& b = r.bundle;
    b.dir = out_dir;
    b.K = default_intrinsics(cfg.width, cfg.height);
    b.seed = cfg.seed;
    b.sh_degree = cfg.sh_degree;
    const auto poses = ring_poses(cfg.n_views, cfg.ring_radius, cfg.ring_height);
    b.extent = scene_extent(poses);
    const int k = std::clamp(cfg.split, 1, cfg.n_views - 1);
    const auto [train, test] = split_views(cfg.n_views, k, cfg.seed);
    for (int i = 0; i < cfg.n_views; ++i) {
        SceneView v;
        v.rgb = numbered("rgb", i, "png");
        v.nir = numbered("nir", i, "png");
        v.pointmap = numbered("pointmap", i, "nst");
        v.pose = poses[i];
        v.train = std::binary_search(train.begin(), train.end(), i);
        io::write_png(b.path(v.rgb), synth_rgb(r.field, v.pose, b.K, cfg.exposure));
        io::write_png(b.path(v.nir), synth_nir(r.field, r.nir_albedo, v.pose, b.K));
        write_pointmap(b.path(v.pointmap), synth_pointmap(r.field, v.pose, b.K));
        b.views.push_back(std::move(v));
    }

    b.gt_field = "gt_field.ply";
    io::write_ply(b.path(b.gt_field), r.field);
    b.gt_nir_albedo = "gt_nir_albedo.nst";
    io::write_tensor(b.path(b.gt_nir_albedo),
                     io::make_tensor({static_cast<std::uint32_t>(r.nir_albedo.size())}, r.nir_albedo));

    const WeatherRow& row = kWeather[cfg.seed % std::size(kWeather)];
    nlohmann::json weather = nlohmann::json::object();
    const char* keys[] = {"temp",           "dew",     "humidity", "precip",    "precipprob", "cloudcover",
                          "solarradiation", "uvindex", "windgust", "windspeed", "visibility"};
    for (int i = 0; i < 11; ++i) weather[keys[i]] = row.values[i];
    b.prompt_meta = "prompt_meta.json";
    io::write_json(b.path(b.prompt_meta), {{"img_description", row.description}, {"weather", weather}});
    write_manifest(b);
    return r;
}

}  // namespace nirsplat::scene
