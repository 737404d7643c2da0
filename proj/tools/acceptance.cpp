// Prints one PASS/FAIL line per acceptance criterion.
//
// Exit status is 0 when every failing criterion was named with --expect-fail,
// so a known, documented shortfall can stay visible without breaking ctest.

#include "nirsplat/io.hpp"
#include "nirsplat/metrics.hpp"
#include "nirsplat/optim.hpp"
#include "nirsplat/parallel.hpp"
#include "nirsplat/scene.hpp"
#include "nirsplat/spectra.hpp"
#include "nirsplat/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <string>
#include <vector>

using namespace nirsplat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string work_dir(const std::string& root, const std::string& name) {
    const std::string d = root + "/" + name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Outcome gradient_suite() {
    Stopwatch sw;
    const auto results = optim::run_gradcheck("all");
    const double t = sw.seconds();
    double worst = 0.0;
    std::string worst_name;
    bool all = true;
    for (const auto& r : results) {
        all = all && r.report.passed && r.report.max_rel_error <= 2e-3;
        if (r.report.max_rel_error >= worst) {
            worst = r.report.max_rel_error;
            worst_name = r.name;
        }
    }
    return {all && t < 60.0,
            fmt("%zu checks, max rel error %.2e (%s) <= 2e-3, %.1fs < 60s", results.size(), worst, worst_name.c_str(), t)};
}

Outcome synthetic_recovery(const std::string& root) {
    scene::SynthConfig sc;
    sc.n_gaussians = 10;
    sc.n_views = 24;
    sc.width = sc.height = 64;
    sc.seed = 1;
    const auto synth = scene::synth_scene(sc, work_dir(root, "recovery"));
    Stopwatch sw;
    train::TrainConfig cfg;
    cfg.views = 8;
    cfg.iterations = 1000;
    cfg.seed = 1;
    const auto out = train::train_scene(synth.bundle, cfg);
    const auto held_out = train::split_indices(synth.bundle, &out.checkpoint, "test");
    const auto rep = train::evaluate(out.field, synth.bundle, held_out);
    const double t = sw.seconds();
    return {rep.mean_psnr >= 28.0 && rep.mean_ssim >= 0.92 && t < 300.0,
            fmt("held-out PSNR %.2f >= 28, SSIM %.4f >= 0.92 over %zu views, %.0fs < 300s", rep.mean_psnr,
                rep.mean_ssim, held_out.size(), t)};
}

Outcome pose_refinement(const std::string& root) {
    scene::SynthConfig sc;
    sc.seed = 7;
    const auto synth = scene::synth_scene(sc, work_dir(root, "pose"));
    const auto& b = synth.bundle;
    const auto train_idx = scene::split_views(static_cast<int>(b.views.size()), 8, b.seed).first;
    Rng rng(99);
    std::vector<optim::TrainView> views;
    for (int i : train_idx) {
        const auto vd = scene::load_view(b, i);
        views.push_back({train::perturb_pose(b.views[i].pose, 0.5 * std::numbers::pi / 180.0, 0.005 * b.extent, rng),
                         b.K, vd.rgb});
    }
    optim::JointConfig jc;
    jc.iterations = 300;
    jc.optimize_gaussians = false;
    jc.optimize_poses = true;
    jc.scene_extent = b.extent;
    Stopwatch sw;
    const auto res = optim::joint_optimize(synth.field, views, jc);
    const double t = sw.seconds();
    const double reduction = 1.0 - res.history.back().photometric / res.history.front().photometric;
    return {reduction >= 0.5 && t < 120.0,
            fmt("photometric %.4g -> %.4g, reduction %.1f%% >= 50%%, %.0fs < 120s", res.history.front().photometric,
                res.history.back().photometric, 100.0 * reduction, t)};
}

Outcome fusion_ablation(const std::string& root) {
    scene::SynthConfig sc;
    sc.width = sc.height = 32;
    sc.seed = 3;
    sc.exposure = 2.0;
    const auto synth = scene::synth_scene(sc, work_dir(root, "ablation"));
    std::map<std::string, double> psnr;
    for (const char* mode : {"attention", "concat", "sum"}) {
        auto cfg = train::train_config_from_json(
            {{"init", "fused"}, {"iterations", 0}, {"net_iterations", 200}, {"model", {{"fusion", mode}}}});
        cfg.views = 8;
        const auto out = train::train_scene(synth.bundle, cfg);
        psnr[mode] = train::evaluate(out.field, synth.bundle,
                                     train::split_indices(synth.bundle, &out.checkpoint, "test"))
                         .mean_psnr;
    }
    const double d_concat = psnr["attention"] - psnr["concat"];
    const double d_sum = psnr["attention"] - psnr["sum"];
    return {d_concat >= 0.5 && d_sum >= 0.5,
            fmt("held-out PSNR attention %.2f, concat %.2f, sum %.2f; margins %+.2f and %+.2f dB (need >= 0.5)",
                psnr["attention"], psnr["concat"], psnr["sum"], d_concat, d_sum)};
}

Outcome loss_identities() {
    const std::vector<double> losses = {0.02, 0.1, 0.4, 1.3, 5.0};
    const double w = 0.2;
    double worst_stationary = 0.0;
    for (double l : losses) {
        // Golden-section search for the minimiser of O l - w log O.
        auto f = [&](double o) {
            const double ov[] = {o}, lv[] = {l};
            return optim::confidence_loss(ov, lv, w);
        };
        double a = 1e-6, b = 100.0;
        const double r = (std::sqrt(5.0) - 1.0) / 2.0;
        for (int k = 0; k < 200; ++k) {
            const double c = b - r * (b - a), d = a + r * (b - a);
            if (f(c) < f(d))
                b = d;
            else
                a = c;
        }
        worst_stationary = std::max(worst_stationary, std::abs(0.5 * (a + b) - w / l));
    }

    geom::PointMap target(8, 6);
    Rng rng(17);
    for (std::size_t i = 0; i < target.size(); ++i) {
        target.points[i] = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1.0, 2.0));
        target.valid[i] = 1;
    }
    auto pred = target;
    for (auto& p : pred.points) p += Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.05;
    const double base = optim::pointmap_regression_loss(pred, target);
    double worst_scale = 0.0;
    for (int k = 0; k < 100; ++k) {
        const double s = std::exp(rng.uniform(-4.0, 4.0));
        auto scaled = pred;
        for (auto& p : scaled.points) p *= s;
        worst_scale = std::max(worst_scale, std::abs(optim::pointmap_regression_loss(scaled, target) - base));
    }
    return {worst_stationary <= 1e-6 && worst_scale <= 1e-9,
            fmt("|O - w/L| max %.1e <= 1e-6; point-map loss drift over 100 scales %.1e <= 1e-9", worst_stationary,
                worst_scale)};
}

Outcome metric_correctness(const std::string& fixture_dir) {
    Image a(16, 16, 3, 0.5), b(16, 16, 3, 0.6);
    const double p20 = metrics::psnr(a, b);
    Rng rng(3);
    Image r(24, 20, 3);
    for (auto& v : r.data) v = rng.uniform();
    const double ident = metrics::ssim(r, r);
    const auto j = io::read_json(fixture_dir + "/ssim_fixture.json");
    Image x(j["width"], j["height"], 1), y(j["width"], j["height"], 1);
    x.data = j["a"].get<std::vector<double>>();
    y.data = j["b"].get<std::vector<double>>();
    const double fixture = metrics::ssim(x, y);
    const double expected = j["ssim"].get<double>();
    const bool ok = std::abs(p20 - 20.0) <= 1e-9 && metrics::psnr(a, a) == metrics::kPsnrCap &&
                    std::abs(ident - 1.0) <= 1e-9 && std::abs(fixture - expected) <= 1e-6;
    return {ok, fmt("PSNR at MSE 0.01 = %.12f; SSIM identity %.12f; fixture %.9f vs oracle %.9f", p20, ident, fixture,
                    expected)};
}

std::vector<std::uint8_t> tree_bytes(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
    std::sort(files.begin(), files.end());
    std::vector<std::uint8_t> all;
    for (const auto& f : files) {
        all.insert(all.end(), f.begin(), f.end());
        const auto bytes = io::read_bytes(dir + "/" + f);
        all.insert(all.end(), bytes.begin(), bytes.end());
    }
    return all;
}

Outcome determinism(const std::string& root) {
    scene::SynthConfig sc;
    sc.width = sc.height = 32;
    sc.n_views = 12;
    sc.seed = 4;
    scene::synth_scene(sc, work_dir(root, "det_a"));
    scene::synth_scene(sc, work_dir(root, "det_b"));
    const bool synth_same = tree_bytes(root + "/det_a") == tree_bytes(root + "/det_b");

    const auto bundle = scene::load_scene(root + "/det_a");
    const int saved = worker_count();
    bool train_same = true;
    for (const char* init : {"pointmap", "fused"}) {
        auto cfg = train::train_config_from_json({{"init", init}, {"iterations", 40}, {"net_iterations", 5}});
        cfg.views = 3;
        cfg.seed = 4;
        std::vector<std::vector<std::uint8_t>> runs;
        for (int workers : {1, 4, 4}) {
            set_worker_count(workers);
            runs.push_back(io::encode_checkpoint(train::train_scene(bundle, cfg).checkpoint));
        }
        train_same = train_same && runs[0] == runs[1] && runs[1] == runs[2];
    }
    set_worker_count(saved);
    return {synth_same && train_same,
            fmt("synth bundles byte-identical: %s; train checkpoints (pointmap and fused init, 1/4/4 workers) "
                "bit-identical: %s",
                synth_same ? "yes" : "no", train_same ? "yes" : "no")};
}

Outcome spectral_prompt() {
    Rng rng(23);
    Image a(1000, 1000, 1), b(1000, 1000, 1);
    for (auto& v : a.data) v = rng.uniform();
    for (auto& v : b.data) v = rng.uniform();
    double worst = 0.0;
    for (const Image& m : {spectra::ndvi(a, b), spectra::ndwi(a, b)})
        for (double v : m.data) worst = std::isfinite(v) ? std::max(worst, std::abs(v)) : 1e300;

    spectra::PromptMetadata meta;
    meta.img_description = "A potted basil plant with overlapping leaves under a desk lamp.";
    meta.ndvi = spectra::index_stats(spectra::ndvi(a, b));
    meta.ndwi = spectra::index_stats(spectra::ndwi(a, b));
    meta.ci = {1.2, 0.1, 3.4};
    for (const auto& k : spectra::weather_keys()) meta.weather[k] = 10.0;
    const std::string p1 = spectra::assemble_prompt(meta);
    const std::string p2 = spectra::assemble_prompt(meta);
    const bool preamble = p1.rfind("You are a multimodal plant understanding expert", 0) == 0;
    return {worst <= 1.0 + 1e-6 && p1 == p2 && preamble,
            fmt("max |index| %.9f <= 1 + 1e-6 over 10^6 pixels; prompt deterministic: %s; preamble: %s", worst,
                p1 == p2 ? "yes" : "no", preamble ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<std::string> only, expect_fail;
    std::string root = (fs::temp_directory_path() / "nirsplat_acceptance").string();
    std::string fixtures = NIRSPLAT_FIXTURE_DIR;
    int workers = 0;
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--expect-fail", expect_fail, "Criteria whose failure does not change the exit status");
    app.add_option("--work-dir", root, "Scratch directory");
    app.add_option("--fixtures", fixtures, "Fixture directory");
    app.add_option("--workers", workers, "Worker threads");
    CLI11_PARSE(app, argc, argv);
    if (workers > 0) set_worker_count(workers);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient_suite", gradient_suite},
        {"synthetic_recovery", [&] { return synthetic_recovery(root); }},
        {"pose_refinement", [&] { return pose_refinement(root); }},
        {"fusion_ablation", [&] { return fusion_ablation(root); }},
        {"loss_identities", loss_identities},
        {"metric_correctness", [&] { return metric_correctness(fixtures); }},
        {"determinism", [&] { return determinism(root); }},
        {"spectral_prompt", spectral_prompt},
    };
    const std::set<std::string> known(expect_fail.begin(), expect_fail.end());

    int unexpected = 0;
    for (const auto& [name, fn] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::string note;
        if (!o.pass) note = known.count(name) ? " [expected failure]" : "";
        if (!o.pass && !known.count(name)) ++unexpected;
        if (o.pass && known.count(name)) note = " [marked expected-fail but passed]";
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << note << std::endl;
    }
    return unexpected == 0 ? 0 : 1;
}
