#include "nirsplat/io.hpp"
#include "nirsplat/optim.hpp"
#include "nirsplat/parallel.hpp"
#include "nirsplat/raster.hpp"
#include "nirsplat/scene.hpp"
#include "nirsplat/spectra.hpp"
#include "nirsplat/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace nirsplat;

namespace {

/// Exclusive lock file in an output directory, removed on scope exit.
class DirLock {
public:
    explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
        fs::create_directories(dir);
        FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) throw std::runtime_error("output directory is locked by another process: " + dir);
        std::fclose(f);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

void require(const std::string& path) {
    if (!fs::exists(path)) throw io::MissingFile(path);
}

nlohmann::json stats_json(const spectra::IndexStats& s) { return {{"mean", s.mean}, {"min", s.min}, {"max", s.max}}; }

spectra::IndexStats stats_from(const nlohmann::json& j) {
    return {j.at("mean").get<double>(), j.at("min").get<double>(), j.at("max").get<double>()};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal Gaussian splatting toolkit"};
    app.require_subcommand(1);
    int workers = 0;
    app.add_option("--workers", workers, "Worker threads (default: NIRSPLAT_WORKERS or 1)");

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic scene bundle");
    std::string synth_out, res = "64x64";
    scene::SynthConfig scfg;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--gaussians", scfg.n_gaussians, "Number of primitives")->default_val(10);
    synth->add_option("--views", scfg.n_views, "Number of ring views")->default_val(24);
    synth->add_option("--res", res, "Resolution WxH")->default_val("64x64");
    synth->add_option("--seed", scfg.seed, "Seed")->default_val(0);
    synth->add_option("--split", scfg.split, "Train views tagged in the manifest")->default_val(3);
    synth->add_option("--exposure", scfg.exposure, "RGB gain before clamping")->default_val(1.0);
    synth->add_option("--sh-degree", scfg.sh_degree, "SH degree")->default_val(1);

    // train
    auto* trn = app.add_subcommand("train", "Optimise a field on a scene");
    std::string train_scene_dir, train_config, train_out, train_init;
    std::optional<int> train_views, train_iters;
    std::optional<std::uint64_t> train_seed;
    trn->add_option("--scene", train_scene_dir, "Scene directory")->required();
    trn->add_option("--views", train_views, "Number of train views");
    trn->add_option("--iters", train_iters, "Iterations");
    trn->add_option("--seed", train_seed, "Seed");
    trn->add_option("--config", train_config, "JSON config file");
    trn->add_option("--init", train_init, "pointmap | ground_truth | fused");
    trn->add_option("--out", train_out, "Output directory")->required();

    // render
    auto* rnd = app.add_subcommand("render", "Render a checkpoint at one scene pose");
    std::string render_ck, render_out, render_raw;
    int render_pose = 0;
    rnd->add_option("--checkpoint", render_ck, "Checkpoint file")->required();
    rnd->add_option("--pose-index", render_pose, "View index")->required();
    rnd->add_option("--out", render_out, "Output PNG")->required();
    rnd->add_option("--raw", render_raw, "Also write the float render as a tensor file");

    // eval
    auto* evl = app.add_subcommand("eval", "Score a checkpoint on a scene split");
    std::string eval_ck, eval_scene, eval_split = "test", eval_out;
    int refine_iters = 0;
    bool eval_quantize = false;
    evl->add_option("--checkpoint", eval_ck, "Checkpoint file")->required();
    evl->add_option("--scene", eval_scene, "Scene directory")->required();
    evl->add_option("--split", eval_split, "train | test | all")->default_val("test");
    evl->add_option("--refine-pose-iters", refine_iters, "Pose-only refinement iterations per view")->default_val(0);
    evl->add_flag("--quantize", eval_quantize, "Score 8-bit renders");
    evl->add_option("--out", eval_out, "Also write the report JSON here");

    // indices
    auto* idx = app.add_subcommand("indices", "Vegetation indices of an RGB/NIR pair");
    std::string idx_rgb, idx_nir, idx_out;
    idx->add_option("--rgb", idx_rgb, "RGB PNG")->required();
    idx->add_option("--nir", idx_nir, "NIR PNG")->required();
    idx->add_option("--out", idx_out, "Output directory")->required();

    // prompt
    auto* prm = app.add_subcommand("prompt", "Fill the prompt template from metadata");
    std::string prompt_meta, prompt_out, prompt_rewrite;
    prm->add_option("--meta", prompt_meta, "Metadata JSON")->required();
    prm->add_option("--out", prompt_out, "Output text file")->required();
    prm->add_option("--rewrite", prompt_rewrite, "Externally rewritten prompt used in place of the template");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
    std::string suite = "all";
    gc->add_option("--suite", suite, "raster | encode | fuse | losses | all")->default_val("all");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (workers > 0) set_worker_count(workers);

        if (*synth) {
            const auto x = res.find('x');
            if (x == std::string::npos) throw std::invalid_argument("--res must look like WxH");
            scfg.width = std::stoi(res.substr(0, x));
            scfg.height = std::stoi(res.substr(x + 1));
            DirLock lock(synth_out);
            const auto r = scene::synth_scene(scfg, synth_out);
            std::cout << "wrote " << r.bundle.views.size() << " views to " << synth_out << "\n";
        } else if (*trn) {
            nlohmann::json cj;
            if (!train_config.empty()) cj = io::read_json(train_config);
            train::TrainConfig cfg = train::train_config_from_json(cj);
            if (train_views) cfg.views = *train_views;
            if (train_iters) cfg.iterations = *train_iters;
            if (train_seed) cfg.seed = *train_seed;
            if (!train_init.empty()) cfg = train::train_config_from_json([&] {
                auto j = train::to_json(cfg);
                j["init"] = train_init;
                return j;
            }());
            const auto bundle = scene::load_scene(train_scene_dir);
            DirLock lock(train_out);
            const auto out = train::train_scene(bundle, cfg);
            io::write_checkpoint(train_out + "/checkpoint.nsck", out.checkpoint);
            optim::write_loss_csv(train_out + "/loss.csv", out.history);
            io::write_ply(train_out + "/field.ply", out.field);
            std::cout << "trained " << out.field.primitives.size() << " primitives";
            if (!out.history.empty()) std::cout << ", final photometric " << out.history.back().photometric;
            std::cout << "\n";
        } else if (*rnd) {
            const auto ck = io::read_checkpoint(render_ck);
            const auto f = io::load_field(ck);
            const auto poses = train::checkpoint_poses(ck);
            if (render_pose < 0 || render_pose >= static_cast<int>(poses.size()))
                throw std::invalid_argument("--pose-index out of range (checkpoint has " +
                                            std::to_string(poses.size()) + " poses)");
            const auto K = train::checkpoint_intrinsics(ck);
            const Image img = raster::render(f, poses[render_pose], K, Vec3::Zero()).color;
            io::write_png(render_out, img);
            if (!render_raw.empty()) {
                io::write_tensor(render_raw, io::make_tensor({static_cast<std::uint32_t>(img.height),
                                                              static_cast<std::uint32_t>(img.width), 3u},
                                                             img.data));
            }
        } else if (*evl) {
            const auto ck = io::read_checkpoint(eval_ck);
            const auto bundle = scene::load_scene(eval_scene);
            train::EvalOptions opt;
            opt.refine_pose_iters = refine_iters;
            opt.quantize = eval_quantize;
            const auto rep =
                train::evaluate(io::load_field(ck), bundle, train::split_indices(bundle, &ck, eval_split), opt);
            const auto j = train::to_json(rep);
            std::cout << j.dump(2) << "\n";
            if (!eval_out.empty()) io::write_json(eval_out, j);
        } else if (*idx) {
            require(idx_rgb);
            require(idx_nir);
            const Image rgb = io::read_png(idx_rgb);
            const Image nir = io::read_png(idx_nir);
            if (rgb.channels != 3 || nir.channels != 1) throw std::invalid_argument("expected an RGB and a gray PNG");
            const Image ndvi = spectra::ndvi(nir, rgb.channel(0));
            const Image ndwi = spectra::ndwi(rgb.channel(1), nir);
            const Image ci = spectra::chlorophyll_index(nir, rgb.channel(1));
            DirLock lock(idx_out);
            auto dims = std::vector<std::uint32_t>{static_cast<std::uint32_t>(nir.height),
                                                   static_cast<std::uint32_t>(nir.width)};
            io::write_tensor(idx_out + "/ndvi.nst", io::make_tensor(dims, ndvi.data));
            io::write_tensor(idx_out + "/ndwi.nst", io::make_tensor(dims, ndwi.data));
            io::write_tensor(idx_out + "/ci.nst", io::make_tensor(dims, ci.data));
            const nlohmann::json stats = {{"ndvi", stats_json(spectra::index_stats(ndvi))},
                                          {"ndwi", stats_json(spectra::index_stats(ndwi))},
                                          {"ci", stats_json(spectra::index_stats(ci))}};
            io::write_json(idx_out + "/stats.json", stats);
            std::cout << stats.dump(2) << "\n";
        } else if (*prm) {
            const auto meta = io::read_json(prompt_meta);
            std::string text;
            if (!prompt_rewrite.empty()) {
                text = io::read_text(prompt_rewrite);
            } else {
                spectra::PromptMetadata pm;
                pm.img_description = meta.at("img_description").get<std::string>();
                pm.ndvi = stats_from(meta.at("ndvi"));
                pm.ndwi = stats_from(meta.at("ndwi"));
                pm.ci = stats_from(meta.at("ci"));
                pm.weather = spectra::weather_from_json(meta.at("weather"));
                text = spectra::assemble_prompt(pm);
            }
            io::write_text(prompt_out, text);
        } else if (*gc) {
            bool ok = true;
            for (const auto& r : optim::run_gradcheck(suite)) {
                std::printf("%-30s max_rel_err %.3e  (%d coords, tol %.0e)  %s\n", r.name.c_str(),
                            r.report.max_rel_error, r.report.checked, r.tolerance, r.report.passed ? "ok" : "FAIL");
                ok = ok && r.report.passed;
            }
            return ok ? 0 : 1;
        }
    } catch (const io::MissingFile& e) {
        std::cerr << "missing file: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
