#include "nirsplat/io.hpp"
#include "nirsplat/metrics.hpp"
#include "nirsplat/parallel.hpp"
#include "nirsplat/scene.hpp"
#include "nirsplat/train.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <sys/wait.h>

using namespace nirsplat;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(NIRSPLAT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::vector<std::uint8_t>> snapshot(const std::string& dir) {
    std::map<std::string, std::vector<std::uint8_t>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = io::read_bytes(e.path().string());
    }
    return files;
}

scene::SynthConfig tiny_synth(std::uint64_t seed) {
    scene::SynthConfig c;
    c.n_gaussians = 6;
    c.n_views = 6;
    c.width = 24;
    c.height = 24;
    c.seed = seed;
    c.split = 3;
    return c;
}

}  // namespace

TEST_CASE("tensor files round trip bit-exactly") {
    Rng rng(1);
    std::vector<double> v(2 * 3 * 5);
    for (auto& x : v) x = rng.normal();
    const auto t = io::make_tensor({2, 3, 5}, v);
    const auto bytes = io::encode_tensor(t);
    REQUIRE(bytes.size() == 4 + 4 + 3 * 4 + v.size() * 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "NST1");
    const auto back = io::decode_tensor(bytes.data(), bytes.size());
    CHECK(back.dims == t.dims);
    CHECK(io::encode_tensor(back) == bytes);

    const std::string path = testing::temp_dir("tensor") + "/t.nst";
    io::write_tensor(path, t);
    CHECK(io::read_bytes(path) == bytes);

    CHECK_THROWS_AS(io::decode_tensor(bytes.data(), bytes.size() - 1), std::runtime_error);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(io::decode_tensor(bad.data(), bad.size()), std::runtime_error);
}

TEST_CASE("checkpoints round trip bit-exactly") {
    Rng rng(2);
    field::GaussianField f;
    f.sh_degree = 2;
    for (int i = 0; i < 5; ++i) f.primitives.push_back(testing::random_primitive(rng, 2));
    io::Checkpoint ck;
    ck.header = {{"iteration", 7}, {"seed", 3}, {"config_hash", "abc"}};
    io::store_field(ck, f);
    const auto bytes = io::encode_checkpoint(ck);
    const auto back = io::decode_checkpoint(bytes);
    CHECK(back.header == ck.header);
    CHECK(io::encode_checkpoint(back) == bytes);

    const auto g = io::load_field(back);
    REQUIRE(g.size() == f.size());
    CHECK(g.sh_degree == 2);
    for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(g.primitives[i].mu.cast<float>() == f.primitives[i].mu.cast<float>());
        CHECK(static_cast<float>(g.primitives[i].opacity_logit) == static_cast<float>(f.primitives[i].opacity_logit));
    }
}

TEST_CASE("ply round trip") {
    Rng rng(3);
    field::GaussianField f;
    f.sh_degree = 1;
    for (int i = 0; i < 4; ++i) f.primitives.push_back(testing::random_primitive(rng, 1));
    const std::string path = testing::temp_dir("ply") + "/f.ply";
    io::write_ply(path, f);
    const auto g = io::read_ply(path);
    REQUIRE(g.size() == f.size());
    CHECK(g.sh_degree == 1);
    for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(g.primitives[i].mu == f.primitives[i].mu);
        CHECK(g.primitives[i].log_scale == f.primitives[i].log_scale);
        CHECK(g.primitives[i].rotation == f.primitives[i].rotation);
        CHECK(g.primitives[i].opacity_logit == f.primitives[i].opacity_logit);
        CHECK(g.primitives[i].sh == f.primitives[i].sh);
    }
}

TEST_CASE("png round trip equals quantisation") {
    Rng rng(4);
    const Image img = testing::random_image(7, 5, 3, rng, -0.1, 1.1);
    const std::string dir = testing::temp_dir("png");
    io::write_png(dir + "/a.png", img);
    const Image back = io::read_png(dir + "/a.png");
    CHECK(back.data == io::quantize8(img).data);
    CHECK_THROWS_AS(io::read_png(dir + "/missing.png"), io::MissingFile);
}

TEST_CASE("psnr closed forms") {
    Image a(10, 10, 3, 0.5);
    CHECK(metrics::psnr(a, a) == 99.0);
    Image b = a;
    for (auto& v : b.data) v += 0.1;
    CHECK(metrics::psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
    for (auto& v : b.data) v = 0.49;
    CHECK(metrics::psnr(a, b) == doctest::Approx(40.0).epsilon(1e-12));
}

TEST_CASE("ssim identities and fixture") {
    Rng rng(5);
    const Image a = testing::random_image(16, 13, 3, rng);
    CHECK(std::abs(metrics::ssim(a, a) - 1.0) < 1e-9);
    const Image c(12, 12, 1, 0.5);
    CHECK(std::abs(metrics::ssim(c, c) - 1.0) < 1e-12);
    CHECK_THROWS_AS(metrics::ssim(Image(10, 20, 1), Image(10, 20, 1)), ContractViolation);

    const auto j = io::read_json(std::string(NIRSPLAT_FIXTURE_DIR) + "/ssim_fixture.json");
    const int w = j["width"], h = j["height"];
    Image x(w, h, 1), y(w, h, 1);
    x.data = j["a"].get<std::vector<double>>();
    y.data = j["b"].get<std::vector<double>>();
    CHECK(std::abs(metrics::ssim(x, y) - j["ssim"].get<double>()) < 1e-6);
}

TEST_CASE("view splits") {
    const auto [train, test] = scene::split_views(24, 3, 0);
    CHECK(train.size() == 3);
    CHECK(test.size() == 21);
    CHECK(std::is_sorted(train.begin(), train.end()));
    CHECK(std::is_sorted(test.begin(), test.end()));
    std::set<int> all(train.begin(), train.end());
    all.insert(test.begin(), test.end());
    CHECK(all.size() == 24);
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == 23);
    CHECK(scene::split_views(24, 3, 0) == scene::split_views(24, 3, 0));

    CHECK_THROWS_AS(scene::split_views(24, 24, 0), std::invalid_argument);
    CHECK_THROWS_AS(scene::split_views(24, 0, 0), std::invalid_argument);

    std::vector<int> counts(24, 0);
    const int seeds = 10000;
    for (int s = 0; s < seeds; ++s) {
        for (int i : scene::split_views(24, 3, static_cast<std::uint64_t>(s)).first) ++counts[i];
    }
    for (int c : counts) CHECK(std::abs(static_cast<double>(c) / seeds - 3.0 / 24.0) <= 0.01);
}

TEST_CASE("synthetic scenes are deterministic and self-consistent") {
    const std::string d1 = testing::temp_dir("synth_a");
    const std::string d2 = testing::temp_dir("synth_b");
    const auto r = scene::synth_scene(tiny_synth(9), d1);
    scene::synth_scene(tiny_synth(9), d2);
    CHECK(snapshot(d1) == snapshot(d2));

    const auto bundle = scene::load_scene(d1);
    CHECK(bundle.indices(true) == scene::split_views(6, 3, 9).first);
    const auto gt = io::read_ply(bundle.path(bundle.gt_field));
    for (std::size_t v = 0; v < bundle.views.size(); ++v) {
        const auto view = scene::load_view(bundle, static_cast<int>(v));
        const Image rendered = io::quantize8(scene::synth_rgb(gt, view.pose, bundle.K, 1.0));
        CHECK(rendered.data == view.rgb.data);
    }
    CHECK(r.field.size() == 6);
}

TEST_CASE("training is bit-identical across runs and worker counts") {
    const std::string dir = testing::temp_dir("train_det");
    scene::synth_scene(tiny_synth(2), dir);
    const auto bundle = scene::load_scene(dir);
    train::TrainConfig cfg;
    cfg.iterations = 15;
    cfg.views = 3;
    cfg.seed = 2;

    set_worker_count(1);
    const auto a = train::train_scene(bundle, cfg);
    set_worker_count(4);
    const auto b = train::train_scene(bundle, cfg);
    set_worker_count(1);
    CHECK(io::encode_checkpoint(a.checkpoint) == io::encode_checkpoint(b.checkpoint));
    REQUIRE(a.history.size() == 15);
    CHECK(a.history.back().photometric < a.history.front().photometric);
}

TEST_CASE("evaluation of an untouched ground-truth checkpoint") {
    const std::string dir = testing::temp_dir("eval_gt");
    scene::synth_scene(tiny_synth(6), dir);
    const auto bundle = scene::load_scene(dir);
    train::TrainConfig cfg;
    cfg.init = train::InitMode::ground_truth;
    cfg.iterations = 0;
    cfg.views = 3;
    const auto out = train::train_scene(bundle, cfg);
    const auto idx = train::split_indices(bundle, &out.checkpoint, "test");
    REQUIRE(idx.size() == 3);

    const auto direct = train::evaluate(io::read_ply(bundle.path(bundle.gt_field)), bundle, idx);
    const auto via_ck = train::evaluate(io::load_field(out.checkpoint), bundle, idx);
    CHECK(via_ck.mean_psnr == doctest::Approx(direct.mean_psnr).epsilon(1e-6));
    CHECK(via_ck.mean_ssim == doctest::Approx(direct.mean_ssim).epsilon(1e-6));

    train::EvalOptions q;
    q.quantize = true;
    cfg.init = train::InitMode::pointmap;
    cfg.iterations = 20;
    const auto trained = train::train_scene(bundle, cfg);
    const auto raw = train::evaluate(trained.field, bundle, idx);
    const auto quant = train::evaluate(trained.field, bundle, idx, q);
    CHECK(std::abs(raw.mean_psnr - quant.mean_psnr) <= 0.5);
}

TEST_CASE("command line") {
    const std::string dir = testing::temp_dir("cli");
    CHECK(run_cli("--bogus") == 2);
    CHECK(run_cli("synth --out " + dir + "/s --unknown-flag 3") == 2);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("eval --checkpoint " + dir + "/none.nsck --scene " + dir + "/none") == 1);

    CHECK(run_cli("synth --out " + dir + "/s --gaussians 4 --views 5 --res 16x16 --seed 1") == 0);
    CHECK(run_cli("train --scene " + dir + "/s --views 2 --iters 0 --init ground_truth --out " + dir + "/t") == 0);
    CHECK(fs::exists(dir + "/t/checkpoint.nsck"));
    CHECK(fs::exists(dir + "/t/loss.csv"));
    CHECK(run_cli("render --checkpoint " + dir + "/t/checkpoint.nsck --pose-index 0 --out " + dir + "/r.png") == 0);
    CHECK(io::read_png(dir + "/r.png").width == 16);
    CHECK(run_cli("eval --checkpoint " + dir + "/t/checkpoint.nsck --scene " + dir + "/s --out " + dir + "/e.json") ==
          0);
    CHECK(io::read_json(dir + "/e.json")["views"].size() == 3);

    io::write_png(dir + "/rgb.png", Image(8, 8, 3, 0.2));
    io::write_png(dir + "/nir.png", Image(8, 8, 1, 0.6));
    REQUIRE(run_cli("indices --rgb " + dir + "/rgb.png --nir " + dir + "/nir.png --out " + dir + "/idx") == 0);
    const auto stats = io::read_json(dir + "/idx/stats.json");
    // 8-bit storage moves 0.2 and 0.6 to 51/255 and 153/255, whose NDVI is still 0.5.
    CHECK(stats["ndvi"]["mean"].get<double>() == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(fs::exists(dir + "/idx/ndvi.nst"));

    CHECK(run_cli("prompt --meta " + dir + "/missing.json --out " + dir + "/p.txt") == 1);
    CHECK(run_cli("gradcheck --suite losses") == 0);
    CHECK(run_cli("gradcheck --suite nope") != 0);
}
