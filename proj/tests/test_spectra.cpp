#include "nirsplat/spectra.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

using namespace nirsplat;
using namespace nirsplat::spectra;

namespace {

Image constant(double v, int w = 4, int h = 3) { return Image(w, h, 1, v); }

PromptMetadata fixture_meta() {
    PromptMetadata m;
    m.img_description = "A potted basil plant on a wooden bench with broad overlapping leaves.";
    m.ndvi = {0.512, 0.101, 0.874};
    m.ndwi = {-0.320, -0.655, 0.044};
    m.ci = {1.875, 0.213, 4.902};
    double v = 1.0;
    for (const auto& k : weather_keys()) m.weather[k] = (v += 1.5);
    return m;
}

}  // namespace

TEST_CASE("index examples") {
    for (double v : ndvi(constant(0.4), constant(0.4)).data) CHECK(std::abs(v) < 1e-7);
    for (double v : ndvi(constant(0.6), constant(0.2)).data) CHECK(std::abs(v - 0.5) < 1e-7);
    for (double v : ndvi(constant(0.0), constant(0.0)).data) CHECK(v == 0.0);

    for (double v : ndwi(constant(0.3), constant(0.3)).data) CHECK(std::abs(v) < 1e-7);
    for (double v : ndwi(constant(0.8), constant(0.2)).data) CHECK(std::abs(v - 0.6) < 1e-7);
    for (double v : ndwi(constant(0.0), constant(0.0)).data) CHECK(v == 0.0);

    for (double v : chlorophyll_index(constant(0.5), constant(0.5)).data) CHECK(std::abs(v) < 1e-6);
    for (double v : chlorophyll_index(constant(0.6), constant(0.2)).data) CHECK(std::abs(v - 2.0) < 1e-6);
    for (double v : chlorophyll_index(constant(0.5), constant(0.0)).data) {
        CHECK(std::isfinite(v));
        CHECK(v > 0.0);
        CHECK(v == doctest::Approx(0.5 / kIndexEps - 1.0));
    }
}

TEST_CASE("index maps require registered single-channel pairs") {
    CHECK_THROWS_AS(ndvi(constant(0.5, 4, 3), constant(0.5, 3, 4)), ContractViolation);
    CHECK_THROWS_AS(ndwi(Image(4, 3, 3, 0.5), constant(0.5)), ContractViolation);
    CHECK_THROWS_AS(index_stats(Image()), ContractViolation);
}

TEST_CASE("normalised differences stay in [-1, 1] on random pixels") {
    Rng rng(11);
    const Image a = testing::random_image(1000, 1000, 1, rng);
    const Image b = testing::random_image(1000, 1000, 1, rng);
    for (const Image& m : {ndvi(a, b), ndwi(a, b)}) {
        double worst = 0.0;
        for (double v : m.data) worst = std::max(worst, std::abs(v));
        CHECK(worst <= 1.0 + 1e-6);
    }
}

TEST_CASE("index stats") {
    Image m(3, 1, 1);
    m.data = {-0.5, 0.25, 1.0};
    const auto s = index_stats(m);
    CHECK(s.mean == doctest::Approx(0.25));
    CHECK(s.min == -0.5);
    CHECK(s.max == 1.0);
}

TEST_CASE("prompt template") {
    const auto m = fixture_meta();
    const std::string p = assemble_prompt(m);
    CHECK(p.rfind("You are a multimodal plant understanding expert", 0) == 0);
    CHECK(p == assemble_prompt(m));

    const auto nir_begin = p.find("NIR Information:");
    const auto nir_end = p.find("Weather Information:");
    REQUIRE(nir_begin != std::string::npos);
    REQUIRE(nir_end != std::string::npos);
    CHECK(p.substr(nir_begin, nir_end - nir_begin).find("0.512") != std::string::npos);

    CHECK(p.find("Image Description: " + m.img_description) != std::string::npos);
    int bullets = 0;
    for (std::size_t pos = p.find("\n- "); pos != std::string::npos; pos = p.find("\n- ", pos + 1)) ++bullets;
    CHECK(bullets == 6);
    const std::string closing = "The final rewritten description is:\n";
    CHECK(p.compare(p.size() - closing.size(), closing.size(), closing) == 0);
}

TEST_CASE("prompt distinguishes differing stats") {
    const auto base = fixture_meta();
    std::set<std::string> seen{assemble_prompt(base)};
    for (int i = 0; i < 200; ++i) {
        auto m = base;
        IndexStats* targets[] = {&m.ndvi, &m.ndwi, &m.ci};
        IndexStats& s = *targets[i % 3];
        double* fields[] = {&s.mean, &s.min, &s.max};
        // Perturb at the printed resolution so the difference survives formatting.
        *fields[(i / 3) % 3] += 0.001 * (1 + i);
        CHECK(seen.insert(assemble_prompt(m)).second);
    }
}

TEST_CASE("prompt weather validation") {
    auto m = fixture_meta();
    m.weather.erase("humidity");
    m.weather.erase("uvindex");
    try {
        assemble_prompt(m);
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("humidity") != std::string::npos);
        CHECK(msg.find("uvindex") != std::string::npos);
    }

    nlohmann::json w;
    for (const auto& k : weather_keys()) w[k] = 1.0;
    CHECK(weather_from_json(w).size() == weather_keys().size());
    w["pressure"] = 1013.0;
    CHECK_THROWS_AS(weather_from_json(w), std::invalid_argument);
    w.erase("pressure");
    w.erase("temp");
    CHECK_THROWS_AS(weather_from_json(w), std::invalid_argument);
}

TEST_CASE("tokenizer") {
    const auto t = tokenize("NDVI mean 0.512, min -0.1; Leaf-Texture. end.");
    const std::vector<std::string> expected = {"ndvi", "mean", "0.512", "min", "0.1", "leaf", "texture", "end"};
    CHECK(t == expected);
    CHECK(tokenize("  ,;  ").empty());
}

TEST_CASE("fnv1a64 reference vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("text embedding") {
    const auto e = embed_text("NDVI rises where ndvi is high", 16, 64);
    REQUIRE(e.tokens.rows() == 6);
    REQUIRE(e.tokens.cols() == 16);
    CHECK(e.tokens.row(0) == e.tokens.row(3));
    for (Eigen::Index r = 0; r < e.tokens.rows(); ++r) CHECK(std::abs(e.tokens.row(r).norm() - 1.0) < 1e-6);

    const auto again = embed_text("NDVI rises where ndvi is high", 16, 64);
    CHECK(again.tokens == e.tokens);
    CHECK(again.token_strings == e.token_strings);

    const auto cut = embed_text("NDVI rises where ndvi is high", 16, 2);
    CHECK(cut.tokens.rows() == 2);
    CHECK(cut.tokens == e.tokens.topRows(2));

    CHECK_THROWS_AS(embed_text("", 16, 8), std::invalid_argument);
    CHECK_THROWS_AS(embed_text(" .,; ", 16, 8), std::invalid_argument);
    CHECK_THROWS_AS(embed_text("leaf", 0, 8), ContractViolation);
}

TEST_CASE("no collisions over the fixture vocabulary") {
    std::ifstream in(std::string(NIRSPLAT_FIXTURE_DIR) + "/vocab_10k.txt");
    REQUIRE(in.good());
    std::vector<std::string> vocab;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) vocab.push_back(line);
    REQUIRE(vocab.size() == 10000);

    std::unordered_map<std::uint64_t, std::string> hashes;
    std::set<std::vector<double>> rows;
    for (const auto& w : vocab) {
        REQUIRE(tokenize(w) == std::vector<std::string>{w});
        CHECK(hashes.emplace(fnv1a64(w), w).second);
        const auto e = embed_text(w, 8, 1);
        rows.insert(std::vector<double>(e.tokens.data(), e.tokens.data() + e.tokens.size()));
    }
    CHECK(rows.size() == vocab.size());
}
