#include "nirsplat/spectra.hpp"

#include "nirsplat/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace nirsplat::spectra {

const std::vector<std::string>& weather_keys() {
    static const std::vector<std::string> keys = {"temp",       "dew",          "humidity",       "precip",
                                                  "precipprob", "cloudcover",   "solarradiation", "uvindex",
                                                  "windgust",   "windspeed",    "visibility"};
    return keys;
}

namespace {

void check_pair(const Image& a, const Image& b, const char* what) {
    if (a.channels != 1 || b.channels != 1 || a.width != b.width || a.height != b.height)
        throw ContractViolation(std::string(what) + ": inputs must be registered single-channel maps of equal size");
}

template <typename F>
Image elementwise(const Image& a, const Image& b, const char* what, F f) {
    check_pair(a, b, what);
    Image out(a.width, a.height, 1);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
}

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string fmt_weather(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string stats_text(const char* name, const IndexStats& s) {
    return std::string(name) + " mean " + fmt3(s.mean) + ", min " + fmt3(s.min) + ", max " + fmt3(s.max);
}

}  // namespace

Image ndvi(const Image& nir, const Image& red) {
    return elementwise(nir, red, "ndvi", [](double n, double r) { return (n - r) / (n + r + kIndexEps); });
}

Image ndwi(const Image& green, const Image& nir) {
    return elementwise(green, nir, "ndwi", [](double g, double n) { return (g - n) / (g + n + kIndexEps); });
}

Image chlorophyll_index(const Image& nir, const Image& green) {
    return elementwise(nir, green, "chlorophyll_index", [](double n, double g) { return n / (g + kIndexEps) - 1.0; });
}

IndexStats index_stats(const Image& index) {
    if (index.data.empty()) throw ContractViolation("index_stats: empty map");
    IndexStats s{0.0, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (double v : index.data) {
        s.mean += v;
        s.min = std::min(s.min, v);
        s.max = std::max(s.max, v);
    }
    s.mean /= static_cast<double>(index.data.size());
    return s;
}

std::map<std::string, double> weather_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("weather: expected a JSON object");
    std::vector<std::string> missing;
    std::map<std::string, double> out;
    for (const auto& k : weather_keys()) {
        if (!j.contains(k) || !j[k].is_number()) {
            missing.push_back(k);
            continue;
        }
        out[k] = j[k].get<double>();
    }
    std::vector<std::string> unknown;
    for (const auto& [k, v] : j.items()) {
        if (std::find(weather_keys().begin(), weather_keys().end(), k) == weather_keys().end()) unknown.push_back(k);
    }
    if (!missing.empty() || !unknown.empty()) {
        std::string msg = "weather:";
        if (!missing.empty()) {
            msg += " missing keys";
            for (const auto& k : missing) msg += " " + k;
        }
        if (!unknown.empty()) {
            msg += missing.empty() ? " unknown keys" : "; unknown keys";
            for (const auto& k : unknown) msg += " " + k;
        }
        throw std::invalid_argument(msg);
    }
    return out;
}

std::string assemble_prompt(const PromptMetadata& meta) {
    std::vector<std::string> missing;
    for (const auto& k : weather_keys()) {
        if (!meta.weather.count(k)) missing.push_back(k);
    }
    if (!missing.empty()) {
        std::string msg = "assemble_prompt: missing weather keys";
        for (const auto& k : missing) msg += " " + k;
        throw std::invalid_argument(msg);
    }
    for (const IndexStats* s : {&meta.ndvi, &meta.ndwi, &meta.ci}) {
        if (!std::isfinite(s->mean) || !std::isfinite(s->min) || !std::isfinite(s->max))
            throw ContractViolation("assemble_prompt: index statistics must be finite");
    }

    std::string weather;
    for (const auto& k : weather_keys()) {
        if (!weather.empty()) weather += ", ";
        weather += k + " " + fmt_weather(meta.weather.at(k));
    }

    std::string p;
    p += "You are a multimodal plant understanding expert specializing in 3D reconstruction under challenging "
         "visual and environmental conditions.\n";
    p += "Your task is to generate a single coherent paragraph by synthesizing (i) image description, (ii) "
         "NIR-based indices (NDVI, NDWI, chlorophyll index), and (iii) weather metadata, highlighting structural "
         "and physiological features to support cross-modal attention in downstream reconstruction.\n\n";
    p += "The provided data are as follows:\n\n";
    p += "Image Description: " + meta.img_description + "\n\n";
    p += "NIR Information: " + stats_text("NDVI", meta.ndvi) + "; " + stats_text("NDWI", meta.ndwi) + "; " +
         stats_text("chlorophyll index", meta.ci) + "\n\n";
    p += "Weather Information: " + weather + "\n\n";
    p += "Instructions:\n";
    p += "- Do not simply concatenate the inputs. Instead, synthesize them into a natural and cohesive narrative.\n";
    p += "- Evaluate whether the weather conditions and image description are semantically aligned (e.g., "
         "indoor/outdoor consistency). Use only the relevant components.\n";
    p += "- Embed physiological and environmental data meaningfully rather than listing raw numbers (e.g., say "
         "\"under high humidity\" instead of \"81%\").\n";
    p += "- Emphasize attributes that affect visual appearance and 3D geometry, such as occlusion, lighting "
         "variation, leaf texture, or overlapping structures.\n";
    p += "- Limit your output to a paragraph (max 200 words) in fluent and formal English.\n";
    p += "- Do not include explanations, metadata, or any extra text. Output only the final paragraph.\n\n";
    p += "The final rewritten description is:\n";
    return p;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto is_digit = [](unsigned char c) { return std::isdigit(c) != 0; };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        const bool word = std::isalnum(c) || c >= 0x80;
        const bool decimal_point = c == '.' && !cur.empty() && is_digit(static_cast<unsigned char>(cur.back())) &&
                                   i + 1 < text.size() && is_digit(static_cast<unsigned char>(text[i + 1]));
        if (word || decimal_point) {
            cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

TextEmbedding embed_text(const std::string& prompt, int channels, int max_tokens) {
    if (channels < 1 || max_tokens < 1) throw ContractViolation("embed_text: channels and max_tokens must be positive");
    std::vector<std::string> toks = tokenize(prompt);
    if (toks.empty()) throw std::invalid_argument("embed_text: prompt contains no tokens");
    if (static_cast<int>(toks.size()) > max_tokens) toks.resize(max_tokens);

    TextEmbedding e;
    e.tokens.resize(static_cast<Eigen::Index>(toks.size()), channels);
    for (std::size_t t = 0; t < toks.size(); ++t) {
        std::uint64_t state = fnv1a64(toks[t]);
        double norm2 = 0.0;
        for (int c = 0; c < channels; ++c) {
            // 53 high bits mapped to [-1, 1).
            const double v = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-52 - 1.0;
            e.tokens(t, c) = v;
            norm2 += v * v;
        }
        if (norm2 == 0.0) {
            e.tokens(t, 0) = 1.0;
            norm2 = 1.0;
        }
        e.tokens.row(t) /= std::sqrt(norm2);
    }
    e.token_strings = std::move(toks);
    return e;
}

}  // namespace nirsplat::spectra
