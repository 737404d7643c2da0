#pragma once

#include "nirsplat/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace nirsplat::spectra {

inline constexpr double kIndexEps = 1e-8;

/// Weather keys required by the prompt template, in template order.
const std::vector<std::string>& weather_keys();

/// Single-channel maps must share shape; all index functions are elementwise.
Image ndvi(const Image& nir, const Image& red);
Image ndwi(const Image& green, const Image& nir);
Image chlorophyll_index(const Image& nir, const Image& green);

struct IndexStats {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
};

IndexStats index_stats(const Image& index);

struct PromptMetadata {
    std::string img_description;
    IndexStats ndvi;
    IndexStats ndwi;
    IndexStats ci;
    std::map<std::string, double> weather;
};

/// Reads a weather JSON object; throws std::invalid_argument listing missing or unknown keys.
std::map<std::string, double> weather_from_json(const nlohmann::json& j);

/// Fills the botanic-aware template. Throws std::invalid_argument listing missing weather keys.
std::string assemble_prompt(const PromptMetadata& meta);

/// Lowercased word/number tokens; a '.' between digits stays inside the number.
std::vector<std::string> tokenize(const std::string& text);

/// 64-bit FNV-1a over the UTF-8 bytes.
std::uint64_t fnv1a64(const std::string& bytes);

struct TextEmbedding {
    RowMatrix tokens;  // L x C, unit rows
    std::vector<std::string> token_strings;
};

/// Hash-seeded token vectors. Throws std::invalid_argument for a prompt without tokens.
TextEmbedding embed_text(const std::string& prompt, int channels, int max_tokens);

}  // namespace nirsplat::spectra
