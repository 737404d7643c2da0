#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/field.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace nirsplat::io {

/// Thrown when an input file does not exist; what() is the path.
class MissingFile : public std::runtime_error {
public:
    explicit MissingFile(const std::string& path) : std::runtime_error(path) {}
};

/// 8-bit gray (1 channel) or RGB (3 channel) PNG; values round(255 * clamp(v, 0, 1)).
void write_png(const std::string& path, const Image& image);
/// Gray, gray+alpha, RGB or RGBA input; alpha is dropped. Values scaled to [0,1].
Image read_png(const std::string& path);
/// round(255 * clamp(v, 0, 1)) / 255 per value, i.e. what a PNG round trip yields.
Image quantize8(const Image& image);

/// Row-major tensor with float32 payload on disk.
struct Tensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    std::size_t size() const;
};

Tensor make_tensor(std::vector<std::uint32_t> dims, const std::vector<double>& values);
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Throws std::runtime_error on a bad magic or a truncated payload.
Tensor decode_tensor(const std::uint8_t* data, std::size_t size);
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

std::vector<std::uint8_t> read_bytes(const std::string& path);
void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);
nlohmann::json read_json(const std::string& path);
/// Pretty-printed with a trailing newline.
void write_json(const std::string& path, const nlohmann::json& j);

/// ASCII PLY with a "sh_degree <d>" comment; values printed with 17 significant digits.
void write_ply(const std::string& path, const field::GaussianField& f);
field::GaussianField read_ply(const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json header;
    std::map<std::string, Tensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

/// Field primitives as tensors under "field.*" keys.
void store_field(Checkpoint& ck, const field::GaussianField& f);
field::GaussianField load_field(const Checkpoint& ck);

std::uint64_t config_hash(const nlohmann::json& config);

}  // namespace nirsplat::io
