#include "nirsplat/io.hpp"

#include "nirsplat/spectra.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace nirsplat::io {

namespace {

void require_file(const std::string& path) {
    if (!std::filesystem::is_regular_file(path)) throw MissingFile(path);
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (size - pos < n) throw std::runtime_error("truncated data");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// PNG

void write_png(const std::string& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw ContractViolation("write_png: 1 or 3 channels required");
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png encode failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, image.width, image.height, 8, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // No timestamps or text chunks, so identical images give identical files.
    png_write_info(png, info);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(image.width) * image.channels);
    for (int y = 0; y < image.height; ++y) {
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = to_byte(image.data[y * row.size() + i]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    require_file(path);
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) throw std::runtime_error("cannot decode png " + path);
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw std::runtime_error("cannot decode png " + path);
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = buf[i] / 255.0;
    return out;
}

Image quantize8(const Image& image) {
    Image out = image;
    for (double& v : out.data) v = to_byte(v) / 255.0;
    return out;
}

// ---------------------------------------------------------------------------
// Tensors

std::size_t Tensor::size() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

Tensor make_tensor(std::vector<std::uint32_t> dims, const std::vector<double>& values) {
    Tensor t;
    t.dims = std::move(dims);
    if (t.size() != values.size()) throw ContractViolation("make_tensor: value count does not match dims");
    t.values.reserve(values.size());
    for (double v : values) t.values.push_back(static_cast<float>(v));
    return t;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.size() != t.values.size()) throw ContractViolation("encode_tensor: value count does not match dims");
    std::vector<std::uint8_t> out = {'N', 'S', 'T', '1'};
    put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    for (float f : t.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
    return out;
}

Tensor decode_tensor(const std::uint8_t* data, std::size_t size) {
    Reader r{data, size};
    if (r.str(4) != "NST1") throw std::runtime_error("tensor: bad magic");
    Tensor t;
    const std::uint32_t rank = r.u32();
    for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(r.u32());
    const std::size_t n = t.size();
    r.need(n * 4);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = r.u32();
        std::memcpy(&t.values[i], &bits, 4);
    }
    if (r.pos != size) throw std::runtime_error("tensor: trailing bytes");
    return t;
}

void write_tensor(const std::string& path, const Tensor& t) { write_bytes(path, encode_tensor(t)); }

Tensor read_tensor(const std::string& path) {
    const auto bytes = read_bytes(path);
    return decode_tensor(bytes.data(), bytes.size());
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    require_file(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string read_text(const std::string& path) {
    const auto bytes = read_bytes(path);
    return {bytes.begin(), bytes.end()};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

nlohmann::json read_json(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("invalid JSON in " + path + ": " + e.what());
    }
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// PLY

void write_ply(const std::string& path, const field::GaussianField& f) {
    const int n_sh = 3 * field::sh_coeff_count(f.sh_degree);
    std::string s = "ply\nformat ascii 1.0\ncomment sh_degree " + std::to_string(f.sh_degree) + "\nelement vertex " +
                    std::to_string(f.primitives.size()) + "\n";
    for (const char* p : {"x", "y", "z", "opacity_logit", "log_scale_0", "log_scale_1", "log_scale_2", "rot_0", "rot_1",
                          "rot_2", "rot_3"})
        s += std::string("property double ") + p + "\n";
    for (int k = 0; k < n_sh; ++k) s += "property double sh_" + std::to_string(k) + "\n";
    s += "end_header\n";
    char buf[64];
    auto put = [&](double v, bool last) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        s += buf;
        s += last ? '\n' : ' ';
    };
    for (const auto& g : f.primitives) {
        for (int a = 0; a < 3; ++a) put(g.mu[a], false);
        put(g.opacity_logit, false);
        for (int a = 0; a < 3; ++a) put(g.log_scale[a], false);
        for (int a = 0; a < 4; ++a) put(g.rotation[a], n_sh == 0 && a == 3);
        for (int k = 0; k < n_sh; ++k) put(g.sh[k], k == n_sh - 1);
    }
    write_text(path, s);
}

field::GaussianField read_ply(const std::string& path) {
    std::istringstream in(read_text(path));
    std::string line;
    field::GaussianField f;
    std::size_t count = 0;
    int n_props = 0;
    bool have_degree = false;
    if (!std::getline(in, line) || line != "ply") throw std::runtime_error("ply: bad magic in " + path);
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "comment") {
            std::string key;
            ls >> key;
            if (key == "sh_degree") {
                ls >> f.sh_degree;
                have_degree = true;
            }
        } else if (word == "element") {
            std::string name;
            ls >> name >> count;
        } else if (word == "property") {
            ++n_props;
        } else if (word == "end_header") {
            break;
        }
    }
    if (!have_degree) throw std::runtime_error("ply: missing sh_degree comment in " + path);
    const int n_sh = 3 * field::sh_coeff_count(f.sh_degree);
    if (n_props != 11 + n_sh) throw std::runtime_error("ply: property count does not match sh_degree in " + path);
    for (std::size_t i = 0; i < count; ++i) {
        auto& g = f.add();
        for (int a = 0; a < 3; ++a) in >> g.mu[a];
        in >> g.opacity_logit;
        for (int a = 0; a < 3; ++a) in >> g.log_scale[a];
        for (int a = 0; a < 4; ++a) in >> g.rotation[a];
        for (int k = 0; k < n_sh; ++k) in >> g.sh[k];
        if (!in) throw std::runtime_error("ply: truncated vertex data in " + path);
    }
    return f;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    std::vector<std::uint8_t> out = {'N', 'S', 'C', 'K'};
    put_u32(out, kCheckpointVersion);
    const std::string header = ck.header.dump();
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [key, t] : ck.tensors) {
        put_u32(out, static_cast<std::uint32_t>(key.size()));
        out.insert(out.end(), key.begin(), key.end());
        const auto blob = encode_tensor(t);
        put_u64(out, blob.size());
        out.insert(out.end(), blob.begin(), blob.end());
    }
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes.data(), bytes.size()};
    if (r.str(4) != "NSCK") throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.header = nlohmann::json::parse(r.str(r.u32()));
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string key = r.str(r.u32());
        const std::uint64_t len = r.u64();
        r.need(len);
        ck.tensors[key] = decode_tensor(bytes.data() + r.pos, len);
        r.pos += len;
    }
    if (r.pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
    return ck;
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) { write_bytes(path, encode_checkpoint(ck)); }

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_bytes(path)); }

void store_field(Checkpoint& ck, const field::GaussianField& f) {
    const auto n = static_cast<std::uint32_t>(f.primitives.size());
    const auto n_sh = static_cast<std::uint32_t>(3 * field::sh_coeff_count(f.sh_degree));
    std::vector<double> mu, op, sc, rot, sh;
    for (const auto& g : f.primitives) {
        mu.insert(mu.end(), g.mu.data(), g.mu.data() + 3);
        op.push_back(g.opacity_logit);
        sc.insert(sc.end(), g.log_scale.data(), g.log_scale.data() + 3);
        rot.insert(rot.end(), g.rotation.data(), g.rotation.data() + 4);
        sh.insert(sh.end(), g.sh.begin(), g.sh.end());
    }
    ck.tensors["field.mu"] = make_tensor({n, 3}, mu);
    ck.tensors["field.opacity_logit"] = make_tensor({n}, op);
    ck.tensors["field.log_scale"] = make_tensor({n, 3}, sc);
    ck.tensors["field.rotation"] = make_tensor({n, 4}, rot);
    ck.tensors["field.sh"] = make_tensor({n, n_sh}, sh);
    ck.header["sh_degree"] = f.sh_degree;
}

field::GaussianField load_field(const Checkpoint& ck) {
    field::GaussianField f;
    f.sh_degree = ck.header.at("sh_degree").get<int>();
    auto get = [&](const char* key) -> const Tensor& {
        auto it = ck.tensors.find(key);
        if (it == ck.tensors.end()) throw std::runtime_error(std::string("checkpoint: missing tensor ") + key);
        return it->second;
    };
    const auto& mu = get("field.mu");
    const auto& op = get("field.opacity_logit");
    const auto& sc = get("field.log_scale");
    const auto& rot = get("field.rotation");
    const auto& sh = get("field.sh");
    const std::size_t n = op.values.size();
    const int n_sh = 3 * field::sh_coeff_count(f.sh_degree);
    if (mu.values.size() != 3 * n || sc.values.size() != 3 * n || rot.values.size() != 4 * n ||
        sh.values.size() != n * n_sh)
        throw std::runtime_error("checkpoint: inconsistent field tensors");
    for (std::size_t i = 0; i < n; ++i) {
        auto& g = f.add();
        for (int a = 0; a < 3; ++a) {
            g.mu[a] = mu.values[3 * i + a];
            g.log_scale[a] = sc.values[3 * i + a];
        }
        g.opacity_logit = op.values[i];
        for (int a = 0; a < 4; ++a) g.rotation[a] = rot.values[4 * i + a];
        for (int k = 0; k < n_sh; ++k) g.sh[k] = sh.values[i * n_sh + k];
    }
    return f;
}

std::uint64_t config_hash(const nlohmann::json& config) { return spectra::fnv1a64(config.dump()); }

}  // namespace nirsplat::io
