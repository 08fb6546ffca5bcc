#include "s2dit/io.hpp"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace s2dit {
namespace io {

void put_u8(std::vector<uint8_t>& buf, uint8_t v) { buf.push_back(v); }

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<uint8_t>& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<uint8_t>& buf, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

void put_f64(std::vector<uint8_t>& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(buf, bits);
}

void Reader::need(size_t n) const {
    if (pos + n > size) throw std::runtime_error("S2TN: truncated data");
}

uint8_t Reader::u8() {
    need(1);
    return data[pos++];
}

uint32_t Reader::u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[pos++]) << (8 * i);
    return v;
}

uint64_t Reader::u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data[pos++]) << (8 * i);
    return v;
}

float Reader::f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

double Reader::f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::vector<uint8_t> encode_s2tn(const Tensor& t) {
    std::vector<uint8_t> buf;
    buf.push_back('S');
    buf.push_back('2');
    buf.push_back('T');
    buf.push_back('N');
    put_u8(buf, 1);
    put_u8(buf, static_cast<uint8_t>(t.dtype));
    put_u32(buf, static_cast<uint32_t>(t.rank()));
    for (size_t d : t.shape) put_u64(buf, d);
    if (t.dtype == Dtype::f32) {
        for (size_t i = 0; i < t.numel(); ++i) put_f32(buf, static_cast<float>(t.at(i)));
    } else {
        for (size_t i = 0; i < t.numel(); ++i) put_f64(buf, t.at(i));
    }
    return buf;
}

Tensor decode_s2tn(const uint8_t* data, size_t size, size_t* consumed) {
    Reader r{data, size};
    r.need(4);
    if (std::memcmp(data, "S2TN", 4) != 0) throw std::runtime_error("S2TN: bad magic");
    r.pos = 4;
    const uint8_t version = r.u8();
    if (version != 1) throw std::runtime_error("S2TN: unsupported version " + std::to_string(version));
    const uint8_t dt = r.u8();
    if (dt > 1) throw std::runtime_error("S2TN: bad dtype tag");
    const uint32_t rank = r.u32();
    std::vector<size_t> shape(rank);
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<size_t>(r.u64());
        if (shape[i] == 0 || (n > 0 && shape[i] > (1ull << 40) / std::max<size_t>(n, 1)))
            throw std::runtime_error("S2TN: implausible dims");
        n *= shape[i];
    }
    Tensor t = Tensor::zeros(shape, static_cast<Dtype>(dt));
    if (t.dtype == Dtype::f32) {
        for (size_t i = 0; i < n; ++i) t.at(i) = static_cast<double>(r.f32());
    } else {
        for (size_t i = 0; i < n; ++i) t.at(i) = r.f64();
    }
    if (consumed) *consumed = r.pos;
    return t;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open: " + path);
    const auto size = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw std::runtime_error("read failed: " + path);
    return bytes;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << text;
}

std::string read_text(const std::string& path) {
    auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

void save_s2tn(const std::string& path, const Tensor& t) { write_file(path, encode_s2tn(t)); }

Tensor load_s2tn(const std::string& path) {
    auto bytes = read_file(path);
    return decode_s2tn(bytes.data(), bytes.size());
}

void save_checkpoint(const std::string& dir, const NamedParams& params) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "s2dit-checkpoint";
    manifest["tensors"] = nlohmann::json::object();
    size_t idx = 0;
    for (const auto& [name, t] : params.items) {
        char fname[32];
        std::snprintf(fname, sizeof(fname), "t%05zu.s2tn", idx++);
        save_s2tn(dir + "/" + fname, t);
        manifest["tensors"][name] = fname;
    }
    write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

void load_checkpoint(const std::string& dir, NamedParams& params) {
    nlohmann::json manifest = nlohmann::json::parse(read_text(dir + "/manifest.json"));
    const auto& tensors = manifest.at("tensors");
    for (auto& [name, t] : params.items) {
        if (!tensors.contains(name)) {
            throw std::runtime_error("checkpoint missing tensor '" + name + "'");
        }
        Tensor loaded = load_s2tn(dir + "/" + tensors.at(name).get<std::string>());
        if (loaded.shape != t.shape) {
            throw std::runtime_error("checkpoint shape mismatch for '" + name + "': " +
                                     shape_str(loaded.shape) + " vs " + shape_str(t.shape));
        }
        *t.data = *loaded.data;
    }
}

uint64_t fnv1a(const void* data, size_t size) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a_str(const std::string& s) { return fnv1a(s.data(), s.size()); }

size_t thread_cap() {
    if (const char* env = std::getenv("S2DIT_THREADS")) {
        const long v = std::atol(env);
        if (v > 0) return static_cast<size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<size_t>(hw);
}

}  // namespace io
}  // namespace s2dit
