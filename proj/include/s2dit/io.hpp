#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s2dit/optim.hpp"
#include "s2dit/tensor.hpp"

namespace s2dit {
namespace io {

// S2TN tensor file: magic "S2TN", u8 version=1, u8 dtype (0=f32, 1=f64),
// u32 rank, rank x u64 dims, little-endian payload.
std::vector<uint8_t> encode_s2tn(const Tensor& t);
Tensor decode_s2tn(const uint8_t* data, size_t size, size_t* consumed = nullptr);

void save_s2tn(const std::string& path, const Tensor& t);
Tensor load_s2tn(const std::string& path);

void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::string& path);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

// Checkpoint: a directory of S2TN tensors plus manifest.json (name -> file).
void save_checkpoint(const std::string& dir, const NamedParams& params);
void load_checkpoint(const std::string& dir, NamedParams& params);

uint64_t fnv1a(const void* data, size_t size);
uint64_t fnv1a_str(const std::string& s);

/// Worker-pool cap from S2DIT_THREADS (hardware concurrency otherwise).
size_t thread_cap();

// Little-endian scalar helpers shared by the binary formats.
void put_u8(std::vector<uint8_t>& buf, uint8_t v);
void put_u32(std::vector<uint8_t>& buf, uint32_t v);
void put_u64(std::vector<uint8_t>& buf, uint64_t v);
void put_f32(std::vector<uint8_t>& buf, float v);
void put_f64(std::vector<uint8_t>& buf, double v);

struct Reader {
    const uint8_t* data;
    size_t size;
    size_t pos = 0;

    uint8_t u8();
    uint32_t u32();
    uint64_t u64();
    float f32();
    double f64();
    void need(size_t n) const;
};

}  // namespace io
}  // namespace s2dit
