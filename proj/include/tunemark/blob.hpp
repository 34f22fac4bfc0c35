#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

// Binary tensor blob. Layout:
//   bytes  0..3   magic "TMRK"
//   bytes  4..7   rank, uint32 little-endian (1..4)
//   bytes  8..15  four uint16 little-endian dims; dims beyond rank are 0
//   bytes 16..    float32 little-endian payload, row-major
//
// The same container is used for model parameters, watermark deltas and
// detector weights, so every artifact on disk can be inspected with one
// reader.
inline constexpr char kBlobMagic[4] = {'T', 'M', 'R', 'K'};

namespace detail {
inline void put_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v & 0xFF));
  b.push_back(static_cast<uint8_t>(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}
}  // namespace detail

inline std::vector<uint8_t> encode_blob(const Tensor<float>& t) {
  require(t.rank() >= 1 && t.rank() <= 4, "blob rank must be 1..4");
  for (int i = 0; i < t.rank(); ++i) {
    require(t.dim(i) > 0 && t.dim(i) <= 0xFFFF, "blob dims must fit in uint16");
  }
  std::vector<uint8_t> out;
  out.reserve(16 + static_cast<size_t>(t.size()) * 4);
  out.insert(out.end(), kBlobMagic, kBlobMagic + 4);
  detail::put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < 4; ++i) {
    detail::put_u16(out, i < t.rank() ? static_cast<uint16_t>(t.dim(i)) : 0);
  }
  for (long i = 0; i < t.size(); ++i) {
    uint32_t bits;
    float v = t[i];
    std::memcpy(&bits, &v, 4);
    detail::put_u32(out, bits);
  }
  return out;
}

inline Tensor<float> decode_blob(const uint8_t* bytes, size_t n) {
  if (n < 16 || std::memcmp(bytes, kBlobMagic, 4) != 0) {
    throw data_error("tensor blob: bad magic or truncated header");
  }
  uint32_t rank = 0;
  for (int i = 0; i < 4; ++i) rank |= static_cast<uint32_t>(bytes[4 + i]) << (8 * i);
  if (rank < 1 || rank > 4) throw data_error("tensor blob: bad rank");
  std::vector<int> shape;
  long total = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint16_t d = static_cast<uint16_t>(bytes[8 + 2 * i] | (bytes[9 + 2 * i] << 8));
    if (d == 0) throw data_error("tensor blob: zero dim");
    shape.push_back(d);
    total *= d;
  }
  if (n != 16 + static_cast<size_t>(total) * 4) throw data_error("tensor blob: size mismatch");
  Tensor<float> t(shape);
  for (long i = 0; i < total; ++i) {
    uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<uint32_t>(bytes[16 + 4 * i + b]) << (8 * b);
    float v;
    std::memcpy(&v, &bits, 4);
    t[i] = v;
  }
  return t;
}

inline void write_blob(const std::string& path, const Tensor<float>& t) {
  const std::vector<uint8_t> bytes = encode_blob(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw data_error("cannot write blob: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw data_error("short write on blob: " + path);
}

inline Tensor<float> read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read blob: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_blob(bytes.data(), bytes.size());
}

}  // namespace tunemark
