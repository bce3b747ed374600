#pragma once

// The on-disk `.f32` blob: two little-endian uint32 (count, dim) followed by
// count*dim little-endian float32, row-major. Shared by the prior cache and
// the raw heatmap dumps; trivially parseable from any language.

#include "kad/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kad {

struct BlobError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_f32_blob(const Tensor<float>& matrix) {
  const std::uint32_t count = static_cast<std::uint32_t>(matrix.rows());
  const std::uint32_t dim = static_cast<std::uint32_t>(matrix.cols());
  std::string out;
  out.reserve(8 + static_cast<std::size_t>(count) * dim * 4);
  detail::put_u32_le(out, count);
  detail::put_u32_le(out, dim);
  for (std::int64_t i = 0; i < matrix.numel(); ++i) {
    std::uint32_t bits;
    float v = matrix[i];
    std::memcpy(&bits, &v, 4);
    detail::put_u32_le(out, bits);
  }
  return out;
}

inline Tensor<float> decode_f32_blob(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 8) {
    throw BlobError("incomplete blob (missing header): " + origin);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t count = detail::get_u32_le(p);
  const std::uint32_t dim = detail::get_u32_le(p + 4);
  const std::size_t expected = 8 + static_cast<std::size_t>(count) * dim * 4;
  if (bytes.size() != expected) {
    throw BlobError("blob size mismatch in " + origin + ": header says " +
                    std::to_string(expected) + " bytes, file has " +
                    std::to_string(bytes.size()));
  }
  Tensor<float> out({static_cast<int>(count), static_cast<int>(dim)});
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const std::uint32_t bits = detail::get_u32_le(p + 8 + 4 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    out[i] = v;
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BlobError("cannot open file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw BlobError("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw BlobError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_f32_blob(const std::filesystem::path& path, const Tensor<float>& matrix) {
  write_file_bytes(path, encode_f32_blob(matrix));
}

inline Tensor<float> read_f32_blob(const std::filesystem::path& path) {
  return decode_f32_blob(read_file_bytes(path), path.string());
}

}  // namespace kad
