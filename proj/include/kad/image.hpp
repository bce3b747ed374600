#pragma once

// Minimal lossless raster I/O: binary PPM (P6) for RGB scenes, PGM (P5) for
// grayscale heatmap exports. Images in memory are float tensors [3,H,W] in
// [0,1]; writes are deterministic byte-for-byte.

#include "kad/tensor.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace kad {

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline unsigned char to_byte(float v) {
  const float c = std::min(std::max(v, 0.0f), 1.0f);
  return static_cast<unsigned char>(c * 255.0f + 0.5f);
}

// Skips whitespace and '#' comments between PNM header tokens.
inline int read_pnm_int(std::istream& in, const std::string& origin) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = 0;
  if (!(in >> v)) throw ImageError("malformed PNM header: " + origin);
  return v;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 3) {
    throw ImageError("write_ppm: expected [3,H,W] tensor, got " + image.shape_str());
  }
  const int h = s[1], w = s[2];
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(h) * w * 3 + 32);
  bytes += "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        bytes.push_back(static_cast<char>(
            detail::to_byte(image[(static_cast<std::int64_t>(c) * h + y) * w + x])));
      }
    }
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageError("write_ppm: cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ImageError("write_ppm: write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("read_ppm: cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ImageError("read_ppm: not a binary PPM: " + path.string());
  const int w = detail::read_pnm_int(in, path.string());
  const int h = detail::read_pnm_int(in, path.string());
  const int maxval = detail::read_pnm_int(in, path.string());
  if (maxval != 255) throw ImageError("read_ppm: unsupported maxval: " + path.string());
  in.get();  // single whitespace after header
  std::string bytes(static_cast<std::size_t>(w) * h * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw ImageError("read_ppm: truncated pixel data: " + path.string());
  }
  Tensor<float> img({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const unsigned char b =
            static_cast<unsigned char>(bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
        img[(static_cast<std::int64_t>(c) * h + y) * w + x] = b / 255.0f;
      }
    }
  }
  return img;
}

// Grayscale export; values are scaled by the map maximum so the hot spot is
// white. Exact values live in the sidecar .f32 blob, not here.
template <typename T>
void write_pgm_normalized(const std::filesystem::path& path, const Tensor<T>& map) {
  if (map.ndim() != 2) throw ImageError("write_pgm: expected [H,W] tensor");
  const int h = map.shape()[0], w = map.shape()[1];
  T mx = T(0);
  for (std::int64_t i = 0; i < map.numel(); ++i) mx = std::max(mx, map[i]);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t i = 0; i < map.numel(); ++i) {
    const float v = mx > T(0) ? static_cast<float>(map[i] / mx) : 0.0f;
    bytes.push_back(static_cast<char>(detail::to_byte(v)));
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageError("write_pgm: cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace kad
