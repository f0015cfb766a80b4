#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "regrasp/error.hpp"

namespace regrasp {

/// Interleaved row-major raster with a compile-time channel count.
template <typename T, int C>
struct Image {
  static constexpr int channels = C;
  using value_type = T;

  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h), data(std::size_t(w) * h * C, fill) {
    require(w >= 1 && h >= 1, Errc::InvalidArgument, "image dimensions must be positive");
  }

  bool empty() const { return data.empty(); }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::size_t index(int x, int y) const { return (std::size_t(y) * width + x) * C; }
  T* px(int x, int y) { return data.data() + index(x, y); }
  const T* px(int x, int y) const { return data.data() + index(x, y); }
  T& at(int x, int y, int c) { return data[index(x, y) + c]; }
  const T& at(int x, int y, int c) const { return data[index(x, y) + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

using Rgb8 = Image<std::uint8_t, 3>;
using RgbaF = Image<float, 4>;  ///< premultiplied alpha, channels in [0, 1]

using Color = std::array<std::uint8_t, 3>;

inline void set_pixel(Rgb8& img, int x, int y, Color c) {
  if (!img.contains(x, y)) return;
  auto* p = img.px(x, y);
  p[0] = c[0]; p[1] = c[1]; p[2] = c[2];
}

inline Color get_pixel(const Rgb8& img, int x, int y) {
  const auto* p = img.px(x, y);
  return {p[0], p[1], p[2]};
}

/// Bilinear downscale so that max(w, h) <= max_side; smaller images pass through.
inline Rgb8 fit_within(const Rgb8& src, int max_side) {
  if (std::max(src.width, src.height) <= max_side) return src;
  double f = double(max_side) / std::max(src.width, src.height);
  int w = std::max(1, int(std::lround(src.width * f)));
  int h = std::max(1, int(std::lround(src.height * f)));
  Rgb8 out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sx = (x + 0.5) / f - 0.5, sy = (y + 0.5) / f - 0.5;
      int x0 = std::clamp(int(std::floor(sx)), 0, src.width - 1);
      int y0 = std::clamp(int(std::floor(sy)), 0, src.height - 1);
      int x1 = std::min(x0 + 1, src.width - 1), y1 = std::min(y0 + 1, src.height - 1);
      double fx = std::clamp(sx - x0, 0.0, 1.0), fy = std::clamp(sy - y0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double v = (1 - fx) * (1 - fy) * src.at(x0, y0, c) + fx * (1 - fy) * src.at(x1, y0, c) +
                   (1 - fx) * fy * src.at(x0, y1, c) + fx * fy * src.at(x1, y1, c);
        out.at(x, y, c) = std::uint8_t(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

// ---- PNG via libpng's simplified API ----

inline std::vector<std::uint8_t> encode_png(const Rgb8& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = img.width;
  pi.height = img.height;
  pi.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, img.data.data(), 0, nullptr))
    fail(Errc::IoError, std::string("png size query failed: ") + pi.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, img.data.data(), 0, nullptr))
    fail(Errc::IoError, std::string("png encode failed: ") + pi.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::filesystem::path& path, const Rgb8& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = img.width;
  pi.height = img.height;
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.data.data(), 0, nullptr))
    fail(Errc::IoError, "cannot write " + path.string() + ": " + pi.message);
}

inline Rgb8 read_png(const std::filesystem::path& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    fail(Errc::IoError, "cannot read " + path.string() + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Rgb8 img(int(pi.width), int(pi.height));
  if (!png_image_finish_read(&pi, nullptr, img.data.data(), 0, nullptr))
    fail(Errc::IoError, "cannot decode " + path.string() + ": " + pi.message);
  return img;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += tbl[v >> 18]; out += tbl[(v >> 12) & 63]; out += tbl[(v >> 6) & 63]; out += tbl[v & 63];
  }
  if (i + 1 == bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    out += tbl[v >> 18]; out += tbl[(v >> 12) & 63]; out += "==";
  } else if (i + 2 == bytes.size()) {
    std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += tbl[v >> 18]; out += tbl[(v >> 12) & 63]; out += tbl[(v >> 6) & 63]; out += '=';
  }
  return out;
}

}  // namespace regrasp
