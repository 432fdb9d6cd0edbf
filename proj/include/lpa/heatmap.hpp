#pragma once

// Attention heatmaps: bilinear upsampling, min-max normalization to 8-bit and
// binary PGM (P5) / PPM (P6) encoding.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lpa/binary_io.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Interleaved RGB.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Half-pixel-centred bilinear resampling with edge clamping.
template <typename T>
std::vector<double> bilinear_upsample(std::span<const T> grid, std::size_t h, std::size_t w, std::size_t out_h,
                                      std::size_t out_w) {
  if (grid.size() != h * w) throw ConfigError("bilinear_upsample: grid has " + std::to_string(grid.size()) +
                                              " values, expected " + std::to_string(h * w));
  auto axis = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& t) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    t = src - static_cast<double>(i0);
  };
  std::vector<double> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ty;
    axis(y, h, out_h, y0, y1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double tx;
      axis(x, w, out_w, x0, x1, tx);
      const double top = (1 - tx) * grid[y0 * w + x0] + tx * grid[y0 * w + x1];
      const double bottom = (1 - tx) * grid[y1 * w + x0] + tx * grid[y1 * w + x1];
      out[y * out_w + x] = (1 - ty) * top + ty * bottom;
    }
  }
  return out;
}

inline constexpr std::uint8_t kConstantMapGray = 128;

/// Upsamples an (h,w) attention grid to size x size and maps min->0, max->255.
/// A grid whose values are all equal (relative spread <= 1e-6) renders as 128.
template <typename T>
GrayImage render_heatmap(std::span<const T> attention, std::size_t h, std::size_t w, std::size_t size = 32) {
  if (attention.empty() || attention.size() != h * w)
    throw ConfigError("render_heatmap: " + std::to_string(attention.size()) + " values for a " + std::to_string(h) +
                      "x" + std::to_string(w) + " grid");
  GrayImage img{size, size, std::vector<std::uint8_t>(size * size, kConstantMapGray)};
  const auto [lo_it, hi_it] = std::minmax_element(attention.begin(), attention.end());
  const double src_lo = *lo_it, src_hi = *hi_it;
  if (src_hi - src_lo <= 1e-6 * std::max(std::abs(src_lo), std::abs(src_hi))) return img;

  const std::vector<double> up = bilinear_upsample(attention, h, w, size, size);
  const auto [lo, hi] = std::minmax_element(up.begin(), up.end());
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < up.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (up[i] - *lo) / range));
  return img;
}

/// Pixelwise mean of equally sized heatmaps.
inline GrayImage average_heatmaps(std::span<const GrayImage> maps) {
  if (maps.empty()) throw ConfigError("average_heatmaps: no maps");
  GrayImage out{maps[0].width, maps[0].height, std::vector<std::uint8_t>(maps[0].pixels.size())};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    unsigned total = 0;
    for (const GrayImage& m : maps) total += m.pixels.at(i);
    out.pixels[i] = static_cast<std::uint8_t>((2 * total + maps.size()) / (2 * maps.size()));
  }
  return out;
}

/// Converts a planar [3,H,W] image to 8-bit RGB. Values already in [0,1] are
/// scaled by 255; anything else (whitened data) is min-max stretched.
inline RgbImage to_rgb(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InputError("to_rgb: image must be [3,H,W]");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  const auto [lo, hi] = std::minmax_element(image.values().begin(), image.values().end());
  const bool unit = *lo >= 0.0f && *hi <= 1.0f;
  const double offset = unit ? 0.0 : *lo;
  const double span = unit ? 1.0 : std::max(static_cast<double>(*hi - *lo), 1e-12);
  RgbImage out{w, h, std::vector<std::uint8_t>(3 * plane)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      out.pixels[3 * p + c] = static_cast<std::uint8_t>(std::lround(255.0 * (image[c * plane + p] - offset) / span));
  return out;
}

/// 50% blend of a heatmap over an RGB image.
inline RgbImage overlay(const GrayImage& heat, const RgbImage& base) {
  if (heat.width != base.width || heat.height != base.height) throw ConfigError("overlay: size mismatch");
  RgbImage out = base;
  for (std::size_t p = 0; p < heat.pixels.size(); ++p)
    for (std::size_t c = 0; c < 3; ++c)
      out.pixels[3 * p + c] = static_cast<std::uint8_t>((heat.pixels[p] + base.pixels[3 * p + c] + 1) / 2);
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> netpbm_bytes(const char* magic, std::size_t w, std::size_t h,
                                              std::span<const std::uint8_t> pixels) {
  const std::string header = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  return bytes;
}

/// Parses a binary netpbm header; returns the pixel bytes.
inline std::span<const std::uint8_t> parse_netpbm(std::span<const std::uint8_t> bytes, const char* magic,
                                                  std::size_t channels, std::size_t& w, std::size_t& h) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 9) v = v * 10 + (bytes[pos++] - '0'), ++digits;
    if (digits == 0) throw FormatError(std::string(magic) + ": malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1])
    throw FormatError(std::string("expected a binary ") + magic + " image");
  pos = 2;
  w = number();
  h = number();
  const std::size_t maxval = number();
  if (maxval != 255) throw FormatError(std::string(magic) + ": only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(std::string(magic) + ": malformed header");
  ++pos;
  if (w == 0 || h == 0 || bytes.size() - pos != w * h * channels)
    throw FormatError(std::string(magic) + ": pixel data does not match " + std::to_string(w) + "x" + std::to_string(h));
  return bytes.subspan(pos);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  return detail::netpbm_bytes("P5", img.width, img.height, img.pixels);
}

inline std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  return detail::netpbm_bytes("P6", img.width, img.height, img.pixels);
}

inline GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  GrayImage img;
  auto px = detail::parse_netpbm(bytes, "P5", 1, img.width, img.height);
  img.pixels.assign(px.begin(), px.end());
  return img;
}

inline RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  RgbImage img;
  auto px = detail::parse_netpbm(bytes, "P6", 3, img.width, img.height);
  img.pixels.assign(px.begin(), px.end());
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) { write_file(path, encode_pgm(img)); }
inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) { write_file(path, encode_ppm(img)); }

/// Reads a 32x32 input image: binary PPM, or 3072 raw planar bytes (R, G, B
/// planes). Pixels are scaled to [0,1] and returned as [3,32,32].
inline Tensor<float> read_input_image(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  Tensor<float> out({3, 32, 32});
  if (bytes.size() == 3 * 32 * 32) {
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
    return out;
  }
  RgbImage rgb;
  try {
    rgb = decode_ppm(bytes);
  } catch (const FormatError& e) {
    throw InputError("'" + path.string() + "' is neither a 3072-byte raw image nor a binary PPM: " + e.what());
  }
  if (rgb.width != 32 || rgb.height != 32) throw InputError("'" + path.string() + "' must be 32x32");
  for (std::size_t p = 0; p < 1024; ++p)
    for (std::size_t c = 0; c < 3; ++c) out[c * 1024 + p] = static_cast<float>(rgb.pixels[3 * p + c]) / 255.0f;
  return out;
}

}  // namespace lpa
