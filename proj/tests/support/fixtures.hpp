#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "lpa/data.hpp"
#include "lpa/tensor.hpp"

namespace lpa::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(shape);
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(shape);
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  const auto path = std::filesystem::temp_directory_path() /
                    ("lpa_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path);
  std::filesystem::create_directories(path);
  return path;
}

struct RawRecord {
  std::vector<std::uint8_t> labels;  // 1 or 2 bytes
  std::vector<std::uint8_t> pixels;  // 3072 planar bytes
};

inline std::vector<std::uint8_t> encode_records(const std::vector<RawRecord>& records) {
  std::vector<std::uint8_t> bytes;
  for (const RawRecord& r : records) {
    bytes.insert(bytes.end(), r.labels.begin(), r.labels.end());
    bytes.insert(bytes.end(), r.pixels.begin(), r.pixels.end());
  }
  return bytes;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<RawRecord> random_records(std::size_t n, std::size_t label_bytes, int num_classes,
                                             std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255), label(0, num_classes - 1);
  std::vector<RawRecord> out(n);
  for (RawRecord& r : out) {
    for (std::size_t i = 0; i + 1 < label_bytes; ++i) r.labels.push_back(static_cast<std::uint8_t>(label(rng) % 20));
    r.labels.push_back(static_cast<std::uint8_t>(label(rng)));
    r.pixels.resize(kPixelsPerImage);
    for (auto& p : r.pixels) p = static_cast<std::uint8_t>(byte(rng));
  }
  return out;
}

/// Smooth, spatially correlated 8-bit images: a few random low-frequency
/// cosines per channel plus pixel noise. Used where real photographs would be.
inline std::vector<RawRecord> natural_like_records(std::size_t n, int num_classes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 6.0);
  std::uniform_int_distribution<int> label(0, num_classes - 1);
  std::vector<RawRecord> out(n);
  for (RawRecord& r : out) {
    r.labels = {static_cast<std::uint8_t>(label(rng))};
    r.pixels.resize(kPixelsPerImage);
    const double base = 60 + 120 * unit(rng);
    double fx[4], fy[4], ph[4], amp[4];
    for (int k = 0; k < 4; ++k) {
      fx[k] = 3.0 * unit(rng);
      fy[k] = 3.0 * unit(rng);
      ph[k] = 6.283 * unit(rng);
      amp[k] = 40 * unit(rng);
    }
    for (int c = 0; c < 3; ++c) {
      const double tint = 20 * (unit(rng) - 0.5);
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          double v = base + tint;
          for (int k = 0; k < 4; ++k) v += amp[k] * std::cos(6.283 * (fx[k] * x + fy[k] * y) / 32.0 + ph[k] + 0.3 * c);
          v += noise(rng);
          r.pixels[c * 1024 + y * 32 + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
  }
  return out;
}

/// Random-image, random-label bundle for training tests. Test split mirrors train.
inline DatasetBundle random_bundle(std::size_t n, std::uint64_t seed, DatasetName name = DatasetName::cifar10) {
  std::mt19937_64 rng(seed);
  DatasetBundle b;
  b.name = name;
  b.train_images = normal_tensor<float>({n, 3, 32, 32}, rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(class_count(name)) - 1);
  for (std::size_t i = 0; i < n; ++i) b.train_labels.push_back(label(rng));
  b.test_images = b.train_images;
  b.test_labels = b.train_labels;
  return b;
}

}  // namespace lpa::testing
