#pragma once

// Dataset loading, ZCA whitening and the packaged-dataset file format.
//
// Raw record layout (CIFAR-10 and the converted SVHN files):
//   u8 label | 3072 u8 pixels (1024 R, 1024 G, 1024 B, rows top to bottom)
// CIFAR-100 records carry a coarse label byte before the fine label byte.
//
// Packaged dataset ("ATTNDS01"):
//   magic[8] | u32 version | str name | str preprocessing | f64 epsilon |
//   u32 classes | u32 n_train | u32 n_test | u32 C | u32 H | u32 W |
//   u64 payload_bytes | u32 crc32(payload) | payload
//   payload = train f32[n_train*C*H*W] | train u16[n_train] | test f32[...] | test u16[n_test]
// Strings are u16-length-prefixed; everything little-endian.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lpa/binary_io.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

enum class DatasetName { cifar10, cifar100, svhn };

inline const char* to_string(DatasetName d) {
  switch (d) {
    case DatasetName::cifar10: return "cifar10";
    case DatasetName::cifar100: return "cifar100";
    case DatasetName::svhn: return "svhn";
  }
  return "?";
}

inline DatasetName parse_dataset_name(std::string_view s) {
  if (s == "cifar10") return DatasetName::cifar10;
  if (s == "cifar100") return DatasetName::cifar100;
  if (s == "svhn") return DatasetName::svhn;
  throw UsageError("unknown dataset '" + std::string(s) + "' (valid: cifar10, cifar100, svhn)");
}

inline std::size_t class_count(DatasetName d) { return d == DatasetName::cifar100 ? 100 : 10; }

inline constexpr std::size_t kPixelsPerImage = 3 * 32 * 32;

struct DatasetBundle {
  DatasetName name = DatasetName::cifar10;
  Tensor<float> train_images;
  std::vector<int> train_labels;
  Tensor<float> test_images;
  std::vector<int> test_labels;

  std::size_t num_classes() const { return class_count(name); }
};

struct LabeledImages {
  Tensor<float> images;
  std::vector<int> labels;
};

/// Parses a whole raw record file. `label_bytes` is 1 (CIFAR-10, SVHN) or 2
/// (CIFAR-100, fine label second).
inline LabeledImages parse_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes,
                                   std::size_t num_classes, const std::string& context) {
  const std::size_t record = label_bytes + kPixelsPerImage;
  if (bytes.empty()) throw FormatError(context + ": file is empty");
  if (bytes.size() % record != 0)
    throw FormatError(context + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(record) + "-byte record size");
  const std::size_t n = bytes.size() / record;
  LabeledImages out{Tensor<float>({n, 3, 32, 32}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const int label = rec[label_bytes - 1];
    if (static_cast<std::size_t>(label) >= num_classes)
      throw FormatError(context + ": record " + std::to_string(i) + " has label " + std::to_string(label) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    out.labels[i] = label;
    float* img = out.images.data() + i * kPixelsPerImage;
    for (std::size_t p = 0; p < kPixelsPerImage; ++p) img[p] = static_cast<float>(rec[label_bytes + p]) / 255.0f;
  }
  return out;
}

namespace detail {

inline LabeledImages load_record_files(const std::filesystem::path& dir, const std::vector<std::string>& files,
                                       std::size_t label_bytes, std::size_t num_classes) {
  std::vector<LabeledImages> parts;
  std::size_t total = 0;
  for (const std::string& f : files) {
    const std::filesystem::path path = dir / f;
    if (!std::filesystem::is_regular_file(path)) throw InputError("missing dataset file '" + path.string() + "'");
    parts.push_back(parse_records(read_file(path), label_bytes, num_classes, path.string()));
    total += parts.back().labels.size();
  }
  if (parts.size() == 1) return std::move(parts.front());
  LabeledImages out{Tensor<float>({total, 3, 32, 32}), {}};
  float* dst = out.images.data();
  for (const LabeledImages& p : parts) {
    dst = std::copy(p.images.data(), p.images.data() + p.images.size(), dst);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace detail

/// Standard CIFAR binary distribution (cifar-10-batches-bin / cifar-100-binary).
inline DatasetBundle load_cifar(int variant, const std::filesystem::path& raw_dir) {
  if (variant != 10 && variant != 100) throw UsageError("CIFAR variant must be 10 or 100");
  if (!std::filesystem::is_directory(raw_dir)) throw InputError("dataset directory '" + raw_dir.string() + "' not found");
  DatasetBundle b;
  b.name = variant == 10 ? DatasetName::cifar10 : DatasetName::cifar100;
  const std::size_t label_bytes = variant == 10 ? 1 : 2;
  const std::vector<std::string> train_files =
      variant == 10 ? std::vector<std::string>{"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                               "data_batch_4.bin", "data_batch_5.bin"}
                    : std::vector<std::string>{"train.bin"};
  const std::string test_file = variant == 10 ? "test_batch.bin" : "test.bin";
  auto train = detail::load_record_files(raw_dir, train_files, label_bytes, b.num_classes());
  auto test = detail::load_record_files(raw_dir, {test_file}, label_bytes, b.num_classes());
  b.train_images = std::move(train.images);
  b.train_labels = std::move(train.labels);
  b.test_images = std::move(test.images);
  b.test_labels = std::move(test.labels);
  return b;
}

/// SVHN converted to CIFAR-10 records in train.bin / test.bin, labels 0..9.
inline DatasetBundle load_svhn(const std::filesystem::path& raw_dir) {
  if (!std::filesystem::is_directory(raw_dir)) throw InputError("dataset directory '" + raw_dir.string() + "' not found");
  DatasetBundle b;
  b.name = DatasetName::svhn;
  auto train = detail::load_record_files(raw_dir, {"train.bin"}, 1, 10);
  auto test = detail::load_record_files(raw_dir, {"test.bin"}, 1, 10);
  b.train_images = std::move(train.images);
  b.train_labels = std::move(train.labels);
  b.test_images = std::move(test.images);
  b.test_labels = std::move(test.labels);
  return b;
}

// ---------------------------------------------------------------------------
// ZCA whitening

inline constexpr double kDefaultZcaEpsilon = 1e-5;

/// Per-component mean and whitening matrix W = U (L + eps I)^(-1/2) U^T.
struct ZcaStats {
  std::size_t dim = 0;
  double epsilon = kDefaultZcaEpsilon;
  std::vector<double> mean;
  /// dim x dim, row-major, symmetric
  std::vector<double> whitening;
  /// covariance eigenvalues after clamping at zero, ascending
  std::vector<double> eigenvalues;
};

namespace detail {

using MatrixXdRow = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline MatrixXdRow flatten_rows(const Tensor<float>& images) {
  const std::size_t n = images.dim(0), d = images.size() / n;
  return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(images.data(), n, d)
      .cast<double>();
}

}  // namespace detail

inline ZcaStats compute_zca(const Tensor<float>& train_images, double epsilon = kDefaultZcaEpsilon) {
  if (train_images.rank() < 2 || train_images.dim(0) < 2) throw UsageError("compute_zca: need at least 2 images");
  if (!(epsilon > 0)) throw UsageError("compute_zca: epsilon must be positive");
  if (!train_images.all_finite()) throw NumericError("compute_zca: non-finite pixel values");
  const std::size_t n = train_images.dim(0), d = train_images.size() / n;

  detail::MatrixXdRow x = detail::flatten_rows(train_images);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const double inv_n = 1.0 / static_cast<double>(n);
  auto scale_of = [epsilon](double l) { return 1.0 / std::sqrt(l + epsilon); };

  ZcaStats stats;
  stats.dim = d;
  stats.epsilon = epsilon;
  stats.mean.assign(mu.data(), mu.data() + d);
  stats.eigenvalues.assign(d, 0.0);
  Eigen::MatrixXd w;
  if (n < d) {
    // Fewer images than components: the covariance has rank < n. Its nonzero
    // eigenpairs come from the n x n Gram matrix, u = X^T v / sqrt(n lambda),
    // and every direction orthogonal to them is scaled by eps^(-1/2).
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(x, inv_n);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram.selfadjointView<Eigen::Lower>());
    if (es.info() != Eigen::Success) throw NumericError("compute_zca: eigendecomposition failed");
    const Eigen::VectorXd& lambda = es.eigenvalues();
    const double cutoff = std::max(lambda.maxCoeff(), 0.0) * static_cast<double>(d) * 1e-15;
    std::vector<Eigen::Index> kept;
    for (Eigen::Index k = 0; k < lambda.size(); ++k)
      if (lambda[k] > cutoff) kept.push_back(k);
    Eigen::MatrixXd u(d, kept.size());
    Eigen::VectorXd shift(kept.size());
    for (std::size_t j = 0; j < kept.size(); ++j) {
      const double l = lambda[kept[j]];
      u.col(j) = x.transpose() * es.eigenvectors().col(kept[j]) / std::sqrt(l / inv_n);
      shift[j] = scale_of(l) - scale_of(0.0);
      stats.eigenvalues[d - kept.size() + j] = l;
    }
    w = (u * shift.asDiagonal()) * u.transpose();
    w.diagonal().array() += scale_of(0.0);
  } else {
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    cov.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), inv_n);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov.selfadjointView<Eigen::Lower>());
    if (es.info() != Eigen::Success) throw NumericError("compute_zca: eigendecomposition failed");
    Eigen::VectorXd scale(d);
    for (std::size_t i = 0; i < d; ++i) {
      stats.eigenvalues[i] = std::max(es.eigenvalues()[i], 0.0);
      scale[i] = scale_of(stats.eigenvalues[i]);
    }
    w = (es.eigenvectors() * scale.asDiagonal()) * es.eigenvectors().transpose();
  }
  w = 0.5 * (w + w.transpose()).eval();
  if (!w.allFinite()) throw NumericError("compute_zca: whitening matrix is not finite");
  stats.whitening.resize(d * d);
  Eigen::Map<detail::MatrixXdRow>(stats.whitening.data(), d, d) = w;
  return stats;
}

/// rows <- (flatten(image) - mean) W
inline Tensor<float> apply_zca(const Tensor<float>& images, const ZcaStats& stats) {
  if (images.rank() < 2 || images.size() / images.dim(0) != stats.dim)
    throw InputError("apply_zca: image size " + shape_string(images.shape()) + " does not match whitening dimension " +
                     std::to_string(stats.dim));
  const std::size_t n = images.dim(0), d = stats.dim;
  Eigen::Map<const detail::MatrixXdRow> w(stats.whitening.data(), d, d);
  Eigen::Map<const Eigen::RowVectorXd> mu(stats.mean.data(), d);
  Tensor<float> out(images.shape());
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t rows = std::min(kChunk, n - start);
    detail::MatrixXdRow x =
        Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(images.data() + start * d,
                                                                                                rows, d)
            .cast<double>();
    x.rowwise() -= mu;
    detail::MatrixXdRow y = x * w;
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data() + start * d, rows, d) =
        y.cast<float>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Packaging

inline constexpr std::array<char, 8> kPackageMagic{'A', 'T', 'T', 'N', 'D', 'S', '0', '1'};
inline constexpr std::uint32_t kPackageVersion = 1;

struct PackagedDataset {
  DatasetBundle bundle;
  /// "zca" or "none"
  std::string preprocessing = "none";
  double epsilon = 0.0;
};

/// CIFAR variants are ZCA-whitened with training statistics; SVHN passes through untouched.
inline PackagedDataset preprocess(DatasetBundle bundle, double epsilon = kDefaultZcaEpsilon) {
  PackagedDataset pkg;
  if (bundle.name == DatasetName::svhn) {
    pkg.preprocessing = "none";
    pkg.epsilon = 0.0;
  } else {
    const ZcaStats stats = compute_zca(bundle.train_images, epsilon);
    bundle.train_images = apply_zca(bundle.train_images, stats);
    bundle.test_images = apply_zca(bundle.test_images, stats);
    pkg.preprocessing = "zca";
    pkg.epsilon = epsilon;
  }
  pkg.bundle = std::move(bundle);
  return pkg;
}

namespace detail {

inline void put_split(ByteWriter& w, const Tensor<float>& images, const std::vector<int>& labels) {
  w.put_array(images.values());
  for (int l : labels) w.put(static_cast<std::uint16_t>(l));
}

inline void get_split(ByteReader& r, Tensor<float>& images, std::vector<int>& labels, std::size_t n,
                      std::size_t num_classes) {
  r.get_array(images.values());
  labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = r.get<std::uint16_t>();
    if (l >= num_classes) throw FormatError("package: label " + std::to_string(l) + " out of range");
    labels[i] = l;
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_package(const PackagedDataset& pkg) {
  const DatasetBundle& b = pkg.bundle;
  if (b.train_labels.size() != b.train_images.dim(0) || b.test_labels.size() != b.test_images.dim(0))
    throw ConfigError("package: label count does not match image count");
  if (b.train_images.shape() != Shape{b.train_images.dim(0), 3, 32, 32} ||
      b.test_images.shape() != Shape{b.test_images.dim(0), 3, 32, 32})
    throw ConfigError("package: images must be [N,3,32,32]");
  ByteWriter payload;
  detail::put_split(payload, b.train_images, b.train_labels);
  detail::put_split(payload, b.test_images, b.test_labels);

  ByteWriter w;
  for (char c : kPackageMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kPackageVersion);
  w.put_string(to_string(b.name));
  w.put_string(pkg.preprocessing);
  w.put(pkg.epsilon);
  w.put(static_cast<std::uint32_t>(b.num_classes()));
  w.put(static_cast<std::uint32_t>(b.train_labels.size()));
  w.put(static_cast<std::uint32_t>(b.test_labels.size()));
  for (std::uint32_t e : {3u, 32u, 32u}) w.put(e);
  w.put(static_cast<std::uint64_t>(payload.bytes().size()));
  w.put(crc32_of(payload.bytes()));
  w.put_bytes(payload.bytes());
  return std::move(w.bytes());
}

inline PackagedDataset deserialize_package(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "package");
  auto magic = r.get_bytes(kPackageMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kPackageMagic.begin())) throw MagicError("package: bad magic bytes");
  const auto version = r.get<std::uint32_t>();
  if (version != kPackageVersion) throw VersionError("package: unsupported format version " + std::to_string(version));

  PackagedDataset pkg;
  const std::string name = r.get_string();
  if (name != "cifar10" && name != "cifar100" && name != "svhn")
    throw FormatError("package: unknown dataset name '" + name + "'");
  pkg.bundle.name = parse_dataset_name(name);
  pkg.preprocessing = r.get_string();
  if (pkg.preprocessing != "zca" && pkg.preprocessing != "none")
    throw FormatError("package: unknown preprocessing tag '" + pkg.preprocessing + "'");
  pkg.epsilon = r.get<double>();
  const auto classes = r.get<std::uint32_t>();
  if (classes != pkg.bundle.num_classes())
    throw FormatError("package: class count " + std::to_string(classes) + " does not match dataset " + name);
  const std::uint64_t n_train = r.get<std::uint32_t>();
  const std::uint64_t n_test = r.get<std::uint32_t>();
  for (std::uint32_t want : {3u, 32u, 32u})
    if (r.get<std::uint32_t>() != want) throw FormatError("package: image shape must be 3x32x32");
  const auto payload_bytes = r.get<std::uint64_t>();
  const auto crc = r.get<std::uint32_t>();
  if (n_train == 0 || n_test == 0) throw FormatError("package: empty split");
  const std::uint64_t expected = (n_train + n_test) * (kPixelsPerImage * 4 + 2);
  if (payload_bytes != expected || r.remaining() != payload_bytes)
    throw FormatError("package: payload is " + std::to_string(r.remaining()) + " bytes, header declares " +
                      std::to_string(payload_bytes) + ", shapes imply " + std::to_string(expected));
  if (crc32_of(r.rest()) != crc) throw ChecksumError("package: payload checksum mismatch");

  DatasetBundle& b = pkg.bundle;
  b.train_images = Tensor<float>({n_train, 3, 32, 32});
  b.test_images = Tensor<float>({n_test, 3, 32, 32});
  detail::get_split(r, b.train_images, b.train_labels, n_train, classes);
  detail::get_split(r, b.test_images, b.test_labels, n_test, classes);
  if (!b.train_images.all_finite() || !b.test_images.all_finite())
    throw FormatError("package: non-finite pixel values");
  return pkg;
}

inline void save_package(const std::filesystem::path& path, const PackagedDataset& pkg) {
  write_file(path, serialize_package(pkg));
}

inline PackagedDataset load_package(const std::filesystem::path& path) { return deserialize_package(read_file(path)); }

}  // namespace lpa
