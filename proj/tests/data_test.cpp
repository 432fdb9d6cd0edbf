#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "lpa/data.hpp"
#include "support/fixtures.hpp"

namespace lpa {
namespace {

using testing::encode_records;
using testing::random_records;
using testing::RawRecord;
using testing::temp_dir;
using testing::write_bytes;

void expect_matches(const LabeledImages& got, const std::vector<RawRecord>& want, std::size_t offset = 0) {
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(got.labels[offset + i], want[i].labels.back());
    for (std::size_t p : {std::size_t{0}, std::size_t{1023}, std::size_t{1024}, std::size_t{3071}})
      EXPECT_EQ(got.images[(offset + i) * kPixelsPerImage + p], want[i].pixels[p] / 255.0f);
  }
}

TEST(RecordParseTest, DecodesPlanarPixelsAndLabels) {
  std::mt19937_64 rng(1);
  const auto recs = random_records(5, 1, 10, rng);
  const auto parsed = parse_records(encode_records(recs), 1, 10, "t");
  ASSERT_EQ(parsed.images.shape(), (Shape{5, 3, 32, 32}));
  expect_matches(parsed, recs);
  EXPECT_EQ(parsed.images.at(2, 1, 3, 4), recs[2].pixels[1024 + 3 * 32 + 4] / 255.0f);
}

TEST(RecordParseTest, FineLabelIsSecondByte) {
  RawRecord r{{19, 87}, std::vector<std::uint8_t>(kPixelsPerImage, 7)};
  EXPECT_EQ(parse_records(encode_records({r}), 2, 100, "t").labels[0], 87);
}

TEST(RecordParseTest, RejectsMalformedFiles) {
  std::mt19937_64 rng(2);
  const auto bytes = encode_records(random_records(3, 1, 10, rng));
  EXPECT_THROW(parse_records({}, 1, 10, "t"), FormatError);
  EXPECT_THROW(parse_records(std::span(bytes).first(bytes.size() - 1), 1, 10, "t"), FormatError);
  EXPECT_THROW(parse_records(std::span(bytes).first(3073 + 100), 1, 10, "t"), FormatError);
  auto bad = bytes;
  bad[3073] = 10;
  EXPECT_THROW(parse_records(bad, 1, 10, "svhn"), FormatError);
}

TEST(LoaderTest, Cifar10ConcatenatesBatches) {
  const auto dir = temp_dir("cifar10");
  std::mt19937_64 rng(3);
  std::vector<std::vector<RawRecord>> batches;
  for (int b = 1; b <= 5; ++b) {
    batches.push_back(random_records(2 + b % 2, 1, 10, rng));
    write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"), encode_records(batches.back()));
  }
  const auto test = random_records(4, 1, 10, rng);
  write_bytes(dir / "test_batch.bin", encode_records(test));

  const DatasetBundle b = load_cifar(10, dir);
  EXPECT_EQ(b.name, DatasetName::cifar10);
  std::size_t offset = 0;
  LabeledImages train{b.train_images, b.train_labels};
  for (const auto& batch : batches) {
    expect_matches(train, batch, offset);
    offset += batch.size();
  }
  EXPECT_EQ(b.train_labels.size(), offset);
  expect_matches({b.test_images, b.test_labels}, test);

  std::filesystem::remove(dir / "data_batch_3.bin");
  EXPECT_THROW(load_cifar(10, dir), InputError);
  std::filesystem::remove_all(dir);
}

TEST(LoaderTest, Cifar100AndSvhn) {
  const auto dir = temp_dir("c100");
  std::mt19937_64 rng(4);
  const auto train = random_records(6, 2, 100, rng), test = random_records(2, 2, 100, rng);
  write_bytes(dir / "train.bin", encode_records(train));
  write_bytes(dir / "test.bin", encode_records(test));
  const DatasetBundle c = load_cifar(100, dir);
  EXPECT_EQ(c.num_classes(), 100u);
  expect_matches({c.train_images, c.train_labels}, train);
  expect_matches({c.test_images, c.test_labels}, test);

  const auto sv = temp_dir("svhn");
  const auto strain = random_records(3, 1, 10, rng), stest = random_records(2, 1, 10, rng);
  write_bytes(sv / "train.bin", encode_records(strain));
  write_bytes(sv / "test.bin", encode_records(stest));
  const DatasetBundle s = load_svhn(sv);
  EXPECT_EQ(s.name, DatasetName::svhn);
  expect_matches({s.train_images, s.train_labels}, strain);

  auto bad = encode_records(strain);
  bad[0] = 10;
  write_bytes(sv / "train.bin", bad);
  EXPECT_THROW(load_svhn(sv), FormatError);
  write_bytes(sv / "train.bin", std::vector<std::uint8_t>(100, 0));
  EXPECT_THROW(load_svhn(sv), FormatError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(sv);
}

TEST(LoaderTest, MissingDirectory) {
  EXPECT_THROW(load_cifar(10, "/nonexistent/lpa"), InputError);
  EXPECT_THROW(load_svhn("/nonexistent/lpa"), InputError);
  EXPECT_THROW(load_cifar(7, "/tmp"), UsageError);
  EXPECT_THROW(parse_dataset_name("mnist"), UsageError);
}

// ZCA oracles work on small generic dimensions: images are [N, d] tensors.

Tensor<float> rows_tensor(const Eigen::MatrixXd& x) {
  Tensor<float> t({static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols())});
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) t[i * x.cols() + j] = static_cast<float>(x(i, j));
  return t;
}

Eigen::MatrixXd whitening_of(const ZcaStats& s) {
  Eigen::MatrixXd w(s.dim, s.dim);
  for (std::size_t i = 0; i < s.dim; ++i)
    for (std::size_t j = 0; j < s.dim; ++j) w(i, j) = s.whitening[i * s.dim + j];
  return w;
}

// Textbook covariance, one sample at a time.
Eigen::MatrixXd naive_covariance(const Tensor<float>& t) {
  const std::size_t n = t.dim(0), d = t.size() / n;
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += t[i * d + j] / static_cast<double>(n);
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = t[i * d + j] - mu[j];
    c += v * v.transpose() / static_cast<double>(n);
  }
  return c;
}

TEST(ZcaTest, IdentityCovariance) {
  const int d = 6;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2 * d, d);
  for (int i = 0; i < d; ++i) {
    x(2 * i, i) = std::sqrt(static_cast<double>(d));
    x(2 * i + 1, i) = -std::sqrt(static_cast<double>(d));
  }
  const double eps = 1e-5;
  const ZcaStats s = compute_zca(rows_tensor(x), eps);
  EXPECT_TRUE(whitening_of(s).isApprox(Eigen::MatrixXd::Identity(d, d) / std::sqrt(1 + eps), 1e-6));
}

TEST(ZcaTest, LargeEpsilonShrinksToScaledIdentity) {
  std::mt19937_64 rng(5);
  const auto t = testing::normal_tensor<float>({40, 8}, rng);
  const double eps = 1e8;
  const Eigen::MatrixXd w = whitening_of(compute_zca(t, eps));
  EXPECT_LT((w - Eigen::MatrixXd::Identity(8, 8) / std::sqrt(eps)).cwiseAbs().maxCoeff(), 1e-7 / std::sqrt(eps));
}

TEST(ZcaTest, WhiteningInvertsRegularizedCovariance) {
  std::mt19937_64 rng(6);
  const int d = 24, n = 500;
  Eigen::MatrixXd mix = Eigen::MatrixXd::Random(d, d);
  std::normal_distribution<double> g;
  Eigen::MatrixXd z(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) z(i, j) = g(rng);
  const Tensor<float> t = rows_tensor(z * mix + Eigen::MatrixXd::Constant(n, d, 3.0));
  const double eps = 1e-3;
  const ZcaStats s = compute_zca(t, eps);
  const Eigen::MatrixXd w = whitening_of(s), c = naive_covariance(t);

  EXPECT_LT((w - w.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::MatrixXd reg = c + eps * Eigen::MatrixXd::Identity(d, d);
  EXPECT_LT((w * reg * w - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-6);

  const Tensor<float> y = apply_zca(t, s);
  const Eigen::MatrixXd cy = naive_covariance(y);
  const Eigen::MatrixXd expected = w * c * w;
  EXPECT_LT((cy - expected).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_NEAR(cy.diagonal().mean(), 1.0, 0.01);

  // Inverse reconstruction: x = y W^-1 + mean.
  const Eigen::MatrixXd winv = w.inverse();
  for (int i : {0, 17, 499}) {
    Eigen::RowVectorXd yi(d);
    for (int j = 0; j < d; ++j) yi[j] = y[i * d + j];
    const Eigen::RowVectorXd back = yi * winv;
    for (int j = 0; j < d; ++j) EXPECT_NEAR(back[j] + s.mean[j], t[i * d + j], 1e-3);
  }

  Tensor<float> mean_row({1, static_cast<std::size_t>(d)});
  for (int j = 0; j < d; ++j) mean_row[j] = static_cast<float>(s.mean[j]);
  const Tensor<float> centred = apply_zca(mean_row, s);
  for (float v : centred.values()) EXPECT_NEAR(v, 0.0f, 1e-4);
}

TEST(ZcaTest, FewerImagesThanComponents) {
  std::mt19937_64 rng(12);
  const std::size_t d = 60, n = 20;
  const auto t = testing::normal_tensor<float>({n, d}, rng);
  const double eps = 1e-2;
  const ZcaStats s = compute_zca(t, eps);
  const Eigen::MatrixXd w = whitening_of(s), c = naive_covariance(t);
  const Eigen::MatrixXd reg = c + eps * Eigen::MatrixXd::Identity(d, d);
  EXPECT_LT((w * reg * w - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((w - w.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  // Centring removes one dimension, so n - 1 eigenvalues are nonzero.
  std::size_t nonzero = 0;
  for (double l : s.eigenvalues) nonzero += l > 1e-9;
  EXPECT_EQ(nonzero, n - 1);
}

TEST(ZcaTest, RankDeficientCovarianceStaysFinite) {
  Eigen::MatrixXd x(10, 4);
  x.setRandom();
  x.col(3) = x.col(0);
  const ZcaStats s = compute_zca(rows_tensor(x), 1e-5);
  for (double v : s.whitening) EXPECT_TRUE(std::isfinite(v));
  for (double l : s.eigenvalues) EXPECT_GE(l, 0.0);
}

TEST(ZcaTest, RejectsBadInput) {
  EXPECT_THROW(compute_zca(Tensor<float>({1, 4}), 1e-5), UsageError);
  EXPECT_THROW(compute_zca(Tensor<float>({3, 4}), 0.0), UsageError);
  Tensor<float> t({3, 4});
  t[2] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(compute_zca(t, 1e-5), NumericError);
  const ZcaStats s = compute_zca(Tensor<float>({3, 4}, 1.0f), 1e-5);
  EXPECT_THROW(apply_zca(Tensor<float>({3, 5}), s), InputError);
}

PackagedDataset small_package(std::uint64_t seed, DatasetName name = DatasetName::cifar10) {
  DatasetBundle b = testing::random_bundle(3, seed, name);
  b.test_images = testing::random_bundle(2, seed + 1, name).train_images;
  b.test_labels = {1, 0};
  return {std::move(b), name == DatasetName::svhn ? "none" : "zca", name == DatasetName::svhn ? 0.0 : 1e-5};
}

TEST(PackageTest, RoundTripIsBitwise) {
  for (DatasetName name : {DatasetName::cifar10, DatasetName::cifar100, DatasetName::svhn}) {
    const PackagedDataset p = small_package(7, name);
    const auto bytes = serialize_package(p);
    const PackagedDataset q = deserialize_package(bytes);
    EXPECT_EQ(q.bundle.name, name);
    EXPECT_EQ(q.preprocessing, p.preprocessing);
    EXPECT_EQ(q.epsilon, p.epsilon);
    EXPECT_EQ(q.bundle.train_images, p.bundle.train_images);
    EXPECT_EQ(q.bundle.train_labels, p.bundle.train_labels);
    EXPECT_EQ(q.bundle.test_images, p.bundle.test_images);
    EXPECT_EQ(q.bundle.test_labels, p.bundle.test_labels);
    EXPECT_EQ(serialize_package(q), bytes);
  }
}

TEST(PackageTest, DistinctCorruptionErrors) {
  const auto bytes = serialize_package(small_package(8));
  auto flipped = bytes;
  flipped[bytes.size() - 100] ^= 0x01;
  EXPECT_THROW(deserialize_package(flipped), ChecksumError);
  auto version = bytes;
  version[8] += 1;
  EXPECT_THROW(deserialize_package(version), VersionError);
  auto magic = bytes;
  magic[3] = 'Z';
  EXPECT_THROW(deserialize_package(magic), MagicError);
  EXPECT_THROW(deserialize_package(std::span(bytes).first(bytes.size() - 4)), FormatError);
  EXPECT_THROW(deserialize_package(std::span(bytes).first(6)), FormatError);
  try {
    deserialize_package(flipped);
  } catch (const Error& e) {
    EXPECT_EQ(e.exit_code(), 4);
  }
}

TEST(PackageTest, SvhnPassesThroughUntouched) {
  DatasetBundle b = testing::random_bundle(4, 9, DatasetName::svhn);
  const Tensor<float> before = b.train_images;
  const PackagedDataset p = preprocess(b);
  EXPECT_EQ(p.preprocessing, "none");
  EXPECT_EQ(p.bundle.train_images, before);
}

TEST(PackageTest, CifarIsWhitenedWithTrainingStatistics) {
  std::mt19937_64 rng(10);
  const auto recs = testing::natural_like_records(64, 10, rng);
  const auto parsed = parse_records(encode_records(recs), 1, 10, "t");
  DatasetBundle b{DatasetName::cifar10, parsed.images, parsed.labels, parsed.images, parsed.labels};
  const PackagedDataset p = preprocess(b, 1e-2);
  EXPECT_EQ(p.preprocessing, "zca");
  EXPECT_EQ(p.epsilon, 1e-2);
  EXPECT_EQ(p.bundle.train_images, p.bundle.test_images);
  double mean = 0;
  for (float v : p.bundle.train_images.values()) mean += v;
  EXPECT_NEAR(mean / static_cast<double>(p.bundle.train_images.size()), 0.0, 1e-5);
}

// Every corrupted input must raise a typed lpa::Error and never crash.
TEST(FuzzTest, ParsersRejectCorruptionCleanly) {
  std::mt19937_64 rng(11);
  const auto cifar = encode_records(random_records(3, 1, 10, rng));
  const auto c100 = encode_records(random_records(3, 2, 100, rng));
  const auto pkg = serialize_package(small_package(12));
  std::uniform_int_distribution<int> byte(0, 255);
  int rejected = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int target = trial % 3;
    std::vector<std::uint8_t> b = target == 0 ? cifar : target == 1 ? c100 : pkg;
    if (trial % 2 == 0) {
      std::uniform_int_distribution<std::size_t> len(0, b.size() - 1);
      std::size_t n = len(rng);
      const std::size_t record = target == 0 ? 3073 : 3074;
      if (target != 2 && n % record == 0) n += 1;
      b.resize(n);
    } else if (target == 2) {
      std::uniform_int_distribution<std::size_t> at(60, b.size() - 1);
      b[at(rng)] ^= static_cast<std::uint8_t>(1 + byte(rng) % 255);
    } else {
      const std::size_t record = target == 0 ? 3073 : 3074;
      std::uniform_int_distribution<std::size_t> rec(0, 2);
      b[rec(rng) * record + record - 3073] = static_cast<std::uint8_t>(target == 0 ? 10 + byte(rng) % 246 : 100 + byte(rng) % 156);
    }
    try {
      if (target == 0) parse_records(b, 1, 10, "fuzz");
      else if (target == 1) parse_records(b, 2, 100, "fuzz");
      else deserialize_package(b);
    } catch (const Error& e) {
      EXPECT_EQ(e.exit_code(), 4) << e.what();
      ++rejected;
    }
  }
  EXPECT_EQ(rejected, 300);
}

}  // namespace
}  // namespace lpa
