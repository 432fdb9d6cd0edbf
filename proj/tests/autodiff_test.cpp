#include <gtest/gtest.h>

#include <random>

#include "lpa/ops.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace lpa {
namespace {

using testing::gradcheck;
using testing::random_tensor;

TEST(BackwardTest, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Parameter<double> p("p", random_tensor<double>({3, 4}, rng));
  Tape<double> t;
  backward(sum(t.parameter(p)));
  for (double g : p.grad.values()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, HalfSquaredNormGivesValue) {
  std::mt19937_64 rng(2);
  Parameter<double> p("p", random_tensor<double>({5}, rng));
  Tape<double> t;
  auto v = t.parameter(p);
  backward(scale(sum(mul(v, v)), 0.5));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p.grad[i], p.value[i]);
}

TEST(BackwardTest, OverwritesStaleGradients) {
  Parameter<double> p("p", Tensor<double>({2}, {1, 2}));
  p.grad.fill(42);
  Tape<double> t;
  backward(sum(t.parameter(p)));
  EXPECT_EQ(p.grad[0], 1.0);
}

TEST(BackwardTest, RejectsNonScalarLoss) {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({3}));
  EXPECT_THROW(backward(relu(x)), UsageError);
}

TEST(BackwardTest, VisitsEachOperationOnce) {
  // y = 3x used twice: d(sum(y) + sum(y))/dx = 6
  Tape<double> t;
  auto x = t.constant(Tensor<double>({2}, {1, -1}));
  auto y = scale(x, 3.0);
  backward(sum(mul(y, t.constant(Tensor<double>({2}, 2.0)))));
  EXPECT_EQ(x.grad()[0], 6.0);
  EXPECT_EQ(x.grad()[1], 6.0);
}

TEST(BackwardTest, DeterministicAcrossRuns) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({2, 3, 8, 8}, rng);
  const auto k = random_tensor<float>({4, 3, 3, 3}, rng);
  auto run = [&] {
    Parameter<float> kp("k", k), bp("b", Tensor<float>({4}));
    Tape<float> t;
    backward(sum(maxpool2x2(relu(conv2d(t.constant(x), t.parameter(kp), t.parameter(bp))))));
    return kp.grad;
  };
  EXPECT_EQ(run(), run());
}

// Inputs away from relu/maxpool kinks so central differences are valid.
Tensor<double> kink_free(const Shape& shape, std::mt19937_64& rng) {
  Tensor<double> t = random_tensor<double>(shape, rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values())
    if (sign(rng)) v = -v;
  return t;
}

class PrimitiveGradTest : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradTest, Conv2d) {
  std::mt19937_64 rng(GetParam());
  auto r = gradcheck({random_tensor<double>({2, 3, 5, 4}, rng), random_tensor<double>({4, 3, 3, 3}, rng),
                      random_tensor<double>({4}, rng)},
                     [](auto& v) { return conv2d(v[0], v[1], v[2]); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, Conv1x1) {
  std::mt19937_64 rng(GetParam());
  auto r = gradcheck({random_tensor<double>({2, 5, 4, 4}, rng), random_tensor<double>({3, 5, 1, 1}, rng),
                      random_tensor<double>({3}, rng)},
                     [](auto& v) { return conv1x1(v[0], v[1], v[2]); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, MaxPool) {
  std::mt19937_64 rng(GetParam());
  // distinct values spaced well beyond the FD step
  Tensor<double> x({2, 3, 4, 8});
  std::vector<double> vals(x.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
  std::shuffle(vals.begin(), vals.end(), rng);
  std::copy(vals.begin(), vals.end(), x.data());
  auto r = gradcheck({x}, [](auto& v) { return maxpool2x2(v[0]); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, Dense) {
  std::mt19937_64 rng(GetParam());
  auto r = gradcheck({random_tensor<double>({3, 6}, rng), random_tensor<double>({6, 4}, rng),
                      random_tensor<double>({4}, rng)},
                     [](auto& v) { return dense(v[0], v[1], v[2]); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, Relu) {
  std::mt19937_64 rng(GetParam());
  auto r = gradcheck({kink_free({4, 4, 8, 8}, rng)}, [](auto& v) { return relu(v[0]); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, Softmax) {
  std::mt19937_64 rng(GetParam());
  auto r = gradcheck({random_tensor<double>({3, 2, 7}, rng, -3, 3)}, [](auto& v) { return softmax(v[0]); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, CrossEntropy) {
  std::mt19937_64 rng(GetParam());
  Tensor<double> p = random_tensor<double>({4, 5}, rng, 0.05, 1.0);
  for (std::size_t n = 0; n < 4; ++n) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += p[n * 5 + j];
    for (std::size_t j = 0; j < 5; ++j) p[n * 5 + j] /= s;
  }
  const std::vector<int> labels{0, 4, 2, 2};
  auto r = gradcheck({p}, [&](auto& v) { return cross_entropy(v[0], std::span<const int>(labels)); }, GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, StructuralOps) {
  std::mt19937_64 rng(GetParam());
  auto r = gradcheck({random_tensor<double>({2, 3, 2, 2}, rng), random_tensor<double>({2, 5}, rng),
                      random_tensor<double>({2, 5}, rng)},
                     [](auto& v) {
                       auto joined = concat(std::vector{flatten(v[0]), v[1]});
                       auto avg = mean(std::vector{v[1], mul(v[2], v[2])});
                       return concat(std::vector{joined, scale(avg, 1.5)});
                     },
                     GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

TEST_P(PrimitiveGradTest, SmallConvNetChain) {
  std::mt19937_64 rng(GetParam());
  const std::vector<int> labels{1, 0};
  auto r = gradcheck({random_tensor<double>({2, 2, 4, 4}, rng), random_tensor<double>({3, 2, 3, 3}, rng),
                      random_tensor<double>({3}, rng), random_tensor<double>({12, 2}, rng),
                      random_tensor<double>({2}, rng)},
                     [&](auto& v) {
                       auto h = maxpool2x2(relu(conv2d(v[0], v[1], v[2])));
                       return cross_entropy(softmax(dense(flatten(h), v[3], v[4])), std::span<const int>(labels));
                     },
                     GetParam());
  EXPECT_TRUE(r.ok()) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradTest, ::testing::Range(0, 5));

}  // namespace
}  // namespace lpa
