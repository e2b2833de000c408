#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "retrograph/autodiff.hpp"
#include "support/fd.hpp"

using namespace retrograph;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

Mat random_mat(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
  return m;
}

// Contracts an arbitrary-shaped output with fixed random weights so every
// output entry reaches the scalar with a distinct coefficient.
Var contract(Tape& t, Var out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(out, t.constant(random_mat(rng, static_cast<int>(out.rows()), static_cast<int>(out.cols())))));
}

constexpr double kTol = 1e-7;

}  // namespace

TEST(Autodiff, LinearOps) {
  std::mt19937_64 rng(1);
  const Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 2), c = random_mat(rng, 3, 4);
  const Mat row = random_mat(rng, 1, 4), s = random_mat(rng, 1, 1), bt = random_mat(rng, 5, 4);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::matmul(v[0], v[1])); }, {a, b}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::matmul_nt(v[0], v[1])); }, {a, bt}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::transpose(v[0])); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::add(v[0], v[1])); }, {a, c}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::sub(v[0], v[1])); }, {a, c}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::mul(v[0], v[1])); }, {a, c}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::scale(v[0], -2.5)); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::add_scalar(v[0], 3.0)); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::add_row(v[0], v[1])); }, {a, row}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::mul_row(v[0], v[1])); }, {a, row}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::mul_scalar(v[0], v[1])); }, {a, s}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::repeat_cols(v[0], 3)); }, {a}), kTol);
}

TEST(Autodiff, Nonlinearities) {
  std::mt19937_64 rng(2);
  const Mat a = random_mat(rng, 3, 5, 2.0), g = random_mat(rng, 1, 5), b = random_mat(rng, 1, 5);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::gelu(v[0])); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::tanh(v[0])); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::sigmoid(v[0])); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::softmax_rows(v[0])); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::log_softmax_rows(v[0])); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::layer_norm(v[0], v[1], v[2])); },
                                 {a, g, b}),
            kTol);
}

TEST(Autodiff, ShapeOps) {
  std::mt19937_64 rng(3);
  const Mat a = random_mat(rng, 4, 5), b = random_mat(rng, 4, 2), c = random_mat(rng, 2, 5);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::slice_cols(v[0], 1, 3)); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::slice_rows(v[0], 2, 2)); }, {a}), kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::concat_cols({v[0], v[1]})); }, {a, b}),
            kTol);
  EXPECT_LT(oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::concat_rows({v[0], v[1]})); }, {a, c}),
            kTol);
  EXPECT_LT(
      oracle::fd_max_error([](Tape& t, const auto& v) { return contract(t, ad::gather_rows(v[0], {3, 0, 3, 1})); }, {a}),
      kTol);
}

TEST(Autodiff, Losses) {
  std::mt19937_64 rng(4);
  const Mat logits = random_mat(rng, 4, 6, 2.0);
  EXPECT_LT(oracle::fd_max_error([](Tape&, const auto& v) { return ad::cross_entropy_sum(v[0], {1, -1, 5, 0}); }, {logits}),
            kTol);
  Mat target(4, 6), mask(4, 6);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) {
      target(i, j) = coin(rng) ? 1.0 : 0.0;
      mask(i, j) = coin(rng) ? 1.0 : 0.0;
    }
  EXPECT_LT(oracle::fd_max_error([&](Tape&, const auto& v) { return ad::bce_with_logits_sum(v[0], target, mask); }, {logits}),
            kTol);
  EXPECT_LT(oracle::fd_max_error(
                [](Tape&, const auto& v) {
                  return ad::weighted_sum({ad::sum(v[0]), ad::mean(ad::mul(v[0], v[0]))}, {0.3, 1.7});
                },
                {logits}),
            kTol);
}

TEST(Autodiff, LossValuesMatchClosedForm) {
  Tape t;
  Mat logits(2, 3);
  logits << 1.0, 2.0, 3.0, -1.0, 0.0, 1.0;
  const double ce = ad::cross_entropy_sum(t.constant(logits), {2, 0}).scalar();
  const double lse0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  const double lse1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(1.0));
  EXPECT_NEAR(ce, (lse0 - 3.0) + (lse1 + 1.0), 1e-12);

  Mat x(1, 2), y(1, 2), m(1, 2);
  x << 2.0, -3.0;
  y << 1.0, 0.0;
  m << 1.0, 1.0;
  const double bce = ad::bce_with_logits_sum(t.constant(x), y, m).scalar();
  const auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  EXPECT_NEAR(bce, -std::log(sig(2.0)) - std::log(1.0 - sig(-3.0)), 1e-12);
}

TEST(Autodiff, ExtremeLogitsStayFinite) {
  Tape t;
  Mat x(1, 3);
  x << 800.0, -800.0, 0.0;
  Var l = t.leaf(x);
  Var loss = ad::add(ad::cross_entropy_sum(l, {1}), ad::bce_with_logits_sum(l, Mat::Zero(1, 3), Mat::Ones(1, 3)));
  EXPECT_TRUE(std::isfinite(loss.scalar()));
  t.backward(loss);
  EXPECT_TRUE(t.grad(l.id).allFinite());
}

TEST(Autodiff, ReusedNodeAccumulates) {
  Tape t;
  Var x = t.leaf(Mat::Constant(1, 1, 3.0));
  Var y = ad::add(ad::mul(x, x), x);  // x^2 + x
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x.id)(0, 0), 7.0);
}
