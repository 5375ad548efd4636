#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>

#include "entrodrop/checksum.hpp"
#include "entrodrop/numerics.hpp"
#include "entrodrop/parallel.hpp"
#include "entrodrop/rng.hpp"
#include "entrodrop/special.hpp"

using namespace entrodrop;

namespace {

MatrixD random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  MatrixD m(r, c);
  for (auto& v : m.data()) v = rng.uniform(-1.0, 1.0);
  return m;
}

MatrixD naive_product(const MatrixD& a, const MatrixD& b) {
  MatrixD out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

}  // namespace

TEST(Rng, Seed42MatchesReferenceStream) {
  Rng rng(42);
  const std::uint64_t expected[] = {0x15780b2e0c2ec716, 0x6104d9866d113a7e, 0xae17533239e499a1,
                                    0xecb8ad4703b360a1, 0xfde6dc7fe2ec5e64, 0xc50da53101795238,
                                    0xb82154855a65ddb2, 0xd99a2743ebe60087};
  for (std::uint64_t e : expected) EXPECT_EQ(rng.next(), e);
}

TEST(Rng, ForksAreDeterministicAndDistinct) {
  const Rng root(7);
  Rng a = root.fork(3), b = root.fork(3), c = root.fork(4);
  const auto va = a.next();
  EXPECT_EQ(va, b.next());
  EXPECT_NE(va, c.next());
}

TEST(Rng, BelowStaysInRangeAndShufflePermutes) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.below(7), 7u);
  EXPECT_EQ(rng.below(1), 0u);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Matmul, AgreesWithNaiveProduct) {
  const auto a = random_matrix(13, 29, 1);
  const auto b = random_matrix(29, 7, 2);
  const auto got = matmul(a, b);
  const auto want = naive_product(a, b);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
}

TEST(Matmul, TransposedVariantsAgree) {
  const auto a = random_matrix(6, 5, 3);
  const auto b = random_matrix(4, 5, 4);
  const auto nt = matmul_nt(a, b);
  const auto ref = naive_product(a, transpose(b));
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt.data()[i], ref.data()[i], 1e-12);

  const auto c = random_matrix(6, 3, 5);
  MatrixD acc(5, 3, 1.0);
  accumulate_tn(a, c, acc);
  const auto tn = naive_product(transpose(a), c);
  for (std::size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(acc.data()[i], tn.data()[i] + 1.0, 1e-12);
}

TEST(Matmul, IdentityAndShapeMismatch) {
  const auto a = random_matrix(4, 4, 9);
  EXPECT_EQ(matmul(a, identity<double>(4)), a);
  EXPECT_THROW(matmul(a, random_matrix(3, 2, 1)), ContractViolation);
}

TEST(Softmax, RowsSumToOneAndResistOverflow) {
  MatrixD m(2, 3, std::vector<double>{1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0});
  const auto s = softmax_rows(m);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s(0, 0), std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(s(0, 2), std::exp(3.0) / z, 1e-15);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(s(1, c), 1.0 / 3.0, 1e-15);
}

TEST(LayerNorm, ZeroMeanUnitVarianceThenAffine) {
  MatrixD m(1, 4, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  const std::vector<double> gain{1, 1, 1, 1}, bias{0, 0, 0, 0};
  const auto out = layer_norm<double>(m, gain, bias, 1e-12);
  const double sd = std::sqrt(1.25);
  EXPECT_NEAR(out(0, 0), -1.5 / sd, 1e-9);
  EXPECT_NEAR(out(0, 3), 1.5 / sd, 1e-9);

  const std::vector<double> g2{2, 2, 2, 2}, b2{1, 1, 1, 1};
  const auto out2 = layer_norm<double>(m, g2, b2, 1e-12);
  EXPECT_NEAR(out2(0, 1), 2.0 * (-0.5 / sd) + 1.0, 1e-9);
  EXPECT_THROW(layer_norm<double>(m, std::vector<double>{1, 1}, bias, 1e-5), ContractViolation);
}

TEST(Special, DigammaKnownValues) {
  constexpr double gamma = 0.57721566490153286061;
  EXPECT_NEAR(digamma(1.0), -gamma, 1e-13);
  EXPECT_NEAR(digamma(0.5), -gamma - 2.0 * std::numbers::ln2, 1e-13);
  EXPECT_NEAR(digamma(10.0), -gamma + 7129.0 / 2520.0, 1e-13);
  EXPECT_NEAR(digamma(26.0) - digamma(25.0), 1.0 / 25.0, 1e-14);
  EXPECT_THROW(digamma(0.0), DomainError);
}

TEST(Special, LogGammaMatchesFactorials) {
  double log_fact = 0.0;
  for (int n = 1; n <= 30; ++n) {
    EXPECT_NEAR(log_gamma(n), log_fact, 1e-12 * std::max(1.0, log_fact)) << n;
    log_fact += std::log(static_cast<double>(n));
  }
  EXPECT_NEAR(log_gamma(0.5), 0.5 * std::log(std::numbers::pi), 1e-13);
  EXPECT_THROW(log_gamma(-1.0), DomainError);
}

TEST(Special, UnitBallVolumes) {
  EXPECT_NEAR(log_unit_ball_volume(1), std::log(2.0), 1e-13);
  EXPECT_NEAR(log_unit_ball_volume(2), std::log(std::numbers::pi), 1e-13);
  EXPECT_NEAR(log_unit_ball_volume(3), std::log(4.0 * std::numbers::pi / 3.0), 1e-13);
  EXPECT_NEAR(log_unit_ball_volume(4), std::log(std::numbers::pi * std::numbers::pi / 2.0), 1e-13);
}

TEST(Checksum, StandardCheckValue) {
  const std::string text = "123456789";
  EXPECT_EQ(crc32(std::as_bytes(std::span(text))), 0xCBF43926u);
  const auto first = crc32(std::as_bytes(std::span(text).subspan(0, 4)));
  EXPECT_EQ(crc32(std::as_bytes(std::span(text).subspan(4)), first), 0xCBF43926u);
}

TEST(Parallel, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(97);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a(2, 2, std::vector<float>{1, 2, 3, 4});
  const Matrix ones(2, 1, 1.0f);
  EXPECT_EQ(matmul(a, ones), Matrix(2, 1, std::vector<float>{3, 7}));
  EXPECT_EQ(matmul(identity<float>(2), a), a);
}

TEST(Matmul, FloatRandomWithinRelativeTolerance) {
  Rng rng(8);
  Matrix a(8, 8), b(8, 8);
  for (auto& v : a.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (auto& v : b.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  const auto got = matmul(a, b);
  const auto want = naive_product(MatrixD::from(a), MatrixD::from(b));
  for (std::size_t i = 0; i < got.size(); ++i)
    EXPECT_NEAR(got.data()[i], want.data()[i], 1e-5 * std::max(1.0, std::fabs(want.data()[i])));
}

TEST(Softmax, SymmetricAndSaturatedRows) {
  Matrix m(2, 3, std::vector<float>{0, 0, 0, 1000, 0, -5});
  const auto s = softmax_rows(m);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(s(0, c), 1.0f / 3.0f);
  EXPECT_NEAR(s(1, 0), 1.0, 1e-6);
  EXPECT_NEAR(s(1, 1), 0.0, 1e-6);
}

TEST(LayerNorm, ConstantRowAndNormalizedPair) {
  const std::vector<double> g3{1, 1, 1}, b3{0, 0, 0};
  const auto flat = layer_norm<double>(MatrixD(1, 3, 4.5), g3, b3, 1e-5);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const std::vector<double> g2{1, 1}, b2{0, 0};
  const auto pair = layer_norm<double>(MatrixD(1, 2, std::vector<double>{1, -1}), g2, b2, 1e-15);
  EXPECT_NEAR(pair(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(pair(0, 1), -1.0, 1e-12);
}

TEST(Special, DigammaRecurrence) {
  EXPECT_NEAR(digamma(2.0), digamma(1.0) + 1.0, 1e-14);
  for (double x : {0.1, 0.7, 3.3, 12.5}) EXPECT_NEAR(digamma(x + 1.0) - digamma(x), 1.0 / x, 1e-12);
}
