#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cagi/numerics.hpp"

using namespace cagi;

// Reference values below come from tests/oracles/reference_values.py.

TEST(RngStream, MatchesReferencePcg32Outputs) {
  RngStream r(42, 0);
  EXPECT_EQ(r.next_u32(), 565663470u);
  EXPECT_EQ(r.next_u32(), 3244226384u);
  EXPECT_EQ(r.next_u32(), 2504567229u);
  EXPECT_EQ(r.next_u32(), 903561869u);
}

TEST(RngStream, MatchesReferenceNormals) {
  RngStream r(42, 0);
  EXPECT_DOUBLE_EQ(r.normal(), -0.4605762415349221);
  EXPECT_DOUBLE_EQ(r.normal(), -0.2651683602100817);
}

TEST(RngStream, DeriveMatchesReference) {
  const RngStream parent(7, 3);
  EXPECT_EQ(parent.derive(5).next_u32(), 2655204494u);
}

TEST(RngStream, DeriveIgnoresParentPosition) {
  RngStream a(9, 1);
  const auto before = a.derive(4);
  a.next_u64();
  a.normal();
  auto after = a.derive(4);
  auto copy = before;
  for (int i = 0; i < 16; ++i) EXPECT_EQ(copy.next_u32(), after.next_u32());
}

TEST(RngStream, DistinctStreamsDiffer) {
  RngStream a(5, 1);
  RngStream b(5, 2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u32() == b.next_u32();
  EXPECT_LT(same, 2);
}

TEST(RngStream, UniformIntStaysInRange) {
  RngStream r(3, 0);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.uniform_int(7), 7u);
  EXPECT_THROW(r.uniform_int(0), ContractViolation);
}

TEST(RngStream, NormalMomentsAreStandard) {
  RngStream r(11, 0);
  const auto v = r.normal_vector(20000);
  double mean = 0.0, var = 0.0;
  for (const double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (const double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.03);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  OptimizerState s(3, {});
  std::vector<double> v = {1.0, -2.0, 0.5};
  const auto before = v;
  std::vector<double> g(3, 0.0);
  for (int i = 0; i < 5; ++i) adam_step(s, v, g);
  EXPECT_EQ(v, before);
}

TEST(Adam, FirstStepMatchesHandEvaluation) {
  OptimizerState s(1, {});
  std::vector<double> v = {0.0};
  const std::vector<double> g = {1.0};
  adam_step(s, v, g);
  EXPECT_NEAR(-v[0], 0.009999999900000002, 1e-15);
}

TEST(Adam, LengthMismatchIsContractViolation) {
  OptimizerState s(2, {});
  std::vector<double> v = {0.0, 0.0};
  const std::vector<double> g = {1.0};
  EXPECT_THROW(adam_step(s, v, g), ContractViolation);
}

TEST(Adam, ConvergesOnQuadraticAndIsMonotoneAfterTransient) {
  RngStream r(17, 0);
  std::vector<double> c(6);
  for (auto& x : c) x = r.uniform(-1.0, 1.0);
  std::vector<double> v(6, 0.0);
  OptimizerState s(6, {});
  auto f = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += (v[i] - c[i]) * (v[i] - c[i]);
    return acc;
  };
  double prev = f();
  for (int t = 0; t < 300; ++t) {
    std::vector<double> g(6);
    for (std::size_t i = 0; i < v.size(); ++i) g[i] = 2.0 * (v[i] - c[i]);
    adam_step(s, v, g);
    const double now = f();
    if (t >= 10) EXPECT_LE(now, prev + 1e-15) << "step " << t;
    prev = now;
  }
  EXPECT_LT(std::sqrt(f()), 1e-2);
}

TEST(FiniteDiff, QuadraticDerivative) {
  const auto g = finite_diff_grad([](std::span<const double> x) { return x[0] * x[0]; }, std::vector<double>{3.0});
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantGivesZero) {
  const auto g = finite_diff_grad([](std::span<const double>) { return 4.0; }, std::vector<double>{1.0, -2.0, 7.0});
  for (const double x : g) EXPECT_EQ(x, 0.0);
}

TEST(FiniteDiff, NonFiniteValueNamesCoordinate) {
  auto f = [](std::span<const double> x) { return x[1] > 0.5 ? std::nan("") : x[0]; };
  try {
    finite_diff_grad(f, std::vector<double>{0.0, 0.5});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

TEST(MaxRelativeError, ClampsDenominator) {
  const std::vector<double> a = {1.0, 0.0};
  const std::vector<double> b = {1.0, 1e-12};
  EXPECT_NEAR(max_relative_error(a, b), 1e-4, 1e-12);
}

TEST(Rational, ReducesToLowestTerms) {
  const Rational r(6144, 786432);
  EXPECT_EQ(r.num, 1);
  EXPECT_EQ(r.den, 128);
  EXPECT_EQ(r.str(), "1/128");
  EXPECT_EQ(Rational(3, -6), Rational(-1, 2));
  EXPECT_THROW(Rational(1, 0), ContractViolation);
  EXPECT_TRUE(Rational(1, 3) < Rational(1, 2));
}

TEST(CeilDiv, RoundsUp) {
  EXPECT_EQ(ceil_div(33, 1), 33);
  EXPECT_EQ(ceil_div(10, 3), 4);
  EXPECT_EQ(ceil_div(0, 3), 0);
}
