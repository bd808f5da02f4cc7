#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cagi/errors.hpp"

namespace cagi {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/**
 * @brief Seeded PCG32 (XSH-RR, 64-bit state) random stream.
 *
 * The stream id selects the PCG increment, so (seed, stream_id) pairs with
 * distinct ids walk disjoint sequences. Normal draws use Box-Muller on two
 * 53-bit uniforms; the spare value is cached. Nothing here touches the
 * standard library distributions, whose output is implementation-defined.
 */
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), inc_((stream_id << 1u) | 1u) {
    step();
    state_ += seed;
    step();
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  /// Child stream keyed by `tag`; independent of this stream's position.
  RngStream derive(std::uint64_t tag) const {
    return RngStream(seed_, detail::splitmix64(stream_id_ ^ detail::splitmix64(tag + 0x632be59bd9b4e019ULL)));
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    step();
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32u) | next_u32();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11u) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, bound).
  std::uint32_t uniform_int(std::uint32_t bound) {
    if (bound == 0) throw ContractViolation("uniform_int: bound must be positive");
    const std::uint32_t threshold = (0u - bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(theta);
    has_spare_ = true;
    return radius * std::cos(theta);
  }

  std::vector<double> normal_vector(std::size_t n, double stddev = 1.0) {
    std::vector<double> out(n);
    for (auto& v : out) v = stddev * normal();
    return out;
  }

 private:
  void step() { state_ = state_ * 6364136223846793005ULL + inc_; }

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t state_ = 0;
  std::uint64_t inc_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline RngStream seeded_rng(std::uint64_t seed, std::uint64_t stream_id) {
  return RngStream(seed, stream_id);
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  std::size_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  AdamConfig config;

  OptimizerState() = default;
  OptimizerState(std::size_t n, AdamConfig cfg)
      : first_moment(n, 0.0), second_moment(n, 0.0), config(cfg) {}
};

/// One bias-corrected Adam update of `variable` in place.
inline void adam_step(OptimizerState& state, std::span<double> variable,
                      std::span<const double> gradient) {
  if (variable.size() != gradient.size() || variable.size() != state.first_moment.size() ||
      variable.size() != state.second_moment.size()) {
    throw ContractViolation("adam_step: variable, gradient and moment lengths differ");
  }
  const auto& c = state.config;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < variable.size(); ++i) {
    const double g = gradient[i];
    state.first_moment[i] = c.beta1 * state.first_moment[i] + (1.0 - c.beta1) * g;
    state.second_moment[i] = c.beta2 * state.second_moment[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = state.first_moment[i] / bias1;
    const double v_hat = state.second_moment[i] / bias2;
    variable[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Differentiable objectives and the finite-difference oracle

struct DifferentiableObjective {
  std::function<double(std::span<const double>)> value_fn;
  std::function<std::vector<double>(std::span<const double>)> gradient_fn;
};

/// Central differences with per-coordinate step h = step * max(1, |x_i|).
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& value_fn,
                                            std::span<const double> point, double step = 1e-5) {
  if (!(step > 0.0)) throw ContractViolation("finite_diff_grad: step must be positive");
  std::vector<double> probe(point.begin(), point.end());
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double h = step * std::max(1.0, std::abs(point[i]));
    probe[i] = point[i] + h;
    const double up = value_fn(probe);
    probe[i] = point[i] - h;
    const double down = value_fn(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("finite_diff_grad: non-finite objective value at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline std::vector<double> finite_diff_grad(const DifferentiableObjective& objective,
                                            std::span<const double> point, double step = 1e-5) {
  return finite_diff_grad(objective.value_fn, point, step);
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                                 double floor = 1e-8) {
  if (analytic.size() != numeric.size()) throw ContractViolation("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Exact rationals for channel-use accounting

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (d == 0) throw ContractViolation("Rational: zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  friend bool operator==(const Rational&, const Rational&) = default;
  friend bool operator<(const Rational& a, const Rational& b) { return a.num * b.den < b.num * a.den; }
  friend bool operator<=(const Rational& a, const Rational& b) { return !(b < a); }
};

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

// Small dense helpers shared by the modules below.

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cagi
