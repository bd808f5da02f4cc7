#pragma once

#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cagi/errors.hpp"
#include "cagi/numerics.hpp"

namespace cagi {

using Complex = std::complex<double>;

/// Complex baseband vector; k = samples().size() channel uses.
class ComplexSignal {
 public:
  explicit ComplexSignal(std::vector<Complex> samples) : samples_(std::move(samples)) {
    if (samples_.empty()) throw ContractViolation("ComplexSignal: k must be at least 1");
    for (const auto& s : samples_) {
      if (!std::isfinite(s.real()) || !std::isfinite(s.imag())) {
        throw ContractViolation("ComplexSignal: non-finite sample");
      }
    }
  }

  std::size_t k() const noexcept { return samples_.size(); }
  std::span<const Complex> samples() const noexcept { return samples_; }
  const Complex& operator[](std::size_t i) const { return samples_[i]; }

  /// z^H z
  double energy() const {
    double e = 0.0;
    for (const auto& s : samples_) e += std::norm(s);
    return e;
  }

  double mean_power() const { return energy() / static_cast<double>(k()); }

  friend bool operator==(const ComplexSignal&, const ComplexSignal&) = default;

 private:
  std::vector<Complex> samples_;
};

/// Pairs adjacent reals as (re, im): [a, b, c, d] -> [a+ib, c+id].
inline ComplexSignal to_complex(std::span<const double> real_vec) {
  if (real_vec.size() % 2 != 0) throw ContractViolation("to_complex: odd-length real vector");
  std::vector<Complex> out(real_vec.size() / 2);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = {real_vec[2 * j], real_vec[2 * j + 1]};
  return ComplexSignal(std::move(out));
}

inline std::vector<double> from_complex(const ComplexSignal& signal) {
  std::vector<double> out(2 * signal.k());
  for (std::size_t j = 0; j < signal.k(); ++j) {
    out[2 * j] = signal[j].real();
    out[2 * j + 1] = signal[j].imag();
  }
  return out;
}

/// Scales the signal so that z^H z = k * power_constraint.
inline ComplexSignal power_normalize(const ComplexSignal& signal, double power_constraint) {
  if (!(power_constraint > 0.0)) throw ContractViolation("power_normalize: power constraint must be positive");
  const double energy = signal.energy();
  if (!(energy > 0.0)) throw DegenerateSignalError("power_normalize: zero-norm signal cannot meet the power constraint");
  const double scale = std::sqrt(static_cast<double>(signal.k()) * power_constraint / energy);
  std::vector<Complex> out(signal.samples().begin(), signal.samples().end());
  for (auto& s : out) s *= scale;
  return ComplexSignal(std::move(out));
}

/// sigma^2 = P / 10^(snr_db / 10)
inline double snr_to_sigma2(double snr_db, double power_constraint) {
  if (!(power_constraint > 0.0)) throw ContractViolation("snr_to_sigma2: power constraint must be positive");
  return power_constraint / std::pow(10.0, snr_db / 10.0);
}

struct ChannelConfig {
  double snr_db = 0.0;
  double power_constraint = 1.0;
  bool noiseless = false;

  double sigma2() const { return noiseless ? 0.0 : snr_to_sigma2(snr_db, power_constraint); }
};

/// Noise of variance sigma2 / 2 per real component, drawn (re, im) per sample.
inline std::vector<double> draw_channel_noise(std::size_t real_length, double sigma2, RngStream& rng) {
  if (sigma2 < 0.0) throw ContractViolation("channel noise: negative variance");
  std::vector<double> noise(real_length, 0.0);
  if (sigma2 == 0.0) return noise;
  const double stddev = std::sqrt(sigma2 / 2.0);
  for (auto& n : noise) n = stddev * rng.normal();
  return noise;
}

/// Circularly-symmetric complex AWGN with total variance sigma2 per sample.
inline ComplexSignal awgn(const ComplexSignal& signal, double sigma2, RngStream& rng) {
  if (sigma2 == 0.0) return signal;
  const auto noise = draw_channel_noise(2 * signal.k(), sigma2, rng);
  std::vector<Complex> out(signal.samples().begin(), signal.samples().end());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += Complex(noise[2 * j], noise[2 * j + 1]);
  return ComplexSignal(std::move(out));
}

// ---------------------------------------------------------------------------
// Channel-aware forward y -> C^{-1}(PN(C(y)) + n), written on the real
// representation so its vector-Jacobian product stays simple.

/// PN expressed on the interleaved real form.
inline std::vector<double> power_normalize_real(std::span<const double> y, double power_constraint) {
  if (y.size() % 2 != 0) throw ContractViolation("power_normalize_real: odd-length real vector");
  const double energy = squared_norm(y);
  if (!(energy > 0.0)) throw DegenerateSignalError("power_normalize: zero-norm signal cannot meet the power constraint");
  const double k = static_cast<double>(y.size() / 2);
  const double scale = std::sqrt(k * power_constraint / energy);
  std::vector<double> out(y.begin(), y.end());
  for (auto& v : out) v *= scale;
  return out;
}

/// J_PN(y)^T cot where J = s (I - y y^T / |y|^2).
inline std::vector<double> power_normalize_vjp(std::span<const double> y, double power_constraint,
                                               std::span<const double> cotangent) {
  if (y.size() != cotangent.size()) throw ContractViolation("power_normalize_vjp: length mismatch");
  const double energy = squared_norm(y);
  if (!(energy > 0.0)) throw DegenerateSignalError("power_normalize: zero-norm signal cannot meet the power constraint");
  const double k = static_cast<double>(y.size() / 2);
  const double scale = std::sqrt(k * power_constraint / energy);
  const double projection = dot(y, cotangent) / energy;
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = scale * (cotangent[i] - projection * y[i]);
  return out;
}

/// A(y) with a caller-supplied noise realization (already in real form).
inline std::vector<double> channel_forward_with_noise(std::span<const double> y, std::span<const double> noise,
                                                      double power_constraint) {
  if (noise.size() != y.size()) throw ContractViolation("channel forward: noise length mismatch");
  auto out = power_normalize_real(y, power_constraint);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise[i];
  return out;
}

/// A(y) drawing n_A ~ CN(0, sigma2_hat I) from `rng`.
inline std::vector<double> channel_forward_A(std::span<const double> y, double sigma2_hat,
                                             double power_constraint, RngStream& rng) {
  if (y.size() % 2 != 0) throw ContractViolation("channel_forward_A: odd-length real vector");
  auto normalized = power_normalize_real(y, power_constraint);
  const auto noise = draw_channel_noise(y.size(), sigma2_hat, rng);
  for (std::size_t i = 0; i < normalized.size(); ++i) normalized[i] += noise[i];
  return normalized;
}

// ---------------------------------------------------------------------------
// Digital side link for cache indices

struct IndexLinkConfig {
  Rational code_rate{1, 3};
  std::uint32_t bits_per_symbol = 1;
  double bit_error_rate = 0.0;

  void validate() const {
    if (code_rate.num <= 0 || code_rate.num > code_rate.den) throw ConfigError("index link: code rate must be in (0, 1]");
    if (bits_per_symbol < 1) throw ConfigError("index link: bits per symbol must be >= 1");
    if (!(bit_error_rate >= 0.0 && bit_error_rate < 1.0)) {
      throw ConfigError("index link: bit error rate must be in [0, 1)");
    }
  }
};

/// ceil(log2(N_C * N_S)), floored at one bit.
inline std::uint32_t index_bits(std::uint64_t cache_capacity, std::uint64_t num_slots) {
  if (cache_capacity < 1 || num_slots < 1) throw ContractViolation("index_bits: N_C and N_S must be >= 1");
  const std::uint64_t joint = cache_capacity * num_slots;
  if (joint == 1) return 1;
  return static_cast<std::uint32_t>(std::bit_width(joint - 1));
}

/// Channel uses for `num_indices` indices: ceil(n * bits / (R_c * M)).
inline std::int64_t index_symbol_cost(std::int64_t num_indices, const IndexLinkConfig& link,
                                      std::uint64_t cache_capacity, std::uint64_t num_slots) {
  if (num_indices < 0) throw ContractViolation("index_symbol_cost: negative index count");
  const std::int64_t bits = num_indices * index_bits(cache_capacity, num_slots);
  // bits / (num/den * M) = bits * den / (num * M)
  return ceil_div(bits * link.code_rate.den, link.code_rate.num * link.bits_per_symbol);
}

struct DecodedIndex {
  std::uint64_t value = 0;
  bool corrupted = false;
};

/**
 * Sends each index as a `bits`-wide word through a binary symmetric channel
 * with crossover `link.bit_error_rate`. Any flipped word is flagged corrupted,
 * which stands in for a decoding failure the receiver can detect.
 */
inline std::vector<DecodedIndex> index_link_transmit(std::span<const std::uint64_t> indices,
                                                     const IndexLinkConfig& link, std::uint32_t bits,
                                                     RngStream& rng) {
  if (bits < 1 || bits > 63) throw ContractViolation("index_link_transmit: bit width out of range");
  std::vector<DecodedIndex> out;
  out.reserve(indices.size());
  for (const auto idx : indices) {
    if (idx >> bits != 0) throw ContractViolation("index_link_transmit: index not representable in bit width");
    std::uint64_t word = idx;
    if (link.bit_error_rate > 0.0) {
      for (std::uint32_t b = 0; b < bits; ++b) {
        if (rng.bernoulli(link.bit_error_rate)) word ^= (std::uint64_t{1} << b);
      }
    }
    out.push_back({word, word != idx});
  }
  return out;
}

}  // namespace cagi
