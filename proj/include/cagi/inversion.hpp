#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cagi/channel.hpp"
#include "cagi/errors.hpp"
#include "cagi/generator.hpp"
#include "cagi/numerics.hpp"
#include "cagi/objective.hpp"

namespace cagi {

struct InversionConfig {
  std::size_t max_iters = 300;
  AdamConfig adam{};
  LossConfig loss{};
  bool resample_noise_each_iter = true;
  std::optional<LatentCode> init;  // empty: draw from the standard-normal prior
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 50;

  void validate() const {
    if (!(adam.learning_rate > 0.0)) throw ConfigError("inversion: learning rate must be positive");
    loss.validate();
  }
};

/// Iteration budgets for plain inversion followed by channel-aware refinement.
struct CagiConfig {
  InversionConfig plain{};
  InversionConfig channel_aware{};
};

struct InversionResult {
  LatentCode latent;  // best iterate
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_iteration = 0;
  double initial_loss = 0.0;
  std::vector<double> loss_history;  // one entry per evaluated iterate, including the start
};

struct ReconstructionMetrics {
  double psnr = 0.0;
  double ms_ssim = 0.0;  // NaN when the image is too small for the scale count
  double l1 = 0.0;
  double mse = 0.0;
};

inline ReconstructionMetrics evaluate_metrics(const Image& reconstruction, const Image& target,
                                              const MsSsimConfig& ms_cfg = {}) {
  ReconstructionMetrics m;
  m.psnr = psnr(reconstruction, target);
  m.l1 = l1_loss(reconstruction, target);
  m.mse = mse(reconstruction, target);
  try {
    m.ms_ssim = ms_ssim(reconstruction, target, ms_cfg);
  } catch (const ConfigError&) {
    m.ms_ssim = std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

/// Per-transmission accounting. bcr is (analog + digital) / N, reduced.
struct TransmissionRecord {
  std::int64_t analog_complex_symbols = 0;
  std::int64_t digital_symbols = 0;
  std::int64_t source_bandwidth = 0;
  Rational bcr{0, 1};
  double snr_db_actual = 0.0;
  ReconstructionMetrics metrics;
  std::vector<bool> hit_mask;
  std::vector<std::uint64_t> indices_sent;
  std::size_t n_s = 0;
  std::size_t hits = 0;
  std::size_t upgrades = 0;
  std::size_t fallbacks = 0;
  double tx_energy = 0.0;  // z^H z of the analog signal; 0 when nothing was sent
  std::string error;       // set when the round failed and was skipped
};

inline Rational bandwidth_ratio(std::int64_t analog, std::int64_t digital, std::int64_t source_bandwidth) {
  if (source_bandwidth <= 0) throw ContractViolation("bandwidth_ratio: source bandwidth must be positive");
  return Rational(analog + digital, source_bandwidth);
}

/// Accounting for an uncached transmission of `transmitted_slots` vectors.
inline TransmissionRecord cagi_accounting(std::size_t transmitted_slots, std::size_t latent_dim, std::size_t height,
                                          std::size_t width) {
  if ((transmitted_slots * latent_dim) % 2 != 0) throw ContractViolation("accounting: N_S * N_L must be even");
  TransmissionRecord r;
  r.analog_complex_symbols = static_cast<std::int64_t>(transmitted_slots * latent_dim / 2);
  r.source_bandwidth = static_cast<std::int64_t>(3 * height * width);
  r.bcr = bandwidth_ratio(r.analog_complex_symbols, 0, r.source_bandwidth);
  r.n_s = transmitted_slots;
  return r;
}

// ---------------------------------------------------------------------------
// Objectives

struct ValueAndGradient {
  double value = 0.0;
  std::vector<double> gradient;
};

/// ||G(y) - x||^2 averaged over pixels.
inline ValueAndGradient mse_value_grad(const GeneratorModel& model, const Image& target, const LatentCode& latent) {
  const auto trace = model.generate_traced(latent);
  require_same_shape(trace.image, target, "plain inversion");
  Image cot(target.height, target.width);
  const double inv = 1.0 / static_cast<double>(target.size());
  double value = 0.0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    const double d = trace.image.pixels[j] - target.pixels[j];
    value += d * d;
    cot.pixels[j] = 2.0 * d * inv;
  }
  return {value * inv, model.vjp(latent, trace, cot)};
}

/// L(G(PN(y) + n), x) for a fixed real-form noise realization n.
inline ValueAndGradient channel_aware_value_grad(const GeneratorModel& model, const ImageLoss& loss,
                                                 const LatentCode& latent, std::span<const double> noise,
                                                 double power_constraint) {
  const LatentCode received(latent.num_slots(), latent.latent_dim(),
                            channel_forward_with_noise(latent.flat(), noise, power_constraint));
  const auto trace = model.generate_traced(received);
  Image d_image;
  const double value = loss.value_and_grad(trace.image, d_image).total;
  const auto d_received = model.vjp(received, trace, d_image);
  return {value, power_normalize_vjp(latent.flat(), power_constraint, d_received)};
}

inline DifferentiableObjective make_mse_objective(const GeneratorModel& model, const Image& target) {
  const std::size_t ns = model.num_slots();
  const std::size_t nl = model.latent_dim();
  auto to_latent = [ns, nl](std::span<const double> y) {
    return LatentCode(ns, nl, std::vector<double>(y.begin(), y.end()));
  };
  return {
      [&model, target, to_latent](std::span<const double> y) { return mse(model.generate(to_latent(y)), target); },
      [&model, target, to_latent](std::span<const double> y) {
        return mse_value_grad(model, target, to_latent(y)).gradient;
      }};
}

inline DifferentiableObjective make_channel_aware_objective(const GeneratorModel& model,
                                                            std::shared_ptr<const ImageLoss> loss,
                                                            std::vector<double> noise, double power_constraint) {
  const std::size_t ns = model.num_slots();
  const std::size_t nl = model.latent_dim();
  auto to_latent = [ns, nl](std::span<const double> y) {
    return LatentCode(ns, nl, std::vector<double>(y.begin(), y.end()));
  };
  return {[&model, loss, noise, power_constraint, to_latent](std::span<const double> y) {
            const auto received = to_latent(channel_forward_with_noise(y, noise, power_constraint));
            return loss->value(model.generate(received)).total;
          },
          [&model, loss, noise, power_constraint, to_latent](std::span<const double> y) {
            return channel_aware_value_grad(model, *loss, to_latent(y), noise, power_constraint).gradient;
          }};
}

// ---------------------------------------------------------------------------
// Optimizer driver

/// Evaluates value and gradient at iterate `iteration`.
using IterateObjective = std::function<ValueAndGradient(const LatentCode&, std::size_t iteration)>;

/**
 * Runs `iters` Adam steps from `start`, evaluating every iterate (including
 * the start and the final one) and returning the best evaluated latent.
 * Coordinates with trainable[i] == false are never modified.
 */
inline InversionResult run_adam(const LatentCode& start, std::size_t iters, const AdamConfig& adam,
                                const IterateObjective& objective, const std::vector<bool>& trainable = {},
                                double divergence_factor = 10.0, std::size_t divergence_patience = 50) {
  if (!trainable.empty() && trainable.size() != start.size()) {
    throw ContractViolation("run_adam: trainable mask length mismatch");
  }
  InversionResult result;
  LatentCode current = start;
  OptimizerState state(start.size(), adam);
  std::size_t above = 0;
  for (std::size_t t = 0; t <= iters; ++t) {
    auto eval = objective(current, t);
    if (!std::isfinite(eval.value) || !all_finite(eval.gradient)) {
      throw DivergenceError("inversion: non-finite objective", t);
    }
    result.loss_history.push_back(eval.value);
    if (t == 0) result.initial_loss = eval.value;
    if (eval.value < result.best_loss || t == 0) {
      result.best_loss = eval.value;
      result.best_iteration = t;
      result.latent = current;
    }
    above = eval.value > divergence_factor * result.initial_loss ? above + 1 : 0;
    if (above >= divergence_patience) throw DivergenceError("inversion: loss stayed above its divergence bound", t);
    if (t == iters) break;

    if (!trainable.empty()) {
      for (std::size_t i = 0; i < eval.gradient.size(); ++i) {
        if (!trainable[i]) eval.gradient[i] = 0.0;
      }
    }
    auto values = current.values();
    adam_step(state, values, eval.gradient);
    if (!trainable.empty()) {
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (!trainable[i]) values[i] = current.values()[i];
      }
    }
    if (!all_finite(values)) throw DivergenceError("inversion: non-finite iterate", t);
    current = LatentCode(start.num_slots(), start.latent_dim(), std::move(values));
  }
  return result;
}

namespace stream_tag {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTrainingNoise = 2;
inline constexpr std::uint64_t kPlain = 3;
inline constexpr std::uint64_t kRefine = 4;
inline constexpr std::uint64_t kChannel = 5;
inline constexpr std::uint64_t kIndexLink = 6;
inline constexpr std::uint64_t kFallback = 7;
inline constexpr std::uint64_t kStage2 = 8;
}  // namespace stream_tag

inline LatentCode initial_latent(const GeneratorModel& model, const InversionConfig& cfg, const RngStream& rng) {
  if (cfg.init) {
    if (cfg.init->num_slots() != model.num_slots() || cfg.init->latent_dim() != model.latent_dim()) {
      throw ContractViolation("inversion: initial latent does not match the model");
    }
    return *cfg.init;
  }
  auto init_rng = rng.derive(stream_tag::kInit);
  return LatentCode::sample_prior(model.num_slots(), model.latent_dim(), init_rng);
}

/// Minimizes the pixel MSE ||G(y) - x||^2 with no channel in the loop.
inline InversionResult plain_invert(const GeneratorModel& model, const Image& target, const InversionConfig& cfg,
                                    const RngStream& rng) {
  cfg.validate();
  if (target.height != model.height() || target.width != model.width()) {
    throw ContractViolation("plain_invert: target shape does not match the model");
  }
  const auto start = initial_latent(model, cfg, rng);
  return run_adam(
      start, cfg.max_iters, cfg.adam,
      [&](const LatentCode& y, std::size_t) { return mse_value_grad(model, target, y); }, {},
      cfg.divergence_factor, cfg.divergence_patience);
}

/**
 * Minimizes L(G(A(y)), x) where A = C^{-1}(PN(C(y)) + n_A) and
 * n_A ~ CN(0, sigma2_hat I). With resample_noise_each_iter the noise is
 * redrawn at every iterate, otherwise one draw is reused throughout.
 */
inline InversionResult channel_aware_invert(const GeneratorModel& model, const Image& target, double sigma2_hat,
                                            const InversionConfig& cfg, const RngStream& rng,
                                            double power_constraint = 1.0) {
  cfg.validate();
  if (sigma2_hat < 0.0) throw ContractViolation("channel_aware_invert: sigma2_hat must be non-negative");
  if (target.height != model.height() || target.width != model.width()) {
    throw ContractViolation("channel_aware_invert: target shape does not match the model");
  }
  const ImageLoss loss(cfg.loss, target);
  const auto start = initial_latent(model, cfg, rng);
  auto noise_rng = rng.derive(stream_tag::kTrainingNoise);
  std::vector<double> noise = draw_channel_noise(start.size(), sigma2_hat, noise_rng);
  return run_adam(
      start, cfg.max_iters, cfg.adam,
      [&](const LatentCode& y, std::size_t t) {
        if (t > 0 && cfg.resample_noise_each_iter) noise = draw_channel_noise(y.size(), sigma2_hat, noise_rng);
        return channel_aware_value_grad(model, loss, y, noise, power_constraint);
      },
      {}, cfg.divergence_factor, cfg.divergence_patience);
}

struct TransmitResult {
  Image reconstruction;
  TransmissionRecord record;
  LatentCode transmitted_latent;  // pre-PN real form
  LatentCode received_latent;
};

/**
 * One uncached round: plain inversion, channel-aware refinement, PN + AWGN at
 * the actual channel SNR (sigma2_hat is only what the transmitter assumed),
 * then reconstruction at the receiver.
 */
inline TransmitResult transmit_cagi(const GeneratorModel& model, const Image& target, const ChannelConfig& channel,
                                    double sigma2_hat, const CagiConfig& cfg, const RngStream& rng) {
  const auto plain = plain_invert(model, target, cfg.plain, rng.derive(stream_tag::kPlain));
  InversionConfig refine_cfg = cfg.channel_aware;
  refine_cfg.init = plain.latent;
  const auto refined = channel_aware_invert(model, target, sigma2_hat, refine_cfg, rng.derive(stream_tag::kRefine),
                                            channel.power_constraint);

  const auto z = power_normalize(to_complex(refined.latent.flat()), channel.power_constraint);
  auto channel_rng = rng.derive(stream_tag::kChannel);
  const auto z_hat = channel.noiseless ? z : awgn(z, channel.sigma2(), channel_rng);
  LatentCode received(model.num_slots(), model.latent_dim(), from_complex(z_hat));

  TransmitResult out;
  out.reconstruction = model.generate(received);
  out.record = cagi_accounting(model.num_slots(), model.latent_dim(), model.height(), model.width());
  out.record.snr_db_actual = channel.snr_db;
  out.record.tx_energy = z.energy();
  out.record.metrics = evaluate_metrics(out.reconstruction, target);
  out.transmitted_latent = refined.latent;
  out.received_latent = std::move(received);
  return out;
}

}  // namespace cagi
