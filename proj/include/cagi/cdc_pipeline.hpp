#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cagi/cdc.hpp"
#include "cagi/channel.hpp"
#include "cagi/errors.hpp"
#include "cagi/generator.hpp"
#include "cagi/inversion.hpp"
#include "cagi/numerics.hpp"
#include "cagi/objective.hpp"

namespace cagi {

struct TwoStageConfig {
  InversionConfig stage1{};
  std::size_t stage2_iters = 100;
  bool freeze_hits = true;
};

/// Plain inversion budget plus the two-stage cached refinement.
struct CdcConfig {
  InversionConfig plain{};
  TwoStageConfig two_stage{};
};

inline void check_power_constraint(const ComplexSignal& z, double power_constraint, double rel_tol = 1e-9) {
  const double target = static_cast<double>(z.k()) * power_constraint;
  if (std::abs(z.energy() - target) > rel_tol * target) {
    throw NumericalError("transmit: signal energy violates the power constraint");
  }
}

/// Copies the kept slots of `latent` into reduction.reduced_vectors.
inline void refresh_kept_vectors(ReductionResult& reduction, const LatentCode& latent) {
  reduction.reduced_vectors.clear();
  for (const auto i : reduction.kept_slots) {
    const auto v = latent.slot(i);
    reduction.reduced_vectors.insert(reduction.reduced_vectors.end(), v.begin(), v.end());
  }
}

/**
 * Ã(y) for a fixed reduction and real-form noise on the kept portion: kept
 * slots get PN over the kept subset plus noise, frozen hit slots the cached
 * vector. With nothing kept, no power normalization takes place.
 */
inline LatentCode cached_forward_with_noise(const LatentCode& latent, const ReductionResult& reduction,
                                            const SemanticCache& cache, std::span<const double> kept_noise,
                                            double power_constraint) {
  const std::size_t nl = latent.latent_dim();
  std::vector<double> out(latent.size(), 0.0);
  if (reduction.n_s() > 0) {
    std::vector<double> kept;
    kept.reserve(reduction.n_s() * nl);
    for (const auto i : reduction.kept_slots) {
      const auto v = latent.slot(i);
      kept.insert(kept.end(), v.begin(), v.end());
    }
    const auto received = channel_forward_with_noise(kept, kept_noise, power_constraint);
    for (std::size_t k = 0; k < reduction.kept_slots.size(); ++k) {
      std::copy_n(received.begin() + static_cast<std::ptrdiff_t>(k * nl), nl,
                  out.begin() + static_cast<std::ptrdiff_t>(reduction.kept_slots[k] * nl));
    }
  } else if (!kept_noise.empty()) {
    throw ContractViolation("cached forward: noise supplied for an empty kept set");
  }
  for (std::size_t i = 0; i < latent.num_slots(); ++i) {
    if (!reduction.frozen(i)) continue;
    const auto& c = cache.entries(i)[reduction.positions[i]].vector;
    std::copy(c.begin(), c.end(), out.begin() + static_cast<std::ptrdiff_t>(i * nl));
  }
  return LatentCode(latent.num_slots(), nl, std::move(out));
}

struct CachedForwardResult {
  LatentCode latent;
  ReductionResult reduction;
};

/// Dry-run reduction, then Ã(y) with n_A ~ CN(0, sigma2_hat I) on the kept portion.
inline CachedForwardResult cached_forward(const LatentCode& latent, const SemanticCache& cache, double sigma2_hat,
                                          double power_constraint, RngStream& rng) {
  auto reduction = cache.reduce(latent);
  const auto noise = draw_channel_noise(reduction.n_s() * latent.latent_dim(), sigma2_hat, rng);
  auto out = cached_forward_with_noise(latent, reduction, cache, noise, power_constraint);
  return {std::move(out), std::move(reduction)};
}

/**
 * L(G(Ã(y)), x) and its straight-through gradient. Kept slots are
 * differentiated exactly through PN and the additive noise; each frozen hit
 * slot is treated as y_i + sg(c_i - y_i), so its image-side gradient reaches
 * y_i unchanged.
 */
inline ValueAndGradient straight_through_value_grad(const GeneratorModel& model, const ImageLoss& loss,
                                                    const LatentCode& latent, const ReductionResult& reduction,
                                                    const SemanticCache& cache, std::span<const double> kept_noise,
                                                    double power_constraint) {
  const std::size_t nl = latent.latent_dim();
  const auto forward = cached_forward_with_noise(latent, reduction, cache, kept_noise, power_constraint);
  const auto trace = model.generate_traced(forward);
  Image d_image;
  const double value = loss.value_and_grad(trace.image, d_image).total;
  auto d_forward = model.vjp(forward, trace, d_image);

  std::vector<double> grad = d_forward;
  if (reduction.n_s() > 0) {
    std::vector<double> kept;
    std::vector<double> d_kept;
    for (const auto i : reduction.kept_slots) {
      const auto v = latent.slot(i);
      kept.insert(kept.end(), v.begin(), v.end());
      d_kept.insert(d_kept.end(), d_forward.begin() + static_cast<std::ptrdiff_t>(i * nl),
                    d_forward.begin() + static_cast<std::ptrdiff_t>((i + 1) * nl));
    }
    const auto d_y = power_normalize_vjp(kept, power_constraint, d_kept);
    for (std::size_t k = 0; k < reduction.kept_slots.size(); ++k) {
      std::copy_n(d_y.begin() + static_cast<std::ptrdiff_t>(k * nl), nl,
                  grad.begin() + static_cast<std::ptrdiff_t>(reduction.kept_slots[k] * nl));
    }
  }
  return {value, std::move(grad)};
}

/// Reduces dry-run, draws the kept-portion noise from `rng`, and evaluates the straight-through objective.
inline ValueAndGradient straight_through_objective(const GeneratorModel& model, const Image& target,
                                                   const LatentCode& latent, const SemanticCache& cache,
                                                   double sigma2_hat, const LossConfig& loss_cfg, RngStream& rng,
                                                   double power_constraint = 1.0) {
  const ImageLoss loss(loss_cfg, target);
  const auto reduction = cache.reduce(latent);
  const auto noise = draw_channel_noise(reduction.n_s() * latent.latent_dim(), sigma2_hat, rng);
  return straight_through_value_grad(model, loss, latent, reduction, cache, noise, power_constraint);
}

/**
 * Differentiable surrogate whose exact gradient is the straight-through one:
 * hit slots are shifted by the correction (c_i - anchor_i) frozen at `anchor`.
 * Used to check the straight-through gradient by finite differences.
 */
inline DifferentiableObjective make_straight_through_objective(const GeneratorModel& model,
                                                               std::shared_ptr<const ImageLoss> loss,
                                                               const SemanticCache& cache, ReductionResult reduction,
                                                               const LatentCode& anchor, std::vector<double> noise,
                                                               double power_constraint) {
  const std::size_t ns = anchor.num_slots();
  const std::size_t nl = anchor.latent_dim();
  std::vector<double> correction(anchor.size(), 0.0);
  for (std::size_t i = 0; i < ns; ++i) {
    if (!reduction.frozen(i)) continue;
    const auto& c = cache.entries(i)[reduction.positions[i]].vector;
    for (std::size_t d = 0; d < nl; ++d) correction[i * nl + d] = c[d] - anchor.slot(i)[d];
  }
  auto value = [&model, &cache, loss, reduction, correction, noise, power_constraint, ns,
                nl](std::span<const double> y) {
    const LatentCode latent(ns, nl, std::vector<double>(y.begin(), y.end()));
    auto forward = cached_forward_with_noise(latent, reduction, cache, noise, power_constraint);
    auto values = forward.values();
    for (std::size_t i = 0; i < ns; ++i) {
      if (!reduction.frozen(i)) continue;
      for (std::size_t d = 0; d < nl; ++d) values[i * nl + d] = y[i * nl + d] + correction[i * nl + d];
    }
    return loss->value(model.generate(LatentCode(ns, nl, std::move(values)))).total;
  };
  auto gradient = [&model, &cache, loss, reduction, noise, power_constraint, ns, nl](std::span<const double> y) {
    const LatentCode latent(ns, nl, std::vector<double>(y.begin(), y.end()));
    return straight_through_value_grad(model, *loss, latent, reduction, cache, noise, power_constraint).gradient;
  };
  return {value, gradient};
}

struct TwoStageResult {
  LatentCode latent;
  ReductionResult reduction;  // hit mask fixed after stage 1; kept vectors taken from `latent`
  InversionResult stage1;
  std::optional<InversionResult> stage2;
};

/**
 * Stage 1 inverts without the cache. One dry-run reduction then fixes the
 * hit mask, and stage 2 refines through the straight-through objective with
 * frozen hit slots held bit-identical.
 */
inline TwoStageResult two_stage_invert(const GeneratorModel& model, const Image& target, const SemanticCache& cache,
                                       double sigma2_hat, const TwoStageConfig& cfg, const RngStream& rng,
                                       double power_constraint = 1.0,
                                       std::optional<double> upgrade_snr_db = std::nullopt) {
  if (cache.num_slots() != model.num_slots() || cache.latent_dim() != model.latent_dim()) {
    throw ContractViolation("two_stage_invert: cache dimensions do not match the model");
  }
  TwoStageResult out;
  out.stage1 = channel_aware_invert(model, target, sigma2_hat, cfg.stage1, rng, power_constraint);
  out.latent = out.stage1.latent;
  out.reduction = cache.reduce(out.latent, upgrade_snr_db);
  if (cfg.stage2_iters == 0 || out.reduction.n_s() == 0) return out;

  const ImageLoss loss(cfg.stage1.loss, target);
  const std::size_t nl = model.latent_dim();
  std::vector<bool> trainable(out.latent.size(), true);
  if (cfg.freeze_hits) {
    for (std::size_t i = 0; i < model.num_slots(); ++i) {
      if (!out.reduction.frozen(i)) continue;
      std::fill_n(trainable.begin() + static_cast<std::ptrdiff_t>(i * nl), nl, false);
    }
  }
  auto noise_rng = rng.derive(stream_tag::kStage2);
  const std::size_t kept_len = out.reduction.n_s() * nl;
  auto noise = draw_channel_noise(kept_len, sigma2_hat, noise_rng);
  const auto& reduction = out.reduction;
  out.stage2 = run_adam(
      out.latent, cfg.stage2_iters, cfg.stage1.adam,
      [&](const LatentCode& y, std::size_t t) {
        if (t > 0 && cfg.stage1.resample_noise_each_iter) noise = draw_channel_noise(kept_len, sigma2_hat, noise_rng);
        return straight_through_value_grad(model, loss, y, reduction, cache, noise, power_constraint);
      },
      trainable, cfg.stage1.divergence_factor, cfg.stage1.divergence_patience);
  out.latent = out.stage2->latent;
  refresh_kept_vectors(out.reduction, out.latent);
  return out;
}

struct CdcTransmitResult {
  Image reconstruction;
  TransmissionRecord record;
  LatentCode transmitted_latent;  // optimized latent before reduction
  LatentCode received_latent;     // receiver's restored latent
  ReductionResult reduction;
};

/**
 * One cached round. The transmitter inverts, reduces against tx_cache, sends
 * kept vectors over the AWGN channel and hit indices over the digital link,
 * then both sides replay the same cache updates: one commit stamping the
 * accessed entries, followed by an insert per miss and an upgrade per
 * upgraded hit, in slot order. The transmitter stores what it sent and the
 * receiver what it received.
 */
inline CdcTransmitResult cdc_transmit(const GeneratorModel& model, const Image& target, SemanticCache& tx_cache,
                                      SemanticCache& rx_cache, const ChannelConfig& channel, double sigma2_hat,
                                      const IndexLinkConfig& link, const CdcConfig& cfg, const RngStream& rng) {
  link.validate();
  if (tx_cache.num_slots() != rx_cache.num_slots() || tx_cache.latent_dim() != rx_cache.latent_dim() ||
      tx_cache.capacity() != rx_cache.capacity()) {
    throw ContractViolation("cdc_transmit: transmitter and receiver caches differ in shape");
  }
  const std::size_t ns = model.num_slots();
  const std::size_t nl = model.latent_dim();
  const double snr = channel.snr_db;

  const auto plain = plain_invert(model, target, cfg.plain, rng.derive(stream_tag::kPlain));
  TwoStageConfig ts = cfg.two_stage;
  ts.stage1.init = plain.latent;
  auto staged = two_stage_invert(model, target, tx_cache, sigma2_hat, ts, rng.derive(stream_tag::kRefine),
                                 channel.power_constraint, snr);
  const ReductionResult& reduction = staged.reduction;

  CdcTransmitResult out;
  TransmissionRecord& rec = out.record;
  std::vector<double> sent;
  std::vector<double> received;
  if (reduction.n_s() > 0) {
    const auto z = power_normalize(to_complex(reduction.reduced_vectors), channel.power_constraint);
    check_power_constraint(z, channel.power_constraint);
    auto channel_rng = rng.derive(stream_tag::kChannel);
    const auto z_hat = channel.noiseless ? z : awgn(z, channel.sigma2(), channel_rng);
    sent = from_complex(z);
    received = from_complex(z_hat);
    rec.tx_energy = z.energy();
  }

  auto link_rng = rng.derive(stream_tag::kIndexLink);
  const auto decoded = index_link_transmit(reduction.indices_sent, link, tx_cache.index_bits(), link_rng);

  auto fallback_rng = rng.derive(stream_tag::kFallback);
  auto restored = rx_cache.restore(reduction, received, decoded, fallback_rng);

  // Transmitter bookkeeping.
  tx_cache.commit(reduction);
  for (std::size_t k = 0; k < reduction.kept_slots.size(); ++k) {
    const std::size_t i = reduction.kept_slots[k];
    const std::span<const double> v(sent.data() + k * nl, nl);
    if (reduction.upgrade_mask[i]) {
      tx_cache.upgrade_at(i, reduction.positions[i], v, snr);
    } else {
      tx_cache.insert(i, v, snr);
    }
  }

  // Receiver mirror, driven only by what it decoded.
  std::vector<std::pair<std::size_t, std::size_t>> accessed;
  std::vector<std::optional<std::size_t>> decoded_pos(ns);
  std::size_t next = 0;
  for (std::size_t i = 0; i < ns; ++i) {
    if (!reduction.hit_mask[i]) continue;
    decoded_pos[i] = rx_cache.resolve(i, decoded[next++]);
    if (decoded_pos[i]) accessed.emplace_back(i, *decoded_pos[i]);
  }
  rx_cache.touch(accessed);
  for (std::size_t k = 0; k < reduction.kept_slots.size(); ++k) {
    const std::size_t i = reduction.kept_slots[k];
    const std::span<const double> v(received.data() + k * nl, nl);
    if (!reduction.upgrade_mask[i]) {
      rx_cache.insert(i, v, snr);
    } else if (decoded_pos[i] && snr >= rx_cache.entries(i)[*decoded_pos[i]].snr_tag) {
      rx_cache.upgrade_at(i, *decoded_pos[i], v, snr);
    } else {
      rx_cache.tick();
    }
  }

  out.reconstruction = model.generate(restored.latent);
  rec.analog_complex_symbols = static_cast<std::int64_t>(reduction.n_s() * nl / 2);
  rec.digital_symbols = index_symbol_cost(static_cast<std::int64_t>(reduction.indices_sent.size()), link,
                                          tx_cache.capacity(), ns);
  rec.source_bandwidth = static_cast<std::int64_t>(model.source_bandwidth());
  rec.bcr = bandwidth_ratio(rec.analog_complex_symbols, rec.digital_symbols, rec.source_bandwidth);
  rec.snr_db_actual = snr;
  rec.metrics = evaluate_metrics(out.reconstruction, target);
  rec.hit_mask = reduction.hit_mask;
  rec.indices_sent = reduction.indices_sent;
  rec.n_s = reduction.n_s();
  rec.hits = reduction.hits();
  rec.upgrades = reduction.upgrades();
  rec.fallbacks = restored.fallbacks + restored.empty_fallbacks;

  out.transmitted_latent = staged.latent;
  out.received_latent = std::move(restored.latent);
  out.reduction = std::move(staged.reduction);
  return out;
}

}  // namespace cagi
