#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "cagi/cdc_pipeline.hpp"

using namespace cagi;

namespace {

struct Fixture {
  GeneratorModel model = build_toy_generator(4, 8, 16, 16, 3);
  LatentCode truth;
  Image target;

  explicit Fixture(std::uint64_t seed = 1) {
    RngStream r(seed, 77);
    truth = LatentCode(4, 8, r.normal_vector(32, std::sqrt(0.5)));
    target = model.generate(truth);
  }
};

CacheConfig cache_config(double gamma = 0.9, std::size_t capacity = 4) {
  CacheConfig c;
  c.num_slots = 4;
  c.latent_dim = 8;
  c.capacity = capacity;
  c.thresholds.assign(4, gamma);
  return c;
}

CdcConfig quick_config(std::size_t iters = 15, std::size_t stage2 = 15) {
  CdcConfig c;
  c.plain.max_iters = iters;
  c.two_stage.stage1.max_iters = iters;
  c.two_stage.stage2_iters = stage2;
  return c;
}

std::vector<double> slot_copy(const LatentCode& y, std::size_t i) { return {y.slot(i).begin(), y.slot(i).end()}; }

}  // namespace

TEST(PowerCheck, FlagsViolations) {
  const auto z = power_normalize(to_complex(std::vector<double>{1.0, 2.0, 3.0, 4.0}), 1.0);
  EXPECT_NO_THROW(check_power_constraint(z, 1.0));
  EXPECT_THROW(check_power_constraint(z, 1.1), NumericalError);
}

TEST(CachedForward, EmptyCacheZeroNoiseIsPowerNormalization) {
  const Fixture f;
  const SemanticCache cache(cache_config());
  RngStream r(1, 0);
  const auto out = cached_forward(f.truth, cache, 0.0, 1.0, r);
  EXPECT_EQ(out.latent.values(), power_normalize_real(f.truth.flat(), 1.0));
  EXPECT_EQ(out.reduction.n_s(), 4u);
}

TEST(CachedForward, FrozenSlotsCarryCachedVectors) {
  const Fixture f;
  SemanticCache cache(cache_config());
  auto stored = slot_copy(f.truth, 2);
  stored[0] += 0.01;
  cache.insert(2, stored, 1.0);
  RngStream r(1, 0);
  const auto out = cached_forward(f.truth, cache, 0.1, 1.0, r);
  EXPECT_TRUE(out.reduction.frozen(2));
  EXPECT_EQ(slot_copy(out.latent, 2), stored);
  EXPECT_EQ(out.reduction.n_s(), 3u);
}

TEST(StraightThrough, EmptyCacheEqualsChannelAwareObjective) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Fixture f(seed);
    const SemanticCache cache(cache_config());
    const ImageLoss loss(LossConfig{}, f.target);
    RngStream r(seed, 5);
    const LatentCode y(4, 8, r.normal_vector(32, 0.7));
    const auto noise = draw_channel_noise(32, 0.4, r);
    const auto reduction = cache.reduce(y);
    const auto st = straight_through_value_grad(f.model, loss, y, reduction, cache, noise, 1.0);
    const auto ca = channel_aware_value_grad(f.model, loss, y, noise, 1.0);
    EXPECT_NEAR(st.value, ca.value, 1e-12);
    ASSERT_EQ(st.gradient.size(), ca.gradient.size());
    for (std::size_t i = 0; i < ca.gradient.size(); ++i) EXPECT_NEAR(st.gradient[i], ca.gradient[i], 1e-12);
  }
}

TEST(StraightThrough, GradientCoversAllCoordinatesWithHits) {
  const Fixture f;
  SemanticCache cache(cache_config());
  cache.insert(1, f.truth.slot(1), 2.0);
  cache.insert(3, f.truth.slot(3), 2.0);
  RngStream r(2, 0);
  const auto vg = straight_through_objective(f.model, f.target, f.truth, cache, 0.2, LossConfig{}, r);
  ASSERT_EQ(vg.gradient.size(), 32u);
  for (const std::size_t slot : {std::size_t{1}, std::size_t{3}}) {
    double norm = 0.0;
    for (std::size_t d = 0; d < 8; ++d) norm += std::abs(vg.gradient[slot * 8 + d]);
    EXPECT_GT(norm, 0.0);
  }
}

TEST(StraightThrough, ValueMatchesRecomputationAtForwardOutput) {
  const Fixture f;
  SemanticCache cache(cache_config());
  cache.insert(0, f.truth.slot(0), 2.0);
  RngStream a(3, 0);
  RngStream b(3, 0);
  const auto vg = straight_through_objective(f.model, f.target, f.truth, cache, 0.3, LossConfig{}, a);
  const auto fwd = cached_forward(f.truth, cache, 0.3, 1.0, b);
  EXPECT_NEAR(vg.value, combined_loss(f.model.generate(fwd.latent), f.target, LossConfig{}), 1e-12);
}

TEST(StraightThrough, GradientMatchesFrozenCorrectionSurrogate) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Fixture f(seed);
    RngStream r(seed, 9);
    const LatentCode y(4, 8, r.normal_vector(32, 0.7));
    SemanticCache cache(cache_config());
    for (const std::size_t slot : {std::size_t{0}, std::size_t{2}}) {
      auto v = slot_copy(y, slot);
      for (auto& x : v) x += 0.05 * r.normal();
      cache.insert(slot, v, 3.0);
    }
    const auto reduction = cache.reduce(y);
    ASSERT_EQ(reduction.hits(), 2u);
    auto loss = std::make_shared<const ImageLoss>(LossConfig{}, f.target);
    const auto obj = make_straight_through_objective(f.model, loss, cache, reduction, y,
                                                     draw_channel_noise(reduction.n_s() * 8, 0.3, r), 1.0);
    EXPECT_LT(max_relative_error(obj.gradient_fn(y.flat()), finite_diff_grad(obj, y.flat())), 1e-3) << seed;
  }
}

TEST(TwoStage, EmptyCacheWithoutStageTwoEqualsChannelAware) {
  const Fixture f;
  const SemanticCache cache(cache_config());
  TwoStageConfig cfg;
  cfg.stage1.max_iters = 20;
  cfg.stage2_iters = 0;
  const RngStream rng(4, 0);
  const auto ts = two_stage_invert(f.model, f.target, cache, 0.3, cfg, rng);
  const auto ca = channel_aware_invert(f.model, f.target, 0.3, cfg.stage1, rng);
  EXPECT_EQ(ts.latent, ca.latent);
  EXPECT_EQ(ts.reduction.n_s(), 4u);
  EXPECT_FALSE(ts.stage2);
}

TEST(TwoStage, AllHitsLeavesStageOneLatent) {
  const Fixture f;
  SemanticCache cache(cache_config(0.0));
  for (std::size_t i = 0; i < 4; ++i) cache.insert(i, f.truth.slot(i), 5.0);
  TwoStageConfig cfg;
  cfg.stage1.max_iters = 0;
  cfg.stage1.init = f.truth;
  const auto ts = two_stage_invert(f.model, f.target, cache, 0.3, cfg, RngStream(5, 0));
  EXPECT_EQ(ts.reduction.hits(), 4u);
  EXPECT_EQ(ts.latent, ts.stage1.latent);
}

TEST(TwoStage, FrozenHitSlotsAreBitIdentical) {
  const Fixture f;
  SemanticCache cache(cache_config(0.0));
  cache.insert(1, f.truth.slot(1), 5.0);
  TwoStageConfig cfg;
  cfg.stage1.max_iters = 10;
  cfg.stage2_iters = 25;
  const auto ts = two_stage_invert(f.model, f.target, cache, 0.3, cfg, RngStream(6, 0), 1.0, 0.0);
  ASSERT_TRUE(ts.reduction.frozen(1));
  ASSERT_TRUE(ts.stage2);
  EXPECT_EQ(slot_copy(ts.latent, 1), slot_copy(ts.stage1.latent, 1));
  EXPECT_NE(slot_copy(ts.latent, 0), slot_copy(ts.stage1.latent, 0));
}

TEST(TwoStage, RefinementCompensatesApproximateHits) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Fixture f(seed);
    SemanticCache cache(cache_config(0.9));
    RngStream r(seed, 11);
    for (const std::size_t slot : {std::size_t{1}, std::size_t{2}}) {
      // Entry at cosine 0.96 to the true vector: truth + orthogonal component.
      auto t = slot_copy(f.truth, slot);
      auto o = r.normal_vector(8);
      const double proj = dot(o, t) / squared_norm(t);
      for (std::size_t d = 0; d < 8; ++d) o[d] -= proj * t[d];
      const double scale = std::sqrt(squared_norm(t) / squared_norm(o)) * std::tan(std::acos(0.96));
      for (std::size_t d = 0; d < 8; ++d) t[d] += scale * o[d];
      EXPECT_NEAR(cosine_similarity(t, f.truth.slot(slot)), 0.96, 1e-9);
      cache.insert(slot, t, 5.0);
    }
    TwoStageConfig cfg;
    cfg.stage1.max_iters = 150;
    cfg.stage1.init = f.truth;
    cfg.stage2_iters = 100;
    const auto ts = two_stage_invert(f.model, f.target, cache, 0.0, cfg, RngStream(seed, 12));
    ASSERT_GE(ts.reduction.hits(), 1u);
    const ImageLoss loss(cfg.stage1.loss, f.target);
    const auto noise = std::vector<double>(ts.reduction.n_s() * 8, 0.0);
    const double naive =
        straight_through_value_grad(f.model, loss, ts.stage1.latent, ts.reduction, cache, noise, 1.0).value;
    const double refined =
        straight_through_value_grad(f.model, loss, ts.latent, ts.reduction, cache, noise, 1.0).value;
    EXPECT_LE(refined, naive) << seed;
  }
}

TEST(CdcTransmit, FirstRoundMatchesUncachedAccounting) {
  const Fixture f;
  SemanticCache tx(cache_config());
  SemanticCache rx(cache_config());
  const ChannelConfig ch{3.0, 1.0, false};
  const auto out = cdc_transmit(f.model, f.target, tx, rx, ch, ch.sigma2(), IndexLinkConfig{}, quick_config(),
                                RngStream(7, 0));
  EXPECT_EQ(out.record.hits, 0u);
  EXPECT_EQ(out.record.digital_symbols, 0);
  EXPECT_EQ(out.record.bcr, cagi_accounting(4, 8, 16, 16).bcr);
  EXPECT_NEAR(out.record.tx_energy, 16.0, 16.0 * 1e-9);
  EXPECT_TRUE(structurally_equal(tx, rx));
  EXPECT_EQ(tx.total_entries(), 4u);
}

TEST(CdcTransmit, RepeatedImageAtLowerSnrIsIndexOnly) {
  const Fixture f;
  SemanticCache tx(cache_config(1.0 - 1e-9));
  SemanticCache rx(cache_config(1.0 - 1e-9));
  const RngStream rng(8, 0);
  const double sigma2_hat = snr_to_sigma2(5.0, 1.0);
  const auto first = cdc_transmit(f.model, f.target, tx, rx, ChannelConfig{5.0, 1.0, false}, sigma2_hat,
                                  IndexLinkConfig{}, quick_config(15, 0), rng);
  const auto second = cdc_transmit(f.model, f.target, tx, rx, ChannelConfig{2.0, 1.0, false}, sigma2_hat,
                                   IndexLinkConfig{}, quick_config(15, 0), rng);
  EXPECT_EQ(second.record.hits, 4u);
  EXPECT_EQ(second.record.upgrades, 0u);
  EXPECT_EQ(second.record.analog_complex_symbols, 0);
  EXPECT_EQ(second.record.digital_symbols, index_symbol_cost(4, IndexLinkConfig{}, 4, 4));
  EXPECT_EQ(first.record.analog_complex_symbols, 16);
  EXPECT_EQ(second.record.tx_energy, 0.0);
  EXPECT_TRUE(structurally_equal(tx, rx));
}

TEST(CdcTransmit, ReplayedImageHitCountNonDecreasing) {
  const Fixture f;
  SemanticCache tx(cache_config(0.99));
  SemanticCache rx(cache_config(0.99));
  const RngStream rng(9, 0);
  const ChannelConfig ch{4.0, 1.0, false};
  std::size_t prev = 0;
  for (int round = 0; round < 4; ++round) {
    const auto out = cdc_transmit(f.model, f.target, tx, rx, ch, ch.sigma2(), IndexLinkConfig{}, quick_config(15, 0), rng);
    EXPECT_GE(out.record.hits, prev);
    prev = out.record.hits;
    const auto free = cagi_accounting(4, 8, 16, 16);
    const std::int64_t upgrade_overhead = index_symbol_cost(static_cast<std::int64_t>(out.record.upgrades),
                                                            IndexLinkConfig{}, 4, 4);
    EXPECT_LE(out.record.analog_complex_symbols + out.record.digital_symbols,
              free.analog_complex_symbols + upgrade_overhead);
  }
}

TEST(CdcTransmit, ErrorFreeLinkRestoresWithoutFallback) {
  RngStream src(10, 0);
  SemanticCache tx(cache_config(0.5));
  SemanticCache rx(cache_config(0.5));
  const Fixture f;
  for (std::uint64_t round = 0; round < 6; ++round) {
    const LatentCode y(4, 8, src.normal_vector(32, std::sqrt(0.5)));
    const ChannelConfig ch{src.uniform(0.0, 5.0), 1.0, false};
    const auto out = cdc_transmit(f.model, f.model.generate(y), tx, rx, ch, ch.sigma2(), IndexLinkConfig{},
                                  quick_config(8), RngStream(10, round + 1));
    EXPECT_EQ(out.record.fallbacks, 0u);
    EXPECT_TRUE(structurally_equal(tx, rx)) << "round " << round;
    for (std::size_t i = 0; i < 4; ++i) EXPECT_LE(tx.size(i), 4u);
  }
}

TEST(CdcTransmit, NoisyLinkRecordsFallbacks) {
  RngStream src(11, 0);
  SemanticCache tx(cache_config(0.3, 3));
  SemanticCache rx(cache_config(0.3, 3));
  const Fixture f;
  IndexLinkConfig link;
  link.bit_error_rate = 0.3;
  std::size_t fallbacks = 0;
  for (std::uint64_t round = 0; round < 8; ++round) {
    const LatentCode y(4, 8, src.normal_vector(32, std::sqrt(0.5)));
    const ChannelConfig ch{src.uniform(0.0, 5.0), 1.0, false};
    const auto out = cdc_transmit(f.model, f.model.generate(y), tx, rx, ch, ch.sigma2(), link, quick_config(5),
                                  RngStream(11, round + 1));
    fallbacks += out.record.fallbacks;
  }
  EXPECT_GT(fallbacks, 0u);
}

TEST(CdcTransmit, MismatchedCachesAreContractViolation) {
  const Fixture f;
  SemanticCache tx(cache_config());
  SemanticCache rx(cache_config(0.9, 5));
  EXPECT_THROW(cdc_transmit(f.model, f.target, tx, rx, ChannelConfig{}, 1.0, IndexLinkConfig{}, quick_config(),
                            RngStream(1, 0)),
               ContractViolation);
}
