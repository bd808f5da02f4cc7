#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cagi/generator.hpp"

using namespace cagi;

namespace {

GeneratorModel small_model(std::uint64_t seed = 1) { return build_toy_generator(4, 8, 16, 16, seed); }

LatentCode random_latent(const GeneratorModel& m, std::uint64_t seed) {
  RngStream r(seed, 0);
  return LatentCode::sample_prior(m.num_slots(), m.latent_dim(), r);
}

double inner(const Image& a, const Image& b) { return dot(a.pixels, b.pixels); }

}  // namespace

TEST(LatentCode, RejectsBadShapes) {
  EXPECT_THROW(LatentCode(0, 4, {}), ContractViolation);
  EXPECT_THROW(LatentCode(2, 2, std::vector<double>(3)), ContractViolation);
  EXPECT_THROW(LatentCode(1, 3, std::vector<double>(3)), ContractViolation);
  EXPECT_THROW(LatentCode(1, 2, {1.0, std::nan("")}), ContractViolation);
}

TEST(LatentCode, SlotViewsAreContiguous) {
  LatentCode y(3, 2, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(y.slot(1)[0], 2.0);
  EXPECT_EQ(y.slot(2)[1], 5.0);
}

TEST(Generator, SameSeedSameModel) {
  const auto a = small_model(3);
  const auto b = small_model(3);
  const auto y = random_latent(a, 1);
  EXPECT_EQ(a.generate(y), b.generate(y));
}

TEST(Generator, DifferentSeedsDifferentImages) {
  const auto a = small_model(3);
  const auto b = small_model(4);
  const auto y = random_latent(a, 1);
  EXPECT_NE(a.generate(y), b.generate(y));
}

TEST(Generator, ZeroLatentGivesFixedBiasImage) {
  const auto m = small_model();
  const auto z = LatentCode::zeros(4, 8);
  EXPECT_EQ(m.generate(z), m.generate(z));
  EXPECT_EQ(m.generate(z), small_model().generate(z));
}

TEST(Generator, OutputsLieInUnitInterval) {
  const auto m = small_model();
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto y = random_latent(m, s);
    for (auto& v : y.flat()) v *= 10.0;
    for (const double p : m.generate(y).pixels) {
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
    }
  }
}

TEST(Generator, ContinuousUnderSmallPerturbation) {
  const auto m = small_model();
  const auto y = random_latent(m, 2);
  auto y2 = y;
  for (auto& v : y2.flat()) v += 1e-6;
  const auto a = m.generate(y);
  const auto b = m.generate(y2);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.pixels[i] - b.pixels[i]));
  EXPECT_LT(diff, 1e-4);
}

TEST(Generator, RejectsMismatchedLatent) {
  const auto m = small_model();
  EXPECT_THROW(m.generate(LatentCode::zeros(4, 6)), ContractViolation);
  EXPECT_THROW(m.generate_vjp(LatentCode::zeros(4, 8), Image(8, 8)), ContractViolation);
}

TEST(Generator, InvalidConfigIsConfigError) {
  GeneratorConfig c;
  c.num_slots = 1;
  EXPECT_THROW(GeneratorModel{c}, ConfigError);
  c.num_slots = 4;
  c.coarse_factor = 3;
  EXPECT_THROW(GeneratorModel{c}, ConfigError);
  c.coarse_factor = 2;
  c.num_slots = 3;
  c.latent_dim = 3;
  EXPECT_THROW(GeneratorModel{c}, ConfigError);
}

TEST(Generator, MasksPartitionTheImage) {
  const auto m = build_toy_generator(8, 4, 32, 32, 1);
  std::vector<int> cover(32 * 32, 0);
  for (std::size_t i = 1; i < 8; ++i) {
    const auto mask = m.mask(i);
    for (std::size_t p = 0; p < mask.size(); ++p) cover[p] += mask[p];
  }
  for (const int c : cover) EXPECT_EQ(c, 1);
  const auto global = m.mask(0);
  for (const bool b : global) EXPECT_TRUE(b);
}

TEST(Generator, DisentangledRegionsAreBitIdentical) {
  const auto m = build_toy_generator(8, 4, 32, 32, 5);
  RngStream r(5, 9);
  for (int trial = 0; trial < 10; ++trial) {
    auto y = LatentCode::sample_prior(8, 4, r);
    const std::size_t slot = 1 + r.uniform_int(7);
    const auto before = m.generate(y);
    for (auto& v : y.slot(slot)) v = r.normal();
    const auto after = m.generate(y);
    const auto mask = m.mask(slot);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < mask.size(); ++p) {
        if (!mask[p]) {
          EXPECT_EQ(before.pixels[c * mask.size() + p], after.pixels[c * mask.size() + p]);
        }
      }
    }
  }
}

TEST(GeneratorVjp, ZeroCotangentGivesZero) {
  const auto m = small_model();
  const auto g = m.generate_vjp(random_latent(m, 1), Image(16, 16));
  ASSERT_EQ(g.size(), 32u);
  for (const double v : g) EXPECT_EQ(v, 0.0);
}

TEST(GeneratorVjp, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto m = small_model(seed);
    const auto y = random_latent(m, seed + 100);
    RngStream r(seed, 7);
    Image cot(16, 16);
    cot.pixels = r.normal_vector(cot.size());
    auto f = [&](std::span<const double> v) {
      return inner(m.generate(LatentCode(4, 8, std::vector<double>(v.begin(), v.end()))), cot);
    };
    const auto numeric = finite_diff_grad(f, y.flat());
    const auto analytic = m.generate_vjp(y, cot);
    EXPECT_LT(max_relative_error(analytic, numeric), 1e-3) << "seed " << seed;
  }
}

TEST(GeneratorVjp, RegionCotangentTouchesOnlyOwnAndGlobalSlot) {
  const auto m = small_model();
  const auto y = random_latent(m, 3);
  for (std::size_t slot = 1; slot < 4; ++slot) {
    Image cot(16, 16);
    const auto mask = m.mask(slot);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < mask.size(); ++p) {
        if (mask[p]) cot.pixels[c * mask.size() + p] = 1.0;
      }
    }
    const auto g = m.generate_vjp(y, cot);
    for (std::size_t i = 0; i < 4; ++i) {
      double norm = 0.0;
      for (std::size_t d = 0; d < 8; ++d) norm += std::abs(g[i * 8 + d]);
      if (i == 0 || i == slot) {
        EXPECT_GT(norm, 0.0);
      } else {
        EXPECT_EQ(norm, 0.0) << "slot " << slot << " leaked into " << i;
      }
    }
  }
}
