#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cagi/errors.hpp"
#include "cagi/numerics.hpp"

namespace cagi {

/// Structured latent: num_slots semantic vectors of latent_dim reals, stored flat.
class LatentCode {
 public:
  LatentCode() = default;

  LatentCode(std::size_t num_slots, std::size_t latent_dim, std::vector<double> values)
      : num_slots_(num_slots), latent_dim_(latent_dim), values_(std::move(values)) {
    if (num_slots_ == 0 || latent_dim_ == 0) throw ContractViolation("LatentCode: empty dimensions");
    if (values_.size() != num_slots_ * latent_dim_) throw ContractViolation("LatentCode: value count != N_S * N_L");
    if (values_.size() % 2 != 0) throw ContractViolation("LatentCode: N_S * N_L must be even");
    if (!all_finite(values_)) throw ContractViolation("LatentCode: non-finite entry");
  }

  static LatentCode zeros(std::size_t num_slots, std::size_t latent_dim) {
    return LatentCode(num_slots, latent_dim, std::vector<double>(num_slots * latent_dim, 0.0));
  }

  /// Standard-normal prior sample.
  static LatentCode sample_prior(std::size_t num_slots, std::size_t latent_dim, RngStream& rng) {
    return LatentCode(num_slots, latent_dim, rng.normal_vector(num_slots * latent_dim));
  }

  std::size_t num_slots() const noexcept { return num_slots_; }
  std::size_t latent_dim() const noexcept { return latent_dim_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<const double> flat() const noexcept { return values_; }
  std::span<double> flat() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  std::span<const double> slot(std::size_t i) const { return flat().subspan(i * latent_dim_, latent_dim_); }
  std::span<double> slot(std::size_t i) { return flat().subspan(i * latent_dim_, latent_dim_); }

  friend bool operator==(const LatentCode&, const LatentCode&) = default;

 private:
  std::size_t num_slots_ = 0;
  std::size_t latent_dim_ = 0;
  std::vector<double> values_;
};

/// Channel-major 3 x H x W array. Also used for image-shaped cotangents.
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), pixels(channels * h * w, fill) {}

  std::size_t size() const noexcept { return pixels.size(); }
  std::size_t plane() const noexcept { return height * width; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

struct GeneratorConfig {
  std::size_t num_slots = 8;
  std::size_t latent_dim = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t hidden_dim = 0;  // 0 -> latent_dim
  std::size_t coarse_factor = 2;  // slot-0 field resolution divisor
  double global_amplitude = 0.1;
  double input_gain = 0.5;
  double output_gain = 1.5;
  std::uint64_t seed = 1;

  std::size_t effective_hidden() const { return hidden_dim == 0 ? latent_dim : hidden_dim; }
};

/// Forward activations kept for one vector-Jacobian product.
struct GeneratorTrace {
  Image image;
  std::vector<std::vector<double>> hidden;  // tanh outputs per slot
};

/**
 * Compositional stand-in for a pretrained semantic generator.
 *
 * Slots 1..N_S-1 own the cells of a rectangular grid over the image; slot i
 * feeds a two-layer tanh map whose outputs land only on pixels of cell i.
 * Slot 0 drives a low-resolution global field, upsampled and scaled by
 * `global_amplitude`. Pixels are sigmoid(bias + regional + global).
 * Parameters are drawn once from `seed` and never change.
 */
class GeneratorModel {
 public:
  explicit GeneratorModel(const GeneratorConfig& cfg) : cfg_(cfg) {
    validate();
    build_masks();
    build_parameters();
  }

  const GeneratorConfig& config() const noexcept { return cfg_; }
  std::size_t num_slots() const noexcept { return cfg_.num_slots; }
  std::size_t latent_dim() const noexcept { return cfg_.latent_dim; }
  std::size_t height() const noexcept { return cfg_.height; }
  std::size_t width() const noexcept { return cfg_.width; }
  std::size_t source_bandwidth() const noexcept { return 3 * cfg_.height * cfg_.width; }

  /// Owning slot (>= 1) of pixel (y, x).
  std::size_t region_of(std::size_t y, std::size_t x) const { return region_of_[y * cfg_.width + x]; }

  /// Mask of slot i over H x W. Slot 0 covers the whole image.
  std::vector<bool> mask(std::size_t slot) const {
    std::vector<bool> m(cfg_.height * cfg_.width, slot == 0);
    if (slot == 0) return m;
    for (const auto p : regions_.at(slot)) m[p] = true;
    return m;
  }

  Image generate(const LatentCode& latent) const { return generate_traced(latent).image; }

  GeneratorTrace generate_traced(const LatentCode& latent) const {
    check_latent(latent);
    const std::size_t hd = cfg_.effective_hidden();
    const std::size_t plane = cfg_.height * cfg_.width;
    GeneratorTrace trace;
    trace.hidden.resize(cfg_.num_slots);
    std::vector<double> pre = bias_;

    for (std::size_t i = 0; i < cfg_.num_slots; ++i) {
      const auto& p = slots_[i];
      auto& h = trace.hidden[i];
      h.resize(hd);
      const auto y = latent.slot(i);
      for (std::size_t r = 0; r < hd; ++r) {
        double a = p.b1[r];
        const double* row = &p.w1[r * cfg_.latent_dim];
        for (std::size_t c = 0; c < cfg_.latent_dim; ++c) a += row[c] * y[c];
        h[r] = std::tanh(a);
      }
    }

    // global coarse field first, then the regional contribution
    {
      const std::size_t ch = cfg_.height / cfg_.coarse_factor;
      const std::size_t cw = cfg_.width / cfg_.coarse_factor;
      const auto coarse = matvec(slots_[0].w2, trace.hidden[0], 3 * ch * cw);
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t yy = 0; yy < cfg_.height; ++yy) {
          for (std::size_t xx = 0; xx < cfg_.width; ++xx) {
            const double g = coarse[(c * ch + yy / cfg_.coarse_factor) * cw + xx / cfg_.coarse_factor];
            pre[c * plane + yy * cfg_.width + xx] += cfg_.global_amplitude * g;
          }
        }
      }
    }
    for (std::size_t i = 1; i < cfg_.num_slots; ++i) {
      const auto& region = regions_[i];
      const auto out = matvec(slots_[i].w2, trace.hidden[i], 3 * region.size());
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t q = 0; q < region.size(); ++q) pre[c * plane + region[q]] += out[c * region.size() + q];
      }
    }

    trace.image = Image(cfg_.height, cfg_.width);
    for (std::size_t j = 0; j < pre.size(); ++j) trace.image.pixels[j] = 1.0 / (1.0 + std::exp(-pre[j]));
    return trace;
  }

  /// J^T cotangent at `latent`.
  std::vector<double> generate_vjp(const LatentCode& latent, const Image& cotangent) const {
    return vjp(latent, generate_traced(latent), cotangent);
  }

  /// J^T cotangent reusing a trace produced by generate_traced(latent).
  std::vector<double> vjp(const LatentCode& latent, const GeneratorTrace& trace, const Image& cotangent) const {
    check_latent(latent);
    if (!cotangent.same_shape(trace.image)) throw ContractViolation("generate_vjp: cotangent shape mismatch");
    const std::size_t hd = cfg_.effective_hidden();
    const std::size_t plane = cfg_.height * cfg_.width;

    std::vector<double> d_pre(cotangent.size());
    for (std::size_t j = 0; j < d_pre.size(); ++j) {
      const double s = trace.image.pixels[j];
      d_pre[j] = cotangent.pixels[j] * s * (1.0 - s);
    }

    std::vector<double> grad(latent.size(), 0.0);
    for (std::size_t i = 0; i < cfg_.num_slots; ++i) {
      std::vector<double> d_out;
      if (i == 0) {
        const std::size_t ch = cfg_.height / cfg_.coarse_factor;
        const std::size_t cw = cfg_.width / cfg_.coarse_factor;
        d_out.assign(3 * ch * cw, 0.0);
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t yy = 0; yy < cfg_.height; ++yy) {
            for (std::size_t xx = 0; xx < cfg_.width; ++xx) {
              d_out[(c * ch + yy / cfg_.coarse_factor) * cw + xx / cfg_.coarse_factor] +=
                  cfg_.global_amplitude * d_pre[c * plane + yy * cfg_.width + xx];
            }
          }
        }
      } else {
        const auto& region = regions_[i];
        d_out.resize(3 * region.size());
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t q = 0; q < region.size(); ++q) d_out[c * region.size() + q] = d_pre[c * plane + region[q]];
        }
      }

      const auto& p = slots_[i];
      const auto& h = trace.hidden[i];
      std::vector<double> d_a(hd, 0.0);
      for (std::size_t o = 0; o < d_out.size(); ++o) {
        const double g = d_out[o];
        if (g == 0.0) continue;
        const double* row = &p.w2[o * hd];
        for (std::size_t r = 0; r < hd; ++r) d_a[r] += row[r] * g;
      }
      for (std::size_t r = 0; r < hd; ++r) d_a[r] *= 1.0 - h[r] * h[r];
      auto g_slot = std::span<double>(grad).subspan(i * cfg_.latent_dim, cfg_.latent_dim);
      for (std::size_t r = 0; r < hd; ++r) {
        const double* row = &p.w1[r * cfg_.latent_dim];
        for (std::size_t c = 0; c < cfg_.latent_dim; ++c) g_slot[c] += row[c] * d_a[r];
      }
    }
    return grad;
  }

 private:
  struct SlotParams {
    std::vector<double> w1;  // hidden x latent_dim
    std::vector<double> b1;  // hidden
    std::vector<double> w2;  // outputs x hidden
  };

  void validate() const {
    if (cfg_.num_slots < 2) throw ConfigError("generator: need at least 2 slots");
    if (cfg_.latent_dim == 0 || cfg_.height == 0 || cfg_.width == 0) throw ConfigError("generator: empty dimension");
    if ((cfg_.num_slots * cfg_.latent_dim) % 2 != 0) throw ConfigError("generator: N_S * N_L must be even");
    if (cfg_.num_slots - 1 > cfg_.height * cfg_.width) {
      throw ConfigError("generator: more regional slots than pixels");
    }
    if (cfg_.coarse_factor == 0 || cfg_.height % cfg_.coarse_factor != 0 || cfg_.width % cfg_.coarse_factor != 0) {
      throw ConfigError("generator: coarse factor must divide the image size");
    }
  }

  void build_masks() {
    const std::size_t n = cfg_.num_slots - 1;
    const std::size_t h = cfg_.height;
    const std::size_t w = cfg_.width;
    const auto aspect_rows = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n * h) / static_cast<double>(w))));
    const std::size_t min_rows = (n + w - 1) / w;
    const std::size_t rows = std::max(min_rows, std::clamp<std::size_t>(aspect_rows, 1, std::min(h, n)));

    region_of_.assign(h * w, 0);
    regions_.assign(cfg_.num_slots, {});
    std::size_t slot = 1;
    for (std::size_t b = 0; b < rows; ++b) {
      const std::size_t cells = n / rows + (b < n % rows ? 1 : 0);
      const std::size_t y0 = b * h / rows;
      const std::size_t y1 = (b + 1) * h / rows;
      for (std::size_t c = 0; c < cells; ++c, ++slot) {
        const std::size_t x0 = c * w / cells;
        const std::size_t x1 = (c + 1) * w / cells;
        for (std::size_t yy = y0; yy < y1; ++yy) {
          for (std::size_t xx = x0; xx < x1; ++xx) {
            region_of_[yy * w + xx] = slot;
            regions_[slot].push_back(yy * w + xx);
          }
        }
      }
    }
    for (std::size_t i = 1; i < cfg_.num_slots; ++i) {
      if (regions_[i].empty()) throw ConfigError("generator: grid produced an empty region");
    }
  }

  void build_parameters() {
    RngStream rng(cfg_.seed, 0x67656e);
    const std::size_t hd = cfg_.effective_hidden();
    slots_.resize(cfg_.num_slots);
    for (std::size_t i = 0; i < cfg_.num_slots; ++i) {
      const std::size_t outputs = i == 0 ? 3 * (cfg_.height / cfg_.coarse_factor) * (cfg_.width / cfg_.coarse_factor)
                                         : 3 * regions_[i].size();
      slots_[i].w1 = scaled_orthonormal(hd, cfg_.latent_dim, cfg_.input_gain, rng);
      slots_[i].b1 = rng.normal_vector(hd, 0.1);
      slots_[i].w2 = scaled_orthonormal(outputs, hd, cfg_.output_gain, rng);
    }
    bias_ = rng.normal_vector(3 * cfg_.height * cfg_.width, 0.25);
  }

  /// rows x cols matrix with orthonormal columns (or rows, if rows < cols), scaled so each output has
  /// roughly `gain` times the spread of one input.
  static std::vector<double> scaled_orthonormal(std::size_t rows, std::size_t cols, double gain, RngStream& rng) {
    const bool tall = rows >= cols;
    const std::size_t n = tall ? cols : rows;  // vectors to orthonormalize
    const std::size_t len = tall ? rows : cols;
    std::vector<std::vector<double>> basis;
    basis.reserve(n);
    while (basis.size() < n) {
      auto v = rng.normal_vector(len);
      for (const auto& b : basis) {
        const double proj = dot(v, b);
        for (std::size_t k = 0; k < len; ++k) v[k] -= proj * b[k];
      }
      const double norm = std::sqrt(squared_norm(v));
      if (norm < 1e-8) continue;
      for (auto& x : v) x /= norm;
      basis.push_back(std::move(v));
    }
    const double scale = gain * std::sqrt(static_cast<double>(rows) / static_cast<double>(std::min(rows, cols)));
    std::vector<double> m(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] = scale * (tall ? basis[c][r] : basis[r][c]);
    }
    return m;
  }

  void check_latent(const LatentCode& latent) const {
    if (latent.num_slots() != cfg_.num_slots || latent.latent_dim() != cfg_.latent_dim) {
      throw ContractViolation("generator: latent dimensions do not match the model");
    }
  }

  std::vector<double> matvec(const std::vector<double>& m, const std::vector<double>& v, std::size_t rows) const {
    const std::size_t cols = v.size();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = &m[r * cols];
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += row[c] * v[c];
      out[r] = s;
    }
    return out;
  }

  GeneratorConfig cfg_;
  std::vector<std::size_t> region_of_;
  std::vector<std::vector<std::size_t>> regions_;
  std::vector<SlotParams> slots_;
  std::vector<double> bias_;
};

inline GeneratorModel build_toy_generator(std::size_t num_slots, std::size_t latent_dim, std::size_t height,
                                          std::size_t width, std::uint64_t seed) {
  GeneratorConfig cfg;
  cfg.num_slots = num_slots;
  cfg.latent_dim = latent_dim;
  cfg.height = height;
  cfg.width = width;
  cfg.seed = seed;
  return GeneratorModel(cfg);
}

inline Image generate(const GeneratorModel& model, const LatentCode& latent) { return model.generate(latent); }

inline std::vector<double> generate_vjp(const GeneratorModel& model, const LatentCode& latent, const Image& cotangent) {
  return model.generate_vjp(latent, cotangent);
}

}  // namespace cagi
