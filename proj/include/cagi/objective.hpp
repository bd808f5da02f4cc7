#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cagi/errors.hpp"
#include "cagi/generator.hpp"
#include "cagi/numerics.hpp"

namespace cagi {

/// u.v / (|u||v|), or 0 when either norm is below 1e-12.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ContractViolation("cosine_similarity: length mismatch");
  const double nu = std::sqrt(squared_norm(u));
  const double nv = std::sqrt(squared_norm(v));
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  return dot(u, v) / (nu * nv);
}

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw ContractViolation(std::string(what) + ": image shapes differ");
}

// ---------------------------------------------------------------------------
// Pixel losses and metrics

inline double l1_loss(const Image& a, const Image& b) {
  require_same_shape(a, b, "l1_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.pixels[i] - b.pixels[i]);
  return s / static_cast<double>(a.size());
}

/// d l1 / d a, with subgradient 0 at ties.
inline Image l1_loss_grad(const Image& a, const Image& b) {
  require_same_shape(a, b, "l1_loss");
  Image g(a.height, a.width);
  const double inv = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    g.pixels[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  return g;
}

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

inline constexpr double kPsnrCapDb = 100.0;

/// 10 log10(peak^2 / MSE), capped at 100 dB (zero MSE returns the cap).
inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  if (!(peak > 0.0)) throw ContractViolation("psnr: peak must be positive");
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / m));
}

struct MsSsimConfig {
  std::size_t scales = 3;
  std::size_t window = 7;
  double sigma = 1.5;
};

namespace detail {

struct SsimStats {
  double ssim = 0.0;
  double cs = 0.0;
};

// Gaussian-weighted (valid) SSIM over one channel plane.
inline SsimStats ssim_plane(std::span<const double> a, std::span<const double> b, std::size_t h, std::size_t w,
                            const std::vector<double>& kernel) {
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const std::size_t k = kernel.size();
  const std::size_t oh = h - k + 1;
  const std::size_t ow = w - k + 1;
  double ssim_sum = 0.0;
  double cs_sum = 0.0;
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double wgt = kernel[i] * kernel[j];
          const double va = a[(y + i) * w + x + j];
          const double vb = b[(y + i) * w + x + j];
          ma += wgt * va;
          mb += wgt * vb;
          saa += wgt * va * va;
          sbb += wgt * vb * vb;
          sab += wgt * va * vb;
        }
      }
      const double var_a = saa - ma * ma;
      const double var_b = sbb - mb * mb;
      const double cov = sab - ma * mb;
      const double cs = (2.0 * cov + c2) / (var_a + var_b + c2);
      const double lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
      cs_sum += cs;
      ssim_sum += lum * cs;
    }
  }
  const double n = static_cast<double>(oh * ow);
  return {ssim_sum / n, cs_sum / n};
}

inline std::vector<double> downsample2(std::span<const double> plane, std::size_t h, std::size_t w) {
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      out[y * ow + x] = 0.25 * (plane[2 * y * w + 2 * x] + plane[2 * y * w + 2 * x + 1] +
                                plane[(2 * y + 1) * w + 2 * x] + plane[(2 * y + 1) * w + 2 * x + 1]);
    }
  }
  return out;
}

}  // namespace detail

/**
 * Multi-scale SSIM (Wang et al. 2003) with the standard per-scale exponents
 * truncated to `scales` and renormalized. Negative per-scale terms are
 * clamped to zero so the result stays in [0, 1].
 */
inline double ms_ssim(const Image& a, const Image& b, const MsSsimConfig& cfg = {}) {
  require_same_shape(a, b, "ms_ssim");
  static constexpr std::array<double, 5> kWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  if (cfg.scales < 1 || cfg.scales > kWeights.size()) throw ConfigError("ms_ssim: scale count must be in [1, 5]");
  const std::size_t shrink = std::size_t{1} << (cfg.scales - 1);
  if (std::min(a.height, a.width) / shrink < cfg.window) {
    throw ConfigError("ms_ssim: image too small for " + std::to_string(cfg.scales) + " scales");
  }
  std::vector<double> kernel(cfg.window);
  double ksum = 0.0;
  for (std::size_t i = 0; i < cfg.window; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(cfg.window - 1) / 2.0;
    kernel[i] = std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
    ksum += kernel[i];
  }
  for (auto& v : kernel) v /= ksum;
  double wsum = 0.0;
  for (std::size_t s = 0; s < cfg.scales; ++s) wsum += kWeights[s];

  double result = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    std::size_t h = a.height;
    std::size_t w = a.width;
    std::vector<double> pa(a.pixels.begin() + c * a.plane(), a.pixels.begin() + (c + 1) * a.plane());
    std::vector<double> pb(b.pixels.begin() + c * b.plane(), b.pixels.begin() + (c + 1) * b.plane());
    double channel_value = 1.0;
    for (std::size_t s = 0; s < cfg.scales; ++s) {
      const auto stats = detail::ssim_plane(pa, pb, h, w, kernel);
      const double term = s + 1 == cfg.scales ? stats.ssim : stats.cs;
      channel_value *= std::pow(std::max(term, 0.0), kWeights[s] / wsum);
      if (s + 1 < cfg.scales) {
        pa = detail::downsample2(pa, h, w);
        pb = detail::downsample2(pb, h, w);
        h /= 2;
        w /= 2;
      }
    }
    result += channel_value;
  }
  return result / static_cast<double>(a.channels);
}

// ---------------------------------------------------------------------------
// Perceptual feature extractor (random, frozen, multi-scale)

struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), data(c * h * w, 0.0) {}
  std::size_t plane() const noexcept { return height * width; }
};

struct ExtractorTrace {
  std::vector<FeatureMap> inputs;    // per layer input (image, then pooled features)
  std::vector<FeatureMap> features;  // per layer tanh output
};

/**
 * Stack of `scales` 3x3 convolution + tanh layers with 2x average pooling
 * between them. Weights are drawn from a seeded stream and frozen. The
 * activations at each layer serve as the perceptual features.
 */
class PerceptualExtractor {
 public:
  explicit PerceptualExtractor(std::uint64_t seed, std::size_t channels = 8, std::size_t scales = 3)
      : channels_(channels), scales_(scales) {
    if (channels == 0 || scales == 0) throw ConfigError("perceptual extractor: empty architecture");
    RngStream rng(seed, 0x70657263);
    for (std::size_t s = 0; s < scales; ++s) {
      const std::size_t in = s == 0 ? 3 : channels;
      Layer layer;
      layer.in = in;
      layer.weights = rng.normal_vector(channels * in * 9, 1.5 / std::sqrt(static_cast<double>(in * 9)));
      layer.bias = rng.normal_vector(channels, 0.1);
      layers_.push_back(std::move(layer));
    }
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t scales() const noexcept { return scales_; }

  void check_input(const Image& img) const {
    const std::size_t shrink = std::size_t{1} << (scales_ - 1);
    if (img.height % shrink != 0 || img.width % shrink != 0 || img.height < shrink || img.width < shrink) {
      throw ContractViolation("perceptual extractor: image size must be divisible by 2^(scales-1)");
    }
  }

  ExtractorTrace forward(const Image& img) const {
    check_input(img);
    ExtractorTrace trace;
    FeatureMap input(3, img.height, img.width);
    input.data = img.pixels;
    for (std::size_t s = 0; s < scales_; ++s) {
      if (s > 0) input = avg_pool(trace.features.back());
      trace.inputs.push_back(input);
      trace.features.push_back(conv_tanh(layers_[s], input));
    }
    return trace;
  }

  /// Back-propagates feature cotangents (one per layer, same shapes) to the image.
  Image backward(const ExtractorTrace& trace, std::vector<FeatureMap> d_features) const {
    if (d_features.size() != scales_) throw ContractViolation("perceptual extractor: cotangent layer count");
    FeatureMap d_input;
    for (std::size_t s = scales_; s-- > 0;) {
      auto& d_post = d_features[s];
      const auto& f = trace.features[s];
      for (std::size_t j = 0; j < d_post.data.size(); ++j) d_post.data[j] *= 1.0 - f.data[j] * f.data[j];
      d_input = conv_input_grad(layers_[s], trace.inputs[s], d_post);
      if (s > 0) {
        auto& prev = d_features[s - 1];
        const std::size_t w = prev.width;
        for (std::size_t c = 0; c < d_input.channels; ++c) {
          for (std::size_t y = 0; y < d_input.height; ++y) {
            for (std::size_t x = 0; x < d_input.width; ++x) {
              const double g = 0.25 * d_input.data[(c * d_input.height + y) * d_input.width + x];
              double* base = &prev.data[c * prev.plane()];
              base[(2 * y) * w + 2 * x] += g;
              base[(2 * y) * w + 2 * x + 1] += g;
              base[(2 * y + 1) * w + 2 * x] += g;
              base[(2 * y + 1) * w + 2 * x + 1] += g;
            }
          }
        }
      }
    }
    Image out(d_input.height, d_input.width);
    out.pixels = std::move(d_input.data);
    return out;
  }

  std::vector<FeatureMap> zero_cotangent(const ExtractorTrace& trace) const {
    std::vector<FeatureMap> out;
    for (const auto& f : trace.features) out.emplace_back(f.channels, f.height, f.width);
    return out;
  }

 private:
  struct Layer {
    std::size_t in = 0;
    std::vector<double> weights;  // out x in x 3 x 3
    std::vector<double> bias;
  };

  static FeatureMap avg_pool(const FeatureMap& f) {
    FeatureMap out(f.channels, f.height / 2, f.width / 2);
    for (std::size_t c = 0; c < f.channels; ++c) {
      for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
          const double* base = &f.data[c * f.plane()];
          out.data[(c * out.height + y) * out.width + x] =
              0.25 * (base[2 * y * f.width + 2 * x] + base[2 * y * f.width + 2 * x + 1] +
                      base[(2 * y + 1) * f.width + 2 * x] + base[(2 * y + 1) * f.width + 2 * x + 1]);
        }
      }
    }
    return out;
  }

  FeatureMap conv_tanh(const Layer& layer, const FeatureMap& in) const {
    const std::size_t h = in.height;
    const std::size_t w = in.width;
    FeatureMap out(channels_, h, w);
    for (std::size_t o = 0; o < channels_; ++o) {
      double* dst = &out.data[o * h * w];
      std::fill(dst, dst + h * w, layer.bias[o]);
      for (std::size_t i = 0; i < layer.in; ++i) {
        const double* src = &in.data[i * h * w];
        const double* k = &layer.weights[(o * layer.in + i) * 9];
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ky = 0; ky < 3; ++ky) {
              const auto yy = static_cast<std::ptrdiff_t>(y) + ky - 1;
              if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const auto xx = static_cast<std::ptrdiff_t>(x) + kx - 1;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                acc += k[ky * 3 + kx] * src[yy * static_cast<std::ptrdiff_t>(w) + xx];
              }
            }
            dst[y * w + x] += acc;
          }
        }
      }
      for (std::size_t j = 0; j < h * w; ++j) dst[j] = std::tanh(dst[j]);
    }
    return out;
  }

  FeatureMap conv_input_grad(const Layer& layer, const FeatureMap& in, const FeatureMap& d_out) const {
    const std::size_t h = in.height;
    const std::size_t w = in.width;
    FeatureMap d_in(layer.in, h, w);
    for (std::size_t o = 0; o < channels_; ++o) {
      const double* g = &d_out.data[o * h * w];
      for (std::size_t i = 0; i < layer.in; ++i) {
        double* dst = &d_in.data[i * h * w];
        const double* k = &layer.weights[(o * layer.in + i) * 9];
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double gv = g[y * w + x];
            if (gv == 0.0) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const auto yy = static_cast<std::ptrdiff_t>(y) + ky - 1;
              if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const auto xx = static_cast<std::ptrdiff_t>(x) + kx - 1;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                dst[yy * static_cast<std::ptrdiff_t>(w) + xx] += k[ky * 3 + kx] * gv;
              }
            }
          }
        }
      }
    }
    return d_in;
  }

  std::size_t channels_;
  std::size_t scales_;
  std::vector<Layer> layers_;
};

namespace detail {

inline constexpr double kFeatureNormEps = 1e-10;

// Mean L1 between channel-normalized feature maps, averaged over layers.
// Accumulates d/d(features of a) into `d_a` when non-null.
inline double normalized_feature_l1(const ExtractorTrace& a, const ExtractorTrace& b, double weight,
                                    std::vector<FeatureMap>* d_a) {
  double total = 0.0;
  const double layers = static_cast<double>(a.features.size());
  for (std::size_t s = 0; s < a.features.size(); ++s) {
    const auto& fa = a.features[s];
    const auto& fb = b.features[s];
    const std::size_t plane = fa.plane();
    const double count = static_cast<double>(fa.data.size());
    double layer_sum = 0.0;
    std::vector<double> ua(fa.channels), ub(fa.channels), gu(fa.channels);
    for (std::size_t p = 0; p < plane; ++p) {
      double na = kFeatureNormEps, nb = kFeatureNormEps;
      for (std::size_t c = 0; c < fa.channels; ++c) {
        na += fa.data[c * plane + p] * fa.data[c * plane + p];
        nb += fb.data[c * plane + p] * fb.data[c * plane + p];
      }
      const double ra = std::sqrt(na);
      const double rb = std::sqrt(nb);
      double proj = 0.0;
      for (std::size_t c = 0; c < fa.channels; ++c) {
        ua[c] = fa.data[c * plane + p] / ra;
        ub[c] = fb.data[c * plane + p] / rb;
        const double d = ua[c] - ub[c];
        layer_sum += std::abs(d);
        gu[c] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        proj += ua[c] * gu[c];
      }
      if (d_a != nullptr) {
        // u = f / r  ->  du^T g = (g - u (u.g)) / r
        const double scale = weight / (count * layers);
        auto& out = (*d_a)[s];
        for (std::size_t c = 0; c < fa.channels; ++c) {
          out.data[c * plane + p] += scale * (gu[c] - ua[c] * proj) / ra;
        }
      }
    }
    total += layer_sum / count;
  }
  return total / layers;
}

inline std::vector<double> pooled_features(const ExtractorTrace& t) {
  std::vector<double> out;
  for (const auto& f : t.features) {
    for (std::size_t c = 0; c < f.channels; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < f.plane(); ++p) s += f.data[c * f.plane() + p];
      out.push_back(s / static_cast<double>(f.plane()));
    }
  }
  return out;
}

}  // namespace detail

/// Perceptual distance proxy: mean L1 of channel-normalized features across scales.
inline double perceptual_proxy(const Image& a, const Image& b, const PerceptualExtractor& extractor) {
  require_same_shape(a, b, "perceptual_proxy");
  return detail::normalized_feature_l1(extractor.forward(a), extractor.forward(b), 1.0, nullptr);
}

// ---------------------------------------------------------------------------
// Task-loss plugins

struct TaskLossInput {
  const Image& generated;
  const Image& target;
  const ExtractorTrace& generated_features;
  const ExtractorTrace& target_features;
};

/// Either cotangent may be left empty when the plugin does not use that path.
struct TaskLossOutput {
  double value = 0.0;
  std::vector<FeatureMap> d_features;
  Image d_image;
};

class TaskLoss {
 public:
  virtual ~TaskLoss() = default;
  virtual std::string name() const = 0;
  /// Whether the plugin reads extractor features.
  virtual bool uses_features() const { return true; }
  virtual TaskLossOutput evaluate(const TaskLossInput& in, const PerceptualExtractor& extractor,
                                  bool with_gradient) const = 0;
};

/// 1 - cos(p_a, p_b) on already pooled feature vectors; in [0, 2].
inline double pooled_cosine_task_loss(std::span<const double> pooled_a, std::span<const double> pooled_b) {
  return 1.0 - cosine_similarity(pooled_a, pooled_b);
}

/// Identity-feature role: 1 - cosine of globally average-pooled extractor features.
class PooledCosineTaskLoss final : public TaskLoss {
 public:
  std::string name() const override { return "pooled_cosine"; }

  TaskLossOutput evaluate(const TaskLossInput& in, const PerceptualExtractor& extractor,
                          bool with_gradient) const override {
    const auto pa = detail::pooled_features(in.generated_features);
    const auto pb = detail::pooled_features(in.target_features);
    TaskLossOutput out;
    out.value = pooled_cosine_task_loss(pa, pb);
    if (!with_gradient) return out;
    out.d_features = extractor.zero_cotangent(in.generated_features);
    const double na = std::sqrt(squared_norm(pa));
    const double nb = std::sqrt(squared_norm(pb));
    if (na < 1e-12 || nb < 1e-12) return out;
    const double cos = dot(pa, pb) / (na * nb);
    std::size_t k = 0;
    for (auto& f : out.d_features) {
      const double inv_plane = 1.0 / static_cast<double>(f.plane());
      for (std::size_t c = 0; c < f.channels; ++c, ++k) {
        const double d_pooled = -(pb[k] / (na * nb) - cos * pa[k] / (na * na));
        for (std::size_t p = 0; p < f.plane(); ++p) f.data[c * f.plane() + p] = d_pooled * inv_plane;
      }
    }
    return out;
  }
};

class NoTaskLoss final : public TaskLoss {
 public:
  std::string name() const override { return "none"; }
  bool uses_features() const override { return false; }
  TaskLossOutput evaluate(const TaskLossInput&, const PerceptualExtractor&, bool) const override { return {}; }
};

inline std::shared_ptr<const TaskLoss> make_task_loss(std::string_view name) {
  if (name == "pooled_cosine") return std::make_shared<PooledCosineTaskLoss>();
  if (name == "none") return std::make_shared<NoTaskLoss>();
  throw ConfigError("unknown task loss plugin '" + std::string(name) + "'");
}

inline double task_loss(const Image& a, const Image& b, std::string_view plugin, const PerceptualExtractor& extractor) {
  require_same_shape(a, b, "task_loss");
  const auto task = make_task_loss(plugin);
  if (!task->uses_features()) return task->evaluate({a, b, {}, {}}, extractor, false).value;
  const auto ta = extractor.forward(a);
  const auto tb = extractor.forward(b);
  return task->evaluate({a, b, ta, tb}, extractor, false).value;
}

// ---------------------------------------------------------------------------
// Combined objective

struct LossConfig {
  double lambda1 = 0.1;  // L1
  double lambda2 = 1.0;  // perceptual proxy
  double lambda3 = 0.1;  // task
  std::uint64_t perceptual_seed = 2024;
  std::size_t perceptual_channels = 8;
  std::size_t perceptual_scales = 3;
  std::string task_plugin = "pooled_cosine";

  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw ConfigError("loss: weights must be non-negative");
    if (lambda1 == 0.0 && lambda2 == 0.0 && lambda3 == 0.0) throw ConfigError("loss: at least one weight must be positive");
  }
};

struct LossBreakdown {
  double total = 0.0;
  double l1 = 0.0;
  double perceptual = 0.0;
  double task = 0.0;
};

/**
 * Weighted L1 + perceptual + task loss against a fixed target. Target
 * features are computed once at construction.
 */
class ImageLoss {
 public:
  ImageLoss(const LossConfig& cfg, const Image& target,
            std::shared_ptr<const PerceptualExtractor> extractor = nullptr,
            std::shared_ptr<const TaskLoss> task = nullptr)
      : cfg_(cfg), target_(target), extractor_(std::move(extractor)), task_(std::move(task)) {
    cfg_.validate();
    if (!task_) task_ = make_task_loss(cfg_.task_plugin);
    if (!extractor_) {
      extractor_ = std::make_shared<PerceptualExtractor>(cfg_.perceptual_seed, cfg_.perceptual_channels,
                                                         cfg_.perceptual_scales);
    }
    if (needs_features()) target_trace_ = extractor_->forward(target_);
  }

  const Image& target() const noexcept { return target_; }
  const LossConfig& config() const noexcept { return cfg_; }

  LossBreakdown value(const Image& generated) const { return evaluate(generated, nullptr); }

  LossBreakdown value_and_grad(const Image& generated, Image& gradient) const {
    return evaluate(generated, &gradient);
  }

 private:
  bool needs_features() const {
    return cfg_.lambda2 > 0.0 || (cfg_.lambda3 > 0.0 && task_->uses_features());
  }

  LossBreakdown evaluate(const Image& generated, Image* gradient) const {
    require_same_shape(generated, target_, "combined_loss");
    LossBreakdown out;
    out.l1 = l1_loss(generated, target_);
    if (gradient != nullptr) {
      *gradient = l1_loss_grad(generated, target_);
      for (auto& g : gradient->pixels) g *= cfg_.lambda1;
    }

    ExtractorTrace gen_trace;
    std::vector<FeatureMap> d_features;
    const bool features = needs_features();
    if (features) {
      gen_trace = extractor_->forward(generated);
      if (gradient != nullptr) d_features = extractor_->zero_cotangent(gen_trace);
    }
    if (cfg_.lambda2 > 0.0) {
      out.perceptual = detail::normalized_feature_l1(gen_trace, target_trace_, cfg_.lambda2,
                                                     gradient != nullptr ? &d_features : nullptr);
    }
    if (cfg_.lambda3 > 0.0) {
      const TaskLossInput in{generated, target_, gen_trace, target_trace_};
      auto task = task_->evaluate(in, *extractor_, gradient != nullptr);
      out.task = task.value;
      if (gradient != nullptr) {
        for (std::size_t s = 0; s < task.d_features.size(); ++s) {
          for (std::size_t j = 0; j < task.d_features[s].data.size(); ++j) {
            d_features[s].data[j] += cfg_.lambda3 * task.d_features[s].data[j];
          }
        }
        for (std::size_t j = 0; j < task.d_image.pixels.size(); ++j) {
          gradient->pixels[j] += cfg_.lambda3 * task.d_image.pixels[j];
        }
      }
    }
    if (gradient != nullptr && features) {
      const auto back = extractor_->backward(gen_trace, std::move(d_features));
      for (std::size_t j = 0; j < back.pixels.size(); ++j) gradient->pixels[j] += back.pixels[j];
    }
    out.total = cfg_.lambda1 * out.l1 + cfg_.lambda2 * out.perceptual + cfg_.lambda3 * out.task;
    return out;
  }

  LossConfig cfg_;
  Image target_;
  std::shared_ptr<const PerceptualExtractor> extractor_;
  std::shared_ptr<const TaskLoss> task_;
  ExtractorTrace target_trace_;
};

inline double combined_loss(const Image& generated, const Image& target, const LossConfig& cfg) {
  return ImageLoss(cfg, target).value(generated).total;
}

}  // namespace cagi
