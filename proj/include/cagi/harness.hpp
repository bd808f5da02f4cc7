#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cagi/cdc.hpp"
#include "cagi/cdc_pipeline.hpp"
#include "cagi/channel.hpp"
#include "cagi/errors.hpp"
#include "cagi/generator.hpp"
#include "cagi/inversion.hpp"
#include "cagi/numerics.hpp"
#include "cagi/objective.hpp"

namespace cagi {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

enum class SnrMode { fixed, uniform };

struct ChannelSettings {
  SnrMode mode = SnrMode::uniform;
  double snr_db = 5.0;  // fixed mode
  double snr_min_db = 0.0;
  double snr_max_db = 5.0;
  double power_constraint = 1.0;
  bool noiseless = false;
  std::optional<double> assumed_snr_db;  // transmitter estimate; empty means perfect knowledge
};

struct SourceSpec {
  std::size_t rounds = 100;
  std::size_t pool_size = 10;
  double reuse_prob = 0.7;
  double latent_stddev = 0.7071067811865476;  // per-entry scale matching PN at unit power
};

struct CacheSettings {
  bool enabled = true;
  std::size_t capacity = 16;
  std::string thresholds = "";  // gamma_A, gamma_B, a file path, or empty for `uniform_threshold`
  double uniform_threshold = 0.8;
  double alpha = 0.5;
};

struct ExperimentConfig {
  GeneratorConfig generator{};
  ChannelSettings channel{};
  InversionConfig plain{};
  TwoStageConfig two_stage{};
  CacheSettings cache{};
  IndexLinkConfig link{};
  SourceSpec source{};
  std::uint64_t seed = 1;

  ExperimentConfig() {
    generator.num_slots = 8;
    generator.latent_dim = 256;
  }

  /// Resolves thresholds and checks every field; throws ConfigError.
  std::vector<double> resolve_thresholds() const {
    if (cache.thresholds.empty()) {
      if (!(cache.uniform_threshold >= 0.0 && cache.uniform_threshold <= 1.0)) {
        throw ConfigError("config: cache.uniform_threshold must lie in [0, 1]");
      }
      return std::vector<double>(generator.num_slots, cache.uniform_threshold);
    }
    auto t = load_thresholds(cache.thresholds);
    if (t.size() != generator.num_slots) {
      throw ConfigError("config: threshold table '" + cache.thresholds + "' has " + std::to_string(t.size()) +
                        " entries but the generator has " + std::to_string(generator.num_slots) + " slots");
    }
    return t;
  }

  CacheConfig cache_config() const {
    CacheConfig c;
    c.num_slots = generator.num_slots;
    c.latent_dim = generator.latent_dim;
    c.capacity = cache.capacity;
    c.thresholds = resolve_thresholds();
    c.alpha = cache.alpha;
    c.snr_min_db = channel.snr_min_db;
    c.snr_max_db = channel.snr_max_db;
    return c;
  }

  void validate() const {
    [[maybe_unused]] const GeneratorModel probe(generator);
    if (!(channel.power_constraint > 0.0)) throw ConfigError("config: channel.power_constraint must be positive");
    if (channel.mode == SnrMode::uniform && !(channel.snr_max_db >= channel.snr_min_db)) {
      throw ConfigError("config: channel.snr_max_db must be >= snr_min_db");
    }
    for (const double v : {channel.snr_db, channel.snr_min_db, channel.snr_max_db}) {
      if (!std::isfinite(v)) throw ConfigError("config: SNR values must be finite");
    }
    if (channel.assumed_snr_db && !std::isfinite(*channel.assumed_snr_db)) {
      throw ConfigError("config: channel.assumed_snr_db must be finite");
    }
    plain.validate();
    two_stage.stage1.validate();
    link.validate();
    if (source.rounds == 0) throw ConfigError("config: source.rounds must be >= 1");
    if (source.pool_size == 0) throw ConfigError("config: source.pool_size must be >= 1");
    if (!(source.reuse_prob >= 0.0 && source.reuse_prob <= 1.0)) {
      throw ConfigError("config: source.reuse_prob must lie in [0, 1]");
    }
    if (!(source.latent_stddev > 0.0)) throw ConfigError("config: source.latent_stddev must be positive");
    if (cache.enabled) {
      if (channel.snr_max_db <= channel.snr_min_db) {
        throw ConfigError("config: cache priority needs snr_max_db > snr_min_db");
      }
      cache_config().validate();
    }
  }
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("config: unknown key '" + where + "." + it.key() + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + "." + key + "' has the wrong type");
  }
}

inline void read_inversion(const json& j, InversionConfig& cfg, const std::string& where) {
  reject_unknown(j, where,
                 {"max_iters", "learning_rate", "beta1", "beta2", "epsilon", "resample_noise_each_iter",
                  "divergence_factor", "divergence_patience"});
  read(j, "max_iters", cfg.max_iters, where);
  read(j, "learning_rate", cfg.adam.learning_rate, where);
  read(j, "beta1", cfg.adam.beta1, where);
  read(j, "beta2", cfg.adam.beta2, where);
  read(j, "epsilon", cfg.adam.epsilon, where);
  read(j, "resample_noise_each_iter", cfg.resample_noise_each_iter, where);
  read(j, "divergence_factor", cfg.divergence_factor, where);
  read(j, "divergence_patience", cfg.divergence_patience, where);
}

inline json inversion_to_json(const InversionConfig& cfg) {
  return {{"max_iters", cfg.max_iters},
          {"learning_rate", cfg.adam.learning_rate},
          {"beta1", cfg.adam.beta1},
          {"beta2", cfg.adam.beta2},
          {"epsilon", cfg.adam.epsilon},
          {"resample_noise_each_iter", cfg.resample_noise_each_iter},
          {"divergence_factor", cfg.divergence_factor},
          {"divergence_patience", cfg.divergence_patience}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using detail::read;
  ExperimentConfig c;
  detail::reject_unknown(j, "root",
                         {"seed", "generator", "channel", "plain", "refine", "stage2", "loss", "cache", "link", "source"});
  read(j, "seed", c.seed, "root");
  if (j.contains("generator")) {
    const auto& g = j["generator"];
    detail::reject_unknown(g, "generator",
                           {"num_slots", "latent_dim", "height", "width", "hidden_dim", "coarse_factor",
                            "global_amplitude", "input_gain", "output_gain", "seed"});
    read(g, "num_slots", c.generator.num_slots, "generator");
    read(g, "latent_dim", c.generator.latent_dim, "generator");
    read(g, "height", c.generator.height, "generator");
    read(g, "width", c.generator.width, "generator");
    read(g, "hidden_dim", c.generator.hidden_dim, "generator");
    read(g, "coarse_factor", c.generator.coarse_factor, "generator");
    read(g, "global_amplitude", c.generator.global_amplitude, "generator");
    read(g, "input_gain", c.generator.input_gain, "generator");
    read(g, "output_gain", c.generator.output_gain, "generator");
    read(g, "seed", c.generator.seed, "generator");
  }
  if (j.contains("channel")) {
    const auto& ch = j["channel"];
    detail::reject_unknown(ch, "channel",
                           {"snr_mode", "snr_db", "snr_min_db", "snr_max_db", "power_constraint", "noiseless",
                            "assumed_snr_db"});
    std::string mode = c.channel.mode == SnrMode::fixed ? "fixed" : "uniform";
    read(ch, "snr_mode", mode, "channel");
    if (mode == "fixed") {
      c.channel.mode = SnrMode::fixed;
    } else if (mode == "uniform") {
      c.channel.mode = SnrMode::uniform;
    } else {
      throw ConfigError("config: channel.snr_mode must be 'fixed' or 'uniform'");
    }
    read(ch, "snr_db", c.channel.snr_db, "channel");
    read(ch, "snr_min_db", c.channel.snr_min_db, "channel");
    read(ch, "snr_max_db", c.channel.snr_max_db, "channel");
    read(ch, "power_constraint", c.channel.power_constraint, "channel");
    read(ch, "noiseless", c.channel.noiseless, "channel");
    if (ch.contains("assumed_snr_db") && !ch["assumed_snr_db"].is_null()) {
      double v = 0.0;
      read(ch, "assumed_snr_db", v, "channel");
      c.channel.assumed_snr_db = v;
    }
  }
  if (j.contains("plain")) detail::read_inversion(j["plain"], c.plain, "plain");
  if (j.contains("refine")) detail::read_inversion(j["refine"], c.two_stage.stage1, "refine");
  if (j.contains("stage2")) {
    const auto& s = j["stage2"];
    detail::reject_unknown(s, "stage2", {"iters", "freeze_hits"});
    read(s, "iters", c.two_stage.stage2_iters, "stage2");
    read(s, "freeze_hits", c.two_stage.freeze_hits, "stage2");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::reject_unknown(l, "loss",
                           {"lambda1", "lambda2", "lambda3", "perceptual_seed", "perceptual_channels", "task_plugin"});
    auto& lc = c.two_stage.stage1.loss;
    read(l, "lambda1", lc.lambda1, "loss");
    read(l, "lambda2", lc.lambda2, "loss");
    read(l, "lambda3", lc.lambda3, "loss");
    read(l, "perceptual_seed", lc.perceptual_seed, "loss");
    read(l, "perceptual_channels", lc.perceptual_channels, "loss");
    read(l, "task_plugin", lc.task_plugin, "loss");
  }
  if (j.contains("cache")) {
    const auto& k = j["cache"];
    detail::reject_unknown(k, "cache", {"enabled", "capacity", "thresholds", "uniform_threshold", "alpha"});
    read(k, "enabled", c.cache.enabled, "cache");
    read(k, "capacity", c.cache.capacity, "cache");
    read(k, "thresholds", c.cache.thresholds, "cache");
    read(k, "uniform_threshold", c.cache.uniform_threshold, "cache");
    read(k, "alpha", c.cache.alpha, "cache");
  }
  if (j.contains("link")) {
    const auto& l = j["link"];
    detail::reject_unknown(l, "link", {"code_rate_num", "code_rate_den", "bits_per_symbol", "bit_error_rate"});
    std::int64_t num = c.link.code_rate.num;
    std::int64_t den = c.link.code_rate.den;
    read(l, "code_rate_num", num, "link");
    read(l, "code_rate_den", den, "link");
    if (den <= 0) throw ConfigError("config: link.code_rate_den must be positive");
    c.link.code_rate = Rational(num, den);
    read(l, "bits_per_symbol", c.link.bits_per_symbol, "link");
    read(l, "bit_error_rate", c.link.bit_error_rate, "link");
  }
  if (j.contains("source")) {
    const auto& s = j["source"];
    detail::reject_unknown(s, "source", {"rounds", "pool_size", "reuse_prob", "latent_stddev"});
    read(s, "rounds", c.source.rounds, "source");
    read(s, "pool_size", c.source.pool_size, "source");
    read(s, "reuse_prob", c.source.reuse_prob, "source");
    read(s, "latent_stddev", c.source.latent_stddev, "source");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

inline json config_to_json(const ExperimentConfig& c) {
  const auto& lc = c.two_stage.stage1.loss;
  json ch = {{"snr_mode", c.channel.mode == SnrMode::fixed ? "fixed" : "uniform"},
             {"snr_db", c.channel.snr_db},
             {"snr_min_db", c.channel.snr_min_db},
             {"snr_max_db", c.channel.snr_max_db},
             {"power_constraint", c.channel.power_constraint},
             {"noiseless", c.channel.noiseless},
             {"assumed_snr_db", c.channel.assumed_snr_db ? json(*c.channel.assumed_snr_db) : json(nullptr)}};
  return {{"seed", c.seed},
          {"generator",
           {{"num_slots", c.generator.num_slots},
            {"latent_dim", c.generator.latent_dim},
            {"height", c.generator.height},
            {"width", c.generator.width},
            {"hidden_dim", c.generator.hidden_dim},
            {"coarse_factor", c.generator.coarse_factor},
            {"global_amplitude", c.generator.global_amplitude},
            {"input_gain", c.generator.input_gain},
            {"output_gain", c.generator.output_gain},
            {"seed", c.generator.seed}}},
          {"channel", ch},
          {"plain", detail::inversion_to_json(c.plain)},
          {"refine", detail::inversion_to_json(c.two_stage.stage1)},
          {"stage2", {{"iters", c.two_stage.stage2_iters}, {"freeze_hits", c.two_stage.freeze_hits}}},
          {"loss",
           {{"lambda1", lc.lambda1},
            {"lambda2", lc.lambda2},
            {"lambda3", lc.lambda3},
            {"perceptual_seed", lc.perceptual_seed},
            {"perceptual_channels", lc.perceptual_channels},
            {"task_plugin", lc.task_plugin}}},
          {"cache",
           {{"enabled", c.cache.enabled},
            {"capacity", c.cache.capacity},
            {"thresholds", c.cache.thresholds},
            {"uniform_threshold", c.cache.uniform_threshold},
            {"alpha", c.cache.alpha}}},
          {"link",
           {{"code_rate_num", c.link.code_rate.num},
            {"code_rate_den", c.link.code_rate.den},
            {"bits_per_symbol", c.link.bits_per_symbol},
            {"bit_error_rate", c.link.bit_error_rate}}},
          {"source",
           {{"rounds", c.source.rounds},
            {"pool_size", c.source.pool_size},
            {"reuse_prob", c.source.reuse_prob},
            {"latent_stddev", c.source.latent_stddev}}}};
}

// ---------------------------------------------------------------------------
// Correlated source

struct SourceStream {
  std::vector<Image> images;
  std::vector<LatentCode> latents;
  std::vector<std::vector<bool>> reused;  // [image][slot]: drawn from the pool
};

/**
 * Each slot of each latent is, with probability reuse_prob, a uniform pick
 * from that slot's fixed pool of pool_size vectors, else a fresh draw.
 */
inline SourceStream generate_source_stream(const GeneratorModel& model, const SourceSpec& spec, const RngStream& rng) {
  if (spec.pool_size == 0) throw ContractViolation("source stream: pool_size must be >= 1");
  if (!(spec.reuse_prob >= 0.0 && spec.reuse_prob <= 1.0)) {
    throw ContractViolation("source stream: reuse_prob must lie in [0, 1]");
  }
  const std::size_t ns = model.num_slots();
  const std::size_t nl = model.latent_dim();
  auto pool_rng = rng.derive(1);
  std::vector<std::vector<std::vector<double>>> pools(ns);
  for (auto& pool : pools) {
    for (std::size_t p = 0; p < spec.pool_size; ++p) pool.push_back(pool_rng.normal_vector(nl, spec.latent_stddev));
  }
  auto pick_rng = rng.derive(2);
  auto fresh_rng = rng.derive(3);
  SourceStream out;
  for (std::size_t r = 0; r < spec.rounds; ++r) {
    std::vector<double> values;
    values.reserve(ns * nl);
    std::vector<bool> reused(ns, false);
    for (std::size_t i = 0; i < ns; ++i) {
      std::vector<double> v;
      if (pick_rng.bernoulli(spec.reuse_prob)) {
        v = pools[i][pick_rng.uniform_int(static_cast<std::uint32_t>(spec.pool_size))];
        reused[i] = true;
      } else {
        v = fresh_rng.normal_vector(nl, spec.latent_stddev);
      }
      values.insert(values.end(), v.begin(), v.end());
    }
    LatentCode latent(ns, nl, std::move(values));
    out.images.push_back(model.generate(latent));
    out.latents.push_back(std::move(latent));
    out.reused.push_back(std::move(reused));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence runs and reports

struct SequenceAggregates {
  double mean_bcr = 0.0;
  double mean_psnr = 0.0;
  double mean_ms_ssim = 0.0;
  std::vector<double> hit_rate;  // hits / N_S per round
};

struct SequenceReport {
  std::vector<TransmissionRecord> records;
  SequenceAggregates aggregates;
  json config;
  std::uint64_t seed = 0;
};

/// Means over rounds that completed; failed rounds are skipped.
inline SequenceAggregates compute_aggregates(const std::vector<TransmissionRecord>& records) {
  SequenceAggregates a;
  std::size_t n = 0;
  for (const auto& r : records) {
    a.hit_rate.push_back(r.hit_mask.empty() ? 0.0
                                            : static_cast<double>(r.hits) / static_cast<double>(r.hit_mask.size()));
    if (!r.error.empty()) continue;
    a.mean_bcr += r.bcr.to_double();
    a.mean_psnr += r.metrics.psnr;
    a.mean_ms_ssim += r.metrics.ms_ssim;
    ++n;
  }
  if (n > 0) {
    a.mean_bcr /= static_cast<double>(n);
    a.mean_psnr /= static_cast<double>(n);
    a.mean_ms_ssim /= static_cast<double>(n);
  }
  return a;
}

struct SequenceState {
  std::optional<SemanticCache> tx_cache;
  std::optional<SemanticCache> rx_cache;
  bool synchronized = true;  // structural sync held after every round
};

namespace stream_tag {
inline constexpr std::uint64_t kSource = 100;
inline constexpr std::uint64_t kRoundSnr = 101;
inline constexpr std::uint64_t kRoundBase = 1000;
}  // namespace stream_tag

/**
 * Runs every round of the configured source stream. Numerical failures are
 * recorded on the round and the run continues; contract violations abort.
 */
inline SequenceReport run_sequence(const ExperimentConfig& cfg, SequenceState* state_out = nullptr) {
  cfg.validate();
  const GeneratorModel model(cfg.generator);
  const RngStream master(cfg.seed, 0);
  const auto stream = generate_source_stream(model, cfg.source, master.derive(stream_tag::kSource));
  auto snr_rng = master.derive(stream_tag::kRoundSnr);

  SequenceState state;
  if (cfg.cache.enabled) {
    state.tx_cache.emplace(cfg.cache_config());
    state.rx_cache.emplace(cfg.cache_config());
  }
  CdcConfig cdc_cfg{cfg.plain, cfg.two_stage};
  CagiConfig cagi_cfg{cfg.plain, cfg.two_stage.stage1};

  SequenceReport report;
  report.config = config_to_json(cfg);
  report.seed = cfg.seed;
  for (std::size_t r = 0; r < stream.images.size(); ++r) {
    const double snr = cfg.channel.mode == SnrMode::fixed
                           ? cfg.channel.snr_db
                           : snr_rng.uniform(cfg.channel.snr_min_db, cfg.channel.snr_max_db);
    const ChannelConfig channel{snr, cfg.channel.power_constraint, cfg.channel.noiseless};
    const double sigma2_hat = snr_to_sigma2(cfg.channel.assumed_snr_db.value_or(snr), cfg.channel.power_constraint);
    const auto round_rng = master.derive(stream_tag::kRoundBase + r);
    TransmissionRecord rec;
    try {
      if (cfg.cache.enabled) {
        rec = cdc_transmit(model, stream.images[r], *state.tx_cache, *state.rx_cache, channel, sigma2_hat, cfg.link,
                           cdc_cfg, round_rng)
                  .record;
      } else {
        rec = transmit_cagi(model, stream.images[r], channel, sigma2_hat, cagi_cfg, round_rng).record;
      }
    } catch (const NumericalError& e) {
      rec.snr_db_actual = snr;
      rec.error = e.what();
    }
    if (cfg.cache.enabled && cfg.link.bit_error_rate == 0.0) {
      state.synchronized = state.synchronized && structurally_equal(*state.tx_cache, *state.rx_cache);
    }
    report.records.push_back(std::move(rec));
  }
  report.aggregates = compute_aggregates(report.records);
  if (state_out != nullptr) *state_out = std::move(state);
  return report;
}

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double number_or_nan(const json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

}  // namespace detail

inline constexpr const char* kCsvHeader =
    "round,snr_db,n_s,hits,analog_symbols,digital_symbols,bcr_num,bcr_den,psnr_db,ms_ssim,l1,upgrades,fallbacks";

inline std::string report_to_csv(const SequenceReport& report) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (std::size_t r = 0; r < report.records.size(); ++r) {
    const auto& t = report.records[r];
    using detail::fmt_double;
    os << r + 1 << ',' << fmt_double(t.snr_db_actual) << ',' << t.n_s << ',' << t.hits << ','
       << t.analog_complex_symbols << ',' << t.digital_symbols << ',' << t.bcr.num << ',' << t.bcr.den << ','
       << fmt_double(t.metrics.psnr) << ',' << fmt_double(t.metrics.ms_ssim) << ',' << fmt_double(t.metrics.l1) << ','
       << t.upgrades << ',' << t.fallbacks << '\n';
  }
  return os.str();
}

inline json record_to_json(const TransmissionRecord& t) {
  using detail::number_or_null;
  json hits = json::array();
  for (const bool b : t.hit_mask) hits.push_back(b);
  return {{"snr_db", t.snr_db_actual},
          {"n_s", t.n_s},
          {"hits", t.hits},
          {"upgrades", t.upgrades},
          {"fallbacks", t.fallbacks},
          {"analog_symbols", t.analog_complex_symbols},
          {"digital_symbols", t.digital_symbols},
          {"source_bandwidth", t.source_bandwidth},
          {"bcr", t.bcr.str()},
          {"bcr_num", t.bcr.num},
          {"bcr_den", t.bcr.den},
          {"psnr_db", number_or_null(t.metrics.psnr)},
          {"ms_ssim", number_or_null(t.metrics.ms_ssim)},
          {"l1", number_or_null(t.metrics.l1)},
          {"mse", number_or_null(t.metrics.mse)},
          {"tx_energy", t.tx_energy},
          {"hit_mask", hits},
          {"indices_sent", t.indices_sent},
          {"error", t.error}};
}

inline TransmissionRecord record_from_json(const json& j) {
  using detail::number_or_nan;
  TransmissionRecord t;
  t.snr_db_actual = j.at("snr_db").get<double>();
  t.n_s = j.at("n_s").get<std::size_t>();
  t.hits = j.at("hits").get<std::size_t>();
  t.upgrades = j.at("upgrades").get<std::size_t>();
  t.fallbacks = j.at("fallbacks").get<std::size_t>();
  t.analog_complex_symbols = j.at("analog_symbols").get<std::int64_t>();
  t.digital_symbols = j.at("digital_symbols").get<std::int64_t>();
  t.source_bandwidth = j.at("source_bandwidth").get<std::int64_t>();
  t.bcr = Rational(j.at("bcr_num").get<std::int64_t>(), j.at("bcr_den").get<std::int64_t>());
  t.metrics.psnr = number_or_nan(j.at("psnr_db"));
  t.metrics.ms_ssim = number_or_nan(j.at("ms_ssim"));
  t.metrics.l1 = number_or_nan(j.at("l1"));
  t.metrics.mse = number_or_nan(j.at("mse"));
  t.tx_energy = j.at("tx_energy").get<double>();
  t.hit_mask = j.at("hit_mask").get<std::vector<bool>>();
  t.indices_sent = j.at("indices_sent").get<std::vector<std::uint64_t>>();
  t.error = j.at("error").get<std::string>();
  return t;
}

inline json report_to_json(const SequenceReport& report) {
  using detail::number_or_null;
  json records = json::array();
  for (const auto& r : report.records) records.push_back(record_to_json(r));
  const auto& a = report.aggregates;
  return {{"seed", report.seed},
          {"config", report.config},
          {"aggregates",
           {{"mean_bcr", number_or_null(a.mean_bcr)},
            {"mean_psnr_db", number_or_null(a.mean_psnr)},
            {"mean_ms_ssim", number_or_null(a.mean_ms_ssim)},
            {"hit_rate", a.hit_rate}}},
          {"records", records},
          {"not_computed", {"LPIPS", "PIEAPP", "DISTS", "FID"}}};
}

inline SequenceReport report_from_json(const json& j) {
  SequenceReport r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = j.at("config");
  for (const auto& rec : j.at("records")) r.records.push_back(record_from_json(rec));
  const auto& a = j.at("aggregates");
  r.aggregates.mean_bcr = detail::number_or_nan(a.at("mean_bcr"));
  r.aggregates.mean_psnr = detail::number_or_nan(a.at("mean_psnr_db"));
  r.aggregates.mean_ms_ssim = detail::number_or_nan(a.at("mean_ms_ssim"));
  r.aggregates.hit_rate = a.at("hit_rate").get<std::vector<double>>();
  return r;
}

enum class ReportFormat { csv, json };

inline ReportFormat parse_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + s + "' (expected csv or json)");
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline void emit_report(const SequenceReport& report, ReportFormat format, const std::filesystem::path& path) {
  write_text_file(path, format == ReportFormat::csv ? report_to_csv(report) : report_to_json(report).dump(2) + "\n");
}

/// Occupancy, SNR tags and timestamps of every slot.
inline json cache_to_json(const SemanticCache& cache, bool with_vectors = false) {
  json slots = json::array();
  for (std::size_t i = 0; i < cache.num_slots(); ++i) {
    json entries = json::array();
    for (const auto& e : cache.entries(i)) {
      json je = {{"snr_tag", e.snr_tag}, {"last_access", e.last_access}, {"norm", std::sqrt(squared_norm(e.vector))}};
      if (with_vectors) je["vector"] = e.vector;
      entries.push_back(std::move(je));
    }
    slots.push_back({{"slot", i}, {"size", cache.size(i)}, {"threshold", cache.threshold(i)}, {"entries", entries}});
  }
  return {{"clock", cache.clock()},
          {"capacity", cache.capacity()},
          {"total_entries", cache.total_entries()},
          {"index_bits", cache.index_bits()},
          {"slots", slots}};
}

// ---------------------------------------------------------------------------
// Finite-difference gradient suite

struct GradcheckResult {
  std::string objective;
  std::uint64_t seed = 0;
  double max_relative_error = 0.0;
};

/**
 * Checks the MSE, channel-aware and straight-through gradients against
 * central differences on a small instance (N_S=4, N_L=8, 3x16x16). The
 * straight-through case uses a cache holding a perturbed copy of two slots,
 * so both hit and kept slots are exercised.
 */
inline std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, double sigma2_hat = 0.5) {
  GeneratorConfig gc;
  gc.num_slots = 4;
  gc.latent_dim = 8;
  gc.height = 16;
  gc.width = 16;
  gc.seed = seed;
  const GeneratorModel model(gc);
  const RngStream rng(seed, 0x6772);
  auto target_rng = rng.derive(1);
  const auto target = model.generate(LatentCode(4, 8, target_rng.normal_vector(32, 0.7)));
  auto point_rng = rng.derive(2);
  const LatentCode y(4, 8, point_rng.normal_vector(32, 0.7));
  auto noise_rng = rng.derive(3);

  LossConfig lc;
  auto loss = std::make_shared<const ImageLoss>(lc, target);
  std::vector<GradcheckResult> out;
  auto check = [&](const std::string& name, const DifferentiableObjective& obj) {
    const auto analytic = obj.gradient_fn(y.flat());
    const auto numeric = finite_diff_grad(obj, y.flat());
    out.push_back({name, seed, max_relative_error(analytic, numeric)});
  };

  check("mse", make_mse_objective(model, target));
  check("channel_aware", make_channel_aware_objective(model, loss, draw_channel_noise(32, sigma2_hat, noise_rng), 1.0));

  CacheConfig cc;
  cc.num_slots = 4;
  cc.latent_dim = 8;
  cc.capacity = 4;
  cc.thresholds.assign(4, 0.9);
  SemanticCache cache(cc);
  auto perturb_rng = rng.derive(4);
  for (const std::size_t slot : {std::size_t{1}, std::size_t{3}}) {
    auto v = std::vector<double>(y.slot(slot).begin(), y.slot(slot).end());
    for (auto& x : v) x += 0.05 * perturb_rng.normal();
    cache.insert(slot, v, 3.0);
  }
  const auto reduction = cache.reduce(y);
  check("straight_through",
        make_straight_through_objective(model, loss, cache, reduction, y,
                                        draw_channel_noise(reduction.n_s() * 8, sigma2_hat, noise_rng), 1.0));
  return out;
}

}  // namespace cagi
