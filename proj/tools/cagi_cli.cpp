// Command-line front end: invert, transmit, sequence, cache-stats, gradcheck.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "cagi/cagi.hpp"

namespace fs = std::filesystem;
using namespace cagi;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::string format = "csv";
  bool no_cache = false;
  std::string thresholds;
};

ExperimentConfig resolve_config(const Options& opt) {
  ExperimentConfig cfg;
  if (!opt.config_path.empty()) cfg = load_config(opt.config_path);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.no_cache) cfg.cache.enabled = false;
  if (!opt.thresholds.empty()) cfg.cache.thresholds = opt.thresholds;
  cfg.validate();
  return cfg;
}

fs::path output_path(const Options& opt, const std::string& stem, const std::string& ext) {
  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + opt.out_dir + "': " + ec.message());
  return fs::path(opt.out_dir) / (stem + "." + ext);
}

void write_report(const Options& opt, const SequenceReport& report, const std::string& stem) {
  const auto format = parse_format(opt.format);
  const auto path = output_path(opt, stem, opt.format);
  emit_report(report, format, path);
  std::cout << "wrote " << path.string() << "\n";
}

/// First image of the configured source stream.
Image first_source_image(const ExperimentConfig& cfg, const GeneratorModel& model) {
  SourceSpec one = cfg.source;
  one.rounds = 1;
  return generate_source_stream(model, one, RngStream(cfg.seed, 0).derive(stream_tag::kSource)).images.front();
}

int cmd_invert(const Options& opt) {
  const auto cfg = resolve_config(opt);
  const GeneratorModel model(cfg.generator);
  const auto target = first_source_image(cfg, model);
  const auto result = plain_invert(model, target, cfg.plain, RngStream(cfg.seed, 0).derive(stream_tag::kPlain));
  const auto metrics = evaluate_metrics(model.generate(result.latent), target);
  const auto format = parse_format(opt.format);
  const auto path = output_path(opt, "invert", opt.format);
  if (format == ReportFormat::csv) {
    std::string text = "iteration,loss\n";
    for (std::size_t t = 0; t < result.loss_history.size(); ++t) {
      text += std::to_string(t) + "," + detail::fmt_double(result.loss_history[t]) + "\n";
    }
    write_text_file(path, text);
  } else {
    json j = {{"seed", cfg.seed},
              {"config", config_to_json(cfg)},
              {"best_iteration", result.best_iteration},
              {"best_loss", result.best_loss},
              {"initial_loss", result.initial_loss},
              {"psnr_db", detail::number_or_null(metrics.psnr)},
              {"ms_ssim", detail::number_or_null(metrics.ms_ssim)},
              {"mse", metrics.mse},
              {"loss_history", result.loss_history}};
    write_text_file(path, j.dump(2) + "\n");
  }
  std::cout << "best loss " << result.best_loss << " at iteration " << result.best_iteration << ", PSNR "
            << metrics.psnr << " dB\nwrote " << path.string() << "\n";
  return 0;
}

int cmd_sequence(const Options& opt, std::optional<std::size_t> rounds, const std::string& stem) {
  auto cfg = resolve_config(opt);
  if (rounds) cfg.source.rounds = *rounds;
  SequenceState state;
  const auto report = run_sequence(cfg, &state);
  write_report(opt, report, stem);
  std::cout << "mean BCR " << report.aggregates.mean_bcr << ", mean PSNR " << report.aggregates.mean_psnr
            << " dB over " << report.records.size() << " rounds\n";
  return 0;
}

int cmd_cache_stats(const Options& opt) {
  auto cfg = resolve_config(opt);
  if (!cfg.cache.enabled) throw ConfigError("cache-stats needs the cache enabled");
  SequenceState state;
  const auto report = run_sequence(cfg, &state);
  const json j = {{"seed", cfg.seed},
                  {"rounds", report.records.size()},
                  {"synchronized", state.synchronized},
                  {"transmitter", cache_to_json(*state.tx_cache)},
                  {"receiver", cache_to_json(*state.rx_cache)}};
  const auto path = output_path(opt, "cache_stats", "json");
  write_text_file(path, j.dump(2) + "\n");
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_gradcheck(const Options& opt, std::size_t seeds, double tolerance) {
  const std::uint64_t base = opt.seed.value_or(1);
  std::vector<GradcheckResult> all;
  for (std::uint64_t s = base; s < base + seeds; ++s) {
    const auto r = run_gradcheck(s);
    all.insert(all.end(), r.begin(), r.end());
  }
  bool ok = true;
  std::string csv = "objective,seed,max_relative_error\n";
  json rows = json::array();
  for (const auto& r : all) {
    ok = ok && r.max_relative_error < tolerance;
    std::cout << r.objective << " seed " << r.seed << " max rel err " << r.max_relative_error << "\n";
    csv += r.objective + "," + std::to_string(r.seed) + "," + detail::fmt_double(r.max_relative_error) + "\n";
    rows.push_back({{"objective", r.objective}, {"seed", r.seed}, {"max_relative_error", r.max_relative_error}});
  }
  const auto format = parse_format(opt.format);
  const auto path = output_path(opt, "gradcheck", opt.format);
  write_text_file(path, format == ReportFormat::csv ? csv : json{{"tolerance", tolerance}, {"results", rows}}.dump(2) + "\n");
  if (!ok) throw NumericalError("gradcheck: analytic gradient disagrees with finite differences");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-aware GAN inversion and semantic cache simulator"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--out", opt.out_dir, "output directory");
    sub->add_option("--format", opt.format, "report format")->check(CLI::IsMember({"csv", "json"}));
    sub->add_flag("--no-cache", opt.no_cache, "disable the semantic cache");
    sub->add_option("--thresholds", opt.thresholds, "gamma_A, gamma_B or a slot=value file");
  };

  auto* invert = app.add_subcommand("invert", "plain inversion of one source image, no channel");
  add_common(invert);
  auto* transmit = app.add_subcommand("transmit", "one transmission round");
  add_common(transmit);
  auto* sequence = app.add_subcommand("sequence", "multi-round run over the correlated source");
  add_common(sequence);
  std::optional<std::size_t> rounds;
  sequence->add_option("--rounds", rounds, "override source.rounds");
  auto* stats = app.add_subcommand("cache-stats", "run a sequence and dump both caches");
  add_common(stats);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad);
  std::size_t grad_seeds = 5;
  double grad_tol = 1e-3;
  grad->add_option("--seeds", grad_seeds, "number of seeds");
  grad->add_option("--tolerance", grad_tol, "max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }

  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) opt.seed = seed;
  }

  try {
    if (invert->parsed()) return cmd_invert(opt);
    if (transmit->parsed()) return cmd_sequence(opt, std::size_t{1}, "transmit");
    if (sequence->parsed()) return cmd_sequence(opt, rounds, "sequence");
    if (stats->parsed()) return cmd_cache_stats(opt);
    if (grad->parsed()) return cmd_gradcheck(opt, grad_seeds, grad_tol);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumericalError;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIoError;
  }
  return 0;
}
