#pragma once

// Experiment commands behind the mfuse executable.
//
// Run directory contents:
//   train_log.jsonl        per-epoch records (see trainer.hpp)
//   model.ckpt             best-validation checkpoint (see checkpoint.hpp)
//   reports.json           image, text and fusion evaluation reports
//   per_class_table.csv    class rows, P/R/F1 per modality
//   summary.csv            one-row regime summary (same columns as compare)
//   pr_curves_<m>.csv      PR curve points per modality
//   confusion_<m>.csv      confusion matrix per modality
//   plots/                 SVG renderings of the two files above
//   provenance.json        config echo, seed, code version, wall time
// Everything except plots/ and provenance.json is byte-deterministic for a
// fixed config and seed.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mfuse/checkpoint.hpp"
#include "mfuse/config.hpp"
#include "mfuse/evaluation.hpp"
#include "mfuse/plots.hpp"
#include "mfuse/trainer.hpp"

#ifndef MFUSE_CODE_VERSION
#define MFUSE_CODE_VERSION "unknown"
#endif

namespace mfuse {

inline constexpr const char* kOutRootEnv = "MFUSE_OUT_ROOT";

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitInvalid = 2, kExitDiverged = 3 };

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::vector<Regime> regimes;
  bool quiet = false;
};

inline std::filesystem::path output_dir(const ExperimentConfig& cfg, const std::filesystem::path& config_path,
                                        const RunOptions& opt) {
  if (opt.out) return *opt.out;
  if (!cfg.output.empty()) return cfg.output;
  const std::string stem = config_path.stem().string();
  if (const char* root = std::getenv(kOutRootEnv); root && *root) return std::filesystem::path(root) / stem;
  return std::filesystem::path("runs") / stem;
}

struct PreparedData {
  Dataset train;
  Dataset val;
  Dataset eval;  // test split, or the foreign set in inter mode
  std::vector<std::string> model_classes;
  std::optional<ClassMapping> mapping;
};

// Deterministic hold-out used when the source provides no validation split.
inline std::pair<Dataset, Dataset> carve_validation(const Dataset& train, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 300));
  rng.shuffle(order);
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(order.size())));
  if (n_val >= order.size()) throw ValidationError("training split is too small to hold out a validation set");
  Dataset tr = train, va = train;
  tr.samples.clear();
  va.samples.clear();
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? va : tr).samples.push_back(train.samples[order[i]]);
  return {tr, va};
}

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData p;
  Splits s;
  if (cfg.synthetic) {
    s = generate(cfg.data);
  } else {
    ManifestOptions mo;
    mo.class_names = cfg.data.class_names;
    mo.vocab_size = cfg.data.vocab_size;
    mo.seq_len = cfg.data.seq_len;
    mo.image_size = cfg.data.image_size;
    s = load_manifest(cfg.manifest, mo);
  }
  if (s.train.empty()) throw ValidationError("data: training split is empty");
  p.model_classes = s.train.class_names;
  if (s.val) {
    p.train = std::move(s.train);
    p.val = std::move(*s.val);
  } else {
    std::tie(p.train, p.val) = carve_validation(s.train, 0.1, cfg.data.seed);
  }
  if (cfg.evaluation.mode == EvalMode::kIntra) {
    p.eval = std::move(s.test);
    return p;
  }
  p.mapping = load_mapping(cfg.evaluation.mapping);
  if (cfg.evaluation.manifest.empty()) {
    p.eval = generate_transfer_set(cfg.data, cfg.evaluation.source_classes, *p.mapping, cfg.evaluation.per_class,
                                   cfg.evaluation.seed);
  } else {
    ManifestOptions mo;
    mo.class_names = cfg.evaluation.source_classes;
    mo.vocab_size = cfg.data.vocab_size;
    mo.seq_len = cfg.data.seq_len;
    mo.image_size = cfg.data.image_size;
    Splits e = load_manifest(cfg.evaluation.manifest, mo);
    p.eval = e.test;
    for (auto* part : {&e.train, e.val ? &*e.val : nullptr})
      if (part) p.eval.samples.insert(p.eval.samples.end(), part->samples.begin(), part->samples.end());
  }
  return p;
}

struct ExperimentResult {
  Regime regime;
  std::uint64_t seed;
  FitResult fit;
  ProtocolResult protocol;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data, Regime regime,
                                       std::uint64_t seed, const FitOptions& fo = {}) {
  TrainConfig tc = cfg.train;
  tc.regime = regime;
  tc.seed = seed;
  ModelState model = build_model(cfg.model, seed);
  FitResult fit_result = fit(std::move(model), data.train, data.val, tc, fo);
  ProtocolResult protocol =
      run_protocol(fit_result.model, data.model_classes, data.eval, data.mapping, tc.attention_mode());
  return {regime, seed, std::move(fit_result), std::move(protocol)};
}

// ---------------------------------------------------------------------------
// Summary tables

struct ModalitySummary {
  double accuracy, recall, precision;  // macro recall/precision
  double weighted_recall, weighted_precision;
};

inline ModalitySummary summarize(const EvaluationReport& r) {
  const auto& m = r.metrics;
  return {m.accuracy, m.macro.recall, m.macro.precision, m.weighted.recall, m.weighted.precision};
}

inline const char* const kModalities[] = {"image", "text", "fusion"};

inline std::string summary_header() {
  std::string h = "regime";
  for (const char* m : kModalities)
    for (const char* f : {"accuracy", "recall", "precision"}) h += std::string(",") + m + "_" + f;
  return h + "\n";
}

struct MeanStd {
  double mean = 0.0, stdev = 0.0;
};

// Sample standard deviation; zero for a single value.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.stdev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

// Percent metrics written as "mean ± stdev".
inline std::string mean_std_cell(const std::vector<double>& v) {
  const MeanStd s = mean_std(v);
  return fixed(100.0 * s.mean, 2) + " \xC2\xB1 " + fixed(100.0 * s.stdev, 2);
}

struct CompareResult {
  std::vector<Regime> regimes;
  std::vector<std::uint64_t> seeds;
  // [regime][seed][modality]
  std::vector<std::vector<std::array<ModalitySummary, 3>>> cells;

  std::vector<double> values(std::size_t regime, std::size_t modality,
                             double ModalitySummary::*field) const {
    std::vector<double> v;
    for (const auto& per_seed : cells[regime]) v.push_back(per_seed[modality].*field);
    return v;
  }
};

inline std::string compare_table_csv(const CompareResult& c, bool weighted) {
  std::string out = summary_header();
  for (std::size_t r = 0; r < c.regimes.size(); ++r) {
    out += to_string(c.regimes[r]);
    for (std::size_t m = 0; m < 3; ++m) {
      out += "," + mean_std_cell(c.values(r, m, &ModalitySummary::accuracy));
      out += "," + mean_std_cell(c.values(r, m, weighted ? &ModalitySummary::weighted_recall : &ModalitySummary::recall));
      out += "," + mean_std_cell(
                       c.values(r, m, weighted ? &ModalitySummary::weighted_precision : &ModalitySummary::precision));
    }
    out += "\n";
  }
  return out;
}

inline std::string compare_long_csv(const CompareResult& c) {
  std::string out = "regime,seed,modality,accuracy,macro_recall,macro_precision,weighted_recall,weighted_precision\n";
  for (std::size_t r = 0; r < c.regimes.size(); ++r)
    for (std::size_t s = 0; s < c.seeds.size(); ++s)
      for (std::size_t m = 0; m < 3; ++m) {
        const ModalitySummary& x = c.cells[r][s][m];
        out += std::string(to_string(c.regimes[r])) + "," + std::to_string(c.seeds[s]) + "," + kModalities[m] + "," +
               fixed(x.accuracy, 6) + "," + fixed(x.recall, 6) + "," + fixed(x.precision, 6) + "," +
               fixed(x.weighted_recall, 6) + "," + fixed(x.weighted_precision, 6) + "\n";
      }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

inline FitOptions progress_printer(bool quiet, std::string prefix) {
  FitOptions fo;
  if (!quiet)
    fo.on_epoch = [prefix = std::move(prefix)](const EpochRecord& r) {
      std::cerr << prefix << "epoch " << r.epoch << " [" << r.phase << "] lr " << r.lr << " loss "
                << fixed(r.loss.total) << " val acc img/txt/fus " << fixed(r.val_acc_image) << '/'
                << fixed(r.val_acc_text) << '/' << fixed(r.val_acc_fusion) << (r.improved ? " *" : "") << '\n';
    };
  return fo;
}

inline void write_protocol_artifacts(const ProtocolResult& p, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "plots");
  write_reports(p, dir / "reports.json");
  write_text(dir / "per_class_table.csv", per_class_table_csv(p));
  for (const EvaluationReport* r : {&p.image, &p.text, &p.fusion}) {
    write_text(dir / ("pr_curves_" + r->modality + ".csv"), pr_curves_csv(*r));
    write_text(dir / ("confusion_" + r->modality + ".csv"), confusion_csv(*r));
    write_text(dir / "plots" / ("confusion_" + r->modality + ".svg"), plots::confusion_svg(*r));
    for (const auto& c : r->curves) {
      std::string name = r->class_names[c.class_id];
      for (char& ch : name)
        if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
      write_text(dir / "plots" / ("pr_" + r->modality + "_" + std::to_string(c.class_id) + "_" + name + ".svg"),
                 plots::pr_curve_svg(c, r->modality + ": " + r->class_names[c.class_id], *r->ap[c.class_id]));
    }
  }
}

inline void write_provenance(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                             const std::filesystem::path& config_path, const std::string& command,
                             const std::vector<std::uint64_t>& seeds, double wall_seconds) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_path"] = std::filesystem::absolute(config_path).string();
  j["config"] = cfg.echo;
  j["seeds"] = seeds;
  j["code_version"] = MFUSE_CODE_VERSION;
  j["wall_seconds"] = wall_seconds;
  write_text(dir / "provenance.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands

inline int report_error(const std::exception& e) {
  std::cerr << "error: " << e.what() << '\n';
  if (dynamic_cast<const TrainingDiverged*>(&e)) return kExitDiverged;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const InvalidConfig*>(&e) ||
      dynamic_cast<const InvalidInput*>(&e) || dynamic_cast<const ParseError*>(&e))
    return kExitInvalid;
  return kExitFailure;
}

inline int cmd_validate(const std::filesystem::path& config_path, const RunOptions& opt = {}) {
  try {
    load_config(config_path);
  } catch (const std::exception& e) {
    return report_error(e);
  }
  if (!opt.quiet) std::cout << "OK\n";
  return kExitOk;
}

inline int cmd_run(const std::filesystem::path& config_path, const RunOptions& opt = {}) {
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = load_config(config_path);
    const std::filesystem::path dir = output_dir(cfg, config_path, opt);
    std::filesystem::create_directories(dir);
    const std::uint64_t seed = opt.seed.value_or(cfg.train.seed);
    const Regime regime = opt.regimes.empty() ? cfg.train.regime : opt.regimes.front();
    const PreparedData data = prepare_data(cfg);
    const ExperimentResult res =
        run_experiment(cfg, data, regime, seed, progress_printer(opt.quiet, std::string(to_string(regime)) + " "));
    write_train_log(res.fit.log, dir / "train_log.jsonl");
    save_checkpoint(res.fit.model, dir / "model.ckpt");
    write_protocol_artifacts(res.protocol, dir);
    CompareResult summary{{regime}, {seed}, {{{summarize(res.protocol.image), summarize(res.protocol.text),
                                               summarize(res.protocol.fusion)}}}};
    write_text(dir / "summary.csv", compare_table_csv(summary, false));
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_provenance(dir, cfg, config_path, "run", {seed}, wall);
    if (!opt.quiet)
      std::cout << "fusion accuracy " << fixed(res.protocol.fusion.metrics.accuracy) << "; artifacts in "
                << dir.string() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    return report_error(e);
  }
}

inline CompareResult compare_regimes(const ExperimentConfig& cfg, const PreparedData& data,
                                     const std::vector<Regime>& regimes, const std::vector<std::uint64_t>& seeds,
                                     bool quiet, const std::optional<std::filesystem::path>& run_dir = {}) {
  CompareResult c{regimes, seeds, {}};
  for (Regime r : regimes) {
    auto& per_seed = c.cells.emplace_back();
    for (std::uint64_t s : seeds) {
      const ExperimentResult res = run_experiment(
          cfg, data, r, s, progress_printer(quiet, std::string(to_string(r)) + " seed " + std::to_string(s) + " "));
      per_seed.push_back({summarize(res.protocol.image), summarize(res.protocol.text), summarize(res.protocol.fusion)});
      if (run_dir) {
        const auto sub = *run_dir / (std::string(to_string(r)) + "_seed" + std::to_string(s));
        std::filesystem::create_directories(sub);
        write_train_log(res.fit.log, sub / "train_log.jsonl");
        write_reports(res.protocol, sub / "reports.json");
      }
    }
  }
  return c;
}

inline int cmd_compare(const std::filesystem::path& config_path, const RunOptions& opt = {}) {
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = load_config(config_path);
    const std::vector<Regime> regimes = opt.regimes.empty() ? cfg.compare_regimes : opt.regimes;
    if (regimes.size() < 2) throw ValidationError("compare: at least two regimes are required");
    const std::vector<std::uint64_t> seeds = opt.seed ? std::vector<std::uint64_t>{*opt.seed} : cfg.compare_seeds;
    const std::filesystem::path dir = output_dir(cfg, config_path, opt);
    std::filesystem::create_directories(dir);
    const PreparedData data = prepare_data(cfg);
    const CompareResult c = compare_regimes(cfg, data, regimes, seeds, opt.quiet, dir / "runs");
    write_text(dir / "compare_table.csv", compare_table_csv(c, false));
    write_text(dir / "compare_table_weighted.csv", compare_table_csv(c, true));
    write_text(dir / "compare_long.csv", compare_long_csv(c));
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_provenance(dir, cfg, config_path, "compare", seeds, wall);
    if (!opt.quiet) std::cout << compare_table_csv(c, false);
    return kExitOk;
  } catch (const std::exception& e) {
    return report_error(e);
  }
}

}  // namespace mfuse
