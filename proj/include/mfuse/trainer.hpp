#pragma once

// Mutual-learning optimisation: per-mini-batch cross-modal mimicry under one
// of four regimes, Nesterov momentum SGD, step learning-rate decay and early
// stopping on validation fusion accuracy.
//
// TrainLog records file (JSON lines, one epoch per line), fields in order:
//   epoch, phase, lr, l1, l2, l3, total, d_image, d_text,
//   val_acc_image, val_acc_text, val_acc_fusion, improved
// Loss fields are means over the epoch's mini-batches.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfuse/inference.hpp"
#include "mfuse/losses.hpp"

namespace mfuse {

enum class Regime { kIL, kMlKld, kMlTrKld, kEamlTrKld };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::kIL: return "IL";
    case Regime::kMlKld: return "ML_KLD";
    case Regime::kMlTrKld: return "ML_TrKLD";
    case Regime::kEamlTrKld: return "EAML_TrKLD";
  }
  return "?";
}

inline std::optional<Regime> parse_regime(const std::string& s) {
  for (Regime r : {Regime::kIL, Regime::kMlKld, Regime::kMlTrKld, Regime::kEamlTrKld})
    if (s == to_string(r)) return r;
  return std::nullopt;
}

enum class LrSchedule { kStep, kContinuous };
enum class Schedule { kJoint, kTwoPhase };

struct TrainConfig {
  Regime regime = Regime::kMlTrKld;
  double beta = 0.5;
  LossWeights weights;
  std::size_t batch_size = 16;
  double initial_lr = 1e-3;
  double drop = 0.5;
  std::size_t iter_drop = 10;  // epochs per decay step
  double momentum = 0.9;
  std::size_t max_epochs = 30;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::kStep;
  Schedule schedule = Schedule::kJoint;
  // Forces the attention gate to 1 under EAML (ablation switch).
  bool bypass_attention = false;

  void validate() const {
    weights.validate();
    if (!(beta >= 0.0 && std::isfinite(beta))) throw InvalidConfig("beta must be a non-negative number");
    if (batch_size < 1) throw InvalidConfig("batch_size must be at least 1");
    if (!(initial_lr > 0.0)) throw InvalidConfig("initial_lr must be positive");
    if (!(drop > 0.0 && drop <= 1.0)) throw InvalidConfig("drop must lie in (0, 1]");
    if (iter_drop < 1) throw InvalidConfig("iter_drop must be at least 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidConfig("momentum must lie in [0, 1)");
    if (max_epochs < 1) throw InvalidConfig("max_epochs must be at least 1");
    if (patience < 1) throw InvalidConfig("patience must be at least 1");
  }

  AttentionMode attention_mode() const {
    if (regime != Regime::kEamlTrKld) return AttentionMode::kDisabled;
    return bypass_attention ? AttentionMode::kBypass : AttentionMode::kEnabled;
  }

  std::optional<Divergence> mimicry() const {
    switch (regime) {
      case Regime::kIL: return std::nullopt;
      case Regime::kMlKld: return Divergence::kKld;
      default: return Divergence::kTruncatedKld;
    }
  }
};

/// initial_lr * drop^floor(epoch / iter_drop); the continuous schedule drops
/// the floor.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const double e = static_cast<double>(epoch) / static_cast<double>(cfg.iter_drop);
  const double exponent = cfg.lr_schedule == LrSchedule::kStep ? std::floor(e) : e;
  return cfg.initial_lr * std::pow(cfg.drop, exponent);
}

// SGD with Nesterov momentum: buf = mu buf + g; p -= lr (g + mu buf).
class NesterovSgd {
 public:
  explicit NesterovSgd(double momentum) : momentum_(momentum) {}

  template <typename Filter>
  void step(ModelState& m, double lr, Filter&& trainable) {
    std::size_t i = 0;
    m.visit([&](Parameter& p) {
      if (buffers_.size() <= i) buffers_.emplace_back(p.value.shape);
      Tensor& buf = buffers_[i++];
      if (!trainable(p)) return;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        buf[j] = momentum_ * buf[j] + g;
        p.value[j] -= lr * (g + momentum_ * buf[j]);
      }
    });
  }

  void step(ModelState& m, double lr) {
    step(m, lr, [](const Parameter&) { return true; });
  }

 private:
  double momentum_;
  std::vector<Tensor> buffers_;
};

struct StepTerms {
  double w_image = 1.0 / 3.0;
  double w_text = 1.0 / 3.0;
  double w_fusion = 1.0 / 3.0;
};

// Builds the batch objective on a recording graph and returns the root plus
// its breakdown. Peer distributions enter the mimicry terms as constants.
struct ObjectiveResult {
  Var total;
  LossBreakdown breakdown;
};

inline ObjectiveResult build_objective(Graph& g, const ModelState& m, const Batch& b, const TrainConfig& cfg,
                                       const StepTerms& terms) {
  const ModelOutput out = forward_model(g, m, b.input, cfg.attention_mode());
  for (const Var* z : {&out.joint.logits_img, &out.joint.logits_txt, &out.logits_fusion})
    for (double v : z->value().data)
      if (!std::isfinite(v)) throw NonFiniteValue("non-finite logits");
  const Var p_img = ops::softmax_rows(out.joint.logits_img);
  const Var p_txt = ops::softmax_rows(out.joint.logits_txt);
  const Var p_fus = ops::softmax_rows(out.logits_fusion);
  Var l1 = ops::cross_entropy_mean(p_img, b.labels);
  Var l2 = ops::cross_entropy_mean(p_txt, b.labels);
  const Var l3 = ops::cross_entropy_mean(p_fus, b.labels);
  LossBreakdown br;
  if (const auto kind = cfg.mimicry()) {
    const Var d_img = ops::mimicry_mean(p_img, p_txt.value(), *kind);
    const Var d_txt = ops::mimicry_mean(p_txt, p_img.value(), *kind);
    br.d_image = d_img.value()[0];
    br.d_text = d_txt.value()[0];
    l1 = ops::weighted_sum({l1, d_img}, {1.0, cfg.beta});
    l2 = ops::weighted_sum({l2, d_txt}, {1.0, cfg.beta});
  }
  const Var total = ops::weighted_sum({l1, l2, l3}, {terms.w_image, terms.w_text, terms.w_fusion});
  br.l1 = l1.value()[0];
  br.l2 = l2.value()[0];
  br.l3 = l3.value()[0];
  br.total = total.value()[0];
  return {total, br};
}

class MutualTrainer {
 public:
  explicit MutualTrainer(TrainConfig cfg) : cfg_(std::move(cfg)), opt_(cfg_.momentum) { cfg_.validate(); }

  const TrainConfig& config() const { return cfg_; }

  // One forward/backward pass and one optimizer update.
  LossBreakdown train_step(ModelState& m, const Batch& b, double lr) {
    return train_step(m, b, lr, {cfg_.weights.w1, cfg_.weights.w2, cfg_.weights.w3},
                      [](const Parameter&) { return true; });
  }

  template <typename Filter>
  LossBreakdown train_step(ModelState& m, const Batch& b, double lr, const StepTerms& terms, Filter&& trainable) {
    Graph g(true);
    ObjectiveResult obj;
    try {
      obj = build_objective(g, m, b, cfg_, terms);
    } catch (const NonFiniteValue& e) {
      throw TrainingDiverged(std::string("training diverged: ") + e.what() + " (lr=" + std::to_string(lr) + ")");
    }
    const LossBreakdown& br = obj.breakdown;
    if (!std::isfinite(br.total)) {
      std::ostringstream os;
      os << "training diverged: non-finite loss (l1=" << br.l1 << " l2=" << br.l2 << " l3=" << br.l3
         << " d_image=" << br.d_image << " d_text=" << br.d_text << " lr=" << lr << ")";
      throw TrainingDiverged(os.str());
    }
    m.zero_grad();
    g.backward(obj.total);
    opt_.step(m, lr, trainable);
    m.visit([&](const Parameter& p) {
      for (double v : p.value.data)
        if (!std::isfinite(v)) {
          std::ostringstream os;
          os << "training diverged: non-finite parameter '" << p.name << "' after update (lr=" << lr << ")";
          throw TrainingDiverged(os.str());
        }
    });
    return br;
  }

 private:
  TrainConfig cfg_;
  NesterovSgd opt_;
};

// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase = "joint";
  double lr = 0.0;
  LossBreakdown loss;
  double val_acc_image = 0.0;
  double val_acc_text = 0.0;
  double val_acc_fusion = 0.0;
  bool improved = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t stopping_epoch = 0;
  std::size_t best_epoch = 0;
  double wall_seconds = 0.0;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["phase"] = r.phase;
  j["lr"] = r.lr;
  j["l1"] = r.loss.l1;
  j["l2"] = r.loss.l2;
  j["l3"] = r.loss.l3;
  j["total"] = r.loss.total;
  j["d_image"] = r.loss.d_image;
  j["d_text"] = r.loss.d_text;
  j["val_acc_image"] = r.val_acc_image;
  j["val_acc_text"] = r.val_acc_text;
  j["val_acc_fusion"] = r.val_acc_fusion;
  j["improved"] = r.improved;
  return j;
}

inline void write_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  for (const auto& r : log.epochs) out << to_json(r).dump() << '\n';
}

struct FitOptions {
  // Replaces the measured validation metric (epoch, measured) -> used value.
  std::function<double(std::size_t, double)> val_metric_override;
  // Called after each epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  ModelState model;  // best-validation state
  TrainLog log;
};

namespace detail {

struct PhasePlan {
  const char* name;
  StepTerms terms;
  std::function<bool(const Parameter&)> trainable;
  // Validation score tracked for early stopping.
  std::function<double(const EpochRecord&)> score;
};

inline bool is_head_parameter(const Parameter& p) { return p.name.starts_with("fusion_head."); }

}  // namespace detail

inline FitResult fit(ModelState model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                     const FitOptions& opts = {}) {
  cfg.validate();
  if (train.empty()) throw InvalidInput("fit: training split is empty");
  if (val.empty()) throw InvalidInput("fit: validation split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  const AttentionMode mode = cfg.attention_mode();

  std::vector<detail::PhasePlan> phases;
  const LossWeights& w = cfg.weights;
  if (cfg.schedule == Schedule::kJoint) {
    phases.push_back({"joint", {w.w1, w.w2, w.w3}, [](const Parameter&) { return true; },
                      [](const EpochRecord& r) { return r.val_acc_fusion; }});
  } else {
    phases.push_back({"branches", {w.w1, w.w2, 0.0}, [](const Parameter& p) { return !detail::is_head_parameter(p); },
                      [](const EpochRecord& r) { return 0.5 * (r.val_acc_image + r.val_acc_text); }});
    phases.push_back({"head", {0.0, 0.0, 1.0}, detail::is_head_parameter,
                      [](const EpochRecord& r) { return r.val_acc_fusion; }});
  }

  FitResult res{model, {}};
  std::size_t global_epoch = 0;
  for (const auto& phase : phases) {
    MutualTrainer trainer(cfg);
    double best = -1.0;
    std::size_t stale = 0;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch, ++global_epoch) {
      EpochRecord rec;
      rec.epoch = global_epoch;
      rec.phase = phase.name;
      rec.lr = lr_at(epoch, cfg);

      std::vector<std::size_t> order(train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(derive_seed(cfg.seed, 1000 + global_epoch));
      rng.shuffle(order);

      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        const Batch b = make_batch(train, std::span<const std::size_t>(order).subspan(start, end - start));
        const LossBreakdown br = trainer.train_step(model, b, rec.lr, phase.terms, phase.trainable);
        rec.loss.l1 += br.l1;
        rec.loss.l2 += br.l2;
        rec.loss.l3 += br.l3;
        rec.loss.total += br.total;
        rec.loss.d_image += br.d_image;
        rec.loss.d_text += br.d_text;
        ++batches;
      }
      const double inv = 1.0 / static_cast<double>(batches);
      for (double* v : {&rec.loss.l1, &rec.loss.l2, &rec.loss.l3, &rec.loss.total, &rec.loss.d_image,
                        &rec.loss.d_text})
        *v *= inv;

      HeadScores scores;
      try {
        scores = predict(model, val, mode);
      } catch (const NonFiniteValue& e) {
        throw TrainingDiverged(std::string("training diverged during validation: ") + e.what());
      }
      rec.val_acc_image = accuracy(scores.image, val);
      rec.val_acc_text = accuracy(scores.text, val);
      rec.val_acc_fusion = accuracy(scores.fusion, val);

      double metric = phase.score(rec);
      if (opts.val_metric_override) metric = opts.val_metric_override(global_epoch, metric);
      if (metric > best) {
        best = metric;
        stale = 0;
        rec.improved = true;
        res.model = model;
        res.log.best_epoch = global_epoch;
      } else {
        ++stale;
      }
      res.log.epochs.push_back(rec);
      res.log.stopping_epoch = global_epoch;
      if (opts.on_epoch) opts.on_epoch(rec);
      if (stale >= cfg.patience) {
        ++global_epoch;
        break;
      }
    }
    // The next phase continues from the best state of this one.
    model = res.model;
  }
  res.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace mfuse
