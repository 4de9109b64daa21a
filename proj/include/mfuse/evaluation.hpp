#pragma once

// Classification metrics, precision-recall curves, average precision and the
// intra/inter-dataset evaluation protocol.
//
// Report file (JSON, one object per modality, keys in this order):
//   modality, classes, n_samples, accuracy,
//   macro {precision, recall, f1}, weighted {precision, recall, f1},
//   per_class [{name, precision, recall, f1, support, precision_undefined,
//               recall_undefined, ap}],
//   micro_ap, confusion (rows = true class, columns = predicted), notes
// A class with no positives has "ap": null.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfuse/inference.hpp"

namespace mfuse {

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

struct ClassStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
  bool precision_undefined = false;  // no predictions of this class
  bool recall_undefined = false;     // no samples of this class
};

struct Averages {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  std::vector<ClassStats> per_class;
  ConfusionMatrix confusion;
  Averages macro;
  Averages weighted;  // support-weighted
};

inline ClassificationMetrics classify_metrics(std::span<const int> truth, std::span<const int> pred, std::size_t k) {
  if (truth.size() != pred.size())
    throw InvalidInput("classify_metrics: " + std::to_string(truth.size()) + " labels but " +
                       std::to_string(pred.size()) + " predictions");
  if (k == 0) throw InvalidInput("classify_metrics: K must be positive");
  ClassificationMetrics m;
  m.confusion.assign(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int v : {truth[i], pred[i]})
      if (v < 0 || static_cast<std::size_t>(v) >= k)
        throw ValidationError("classify_metrics: label " + std::to_string(v) + " outside [0, " +
                              std::to_string(k) + ")");
    ++m.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
  }
  std::size_t correct = 0;
  m.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t tp = m.confusion[c][c];
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += m.confusion[c][j];
      col += m.confusion[j][c];
    }
    correct += tp;
    ClassStats& s = m.per_class[c];
    s.support = row;
    s.precision_undefined = col == 0;
    s.recall_undefined = row == 0;
    s.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    s.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  const double n = static_cast<double>(truth.size());
  m.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / n;
  for (const auto& s : m.per_class) {
    m.macro.precision += s.precision / static_cast<double>(k);
    m.macro.recall += s.recall / static_cast<double>(k);
    m.macro.f1 += s.f1 / static_cast<double>(k);
    if (n > 0) {
      const double w = static_cast<double>(s.support) / n;
      m.weighted.precision += w * s.precision;
      m.weighted.recall += w * s.recall;
      m.weighted.f1 += w * s.f1;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Ranking metrics

struct PRPoint {
  double threshold;
  double precision;
  double recall;
};

struct PRCurve {
  std::size_t class_id = 0;
  std::vector<PRPoint> points;  // thresholds in decreasing order
};

// One point per distinct score: everything scoring >= threshold is positive.
inline PRCurve pr_curve(std::span<const double> scores, std::span<const int> positive, std::size_t class_id = 0) {
  if (scores.size() != positive.size())
    throw InvalidInput("pr_curve: " + std::to_string(scores.size()) + " scores but " +
                       std::to_string(positive.size()) + " labels");
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw InvalidInput("pr_curve: scores must be finite");
    n_pos += positive[i] != 0;
  }
  if (n_pos == 0) throw UndefinedMetric("average precision is undefined without positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  PRCurve c{class_id, {}};
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    tp += positive[order[i]] != 0;
    ++seen;
    if (i + 1 < order.size() && scores[order[i + 1]] == scores[order[i]]) continue;
    c.points.push_back({scores[order[i]], static_cast<double>(tp) / static_cast<double>(seen),
                        static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  return c;
}

inline double average_precision(const PRCurve& c) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : c.points) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

inline double average_precision(std::span<const double> scores, std::span<const int> positive) {
  return average_precision(pr_curve(scores, positive));
}

// One-vs-rest pairs of all samples and classes pooled into one ranking.
inline double micro_average_precision(const Tensor& scores, std::span<const int> labels) {
  if (scores.rank() != 2 || scores.rows() != labels.size())
    throw InvalidInput("micro_average_precision: scores must be [n, K] with n = " + std::to_string(labels.size()) +
                       ", got " + shape_str(scores.shape));
  const std::size_t k = scores.cols();
  std::vector<int> flat(scores.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ValidationError("micro_average_precision: label " + std::to_string(labels[i]) + " outside [0, " +
                            std::to_string(k) + ")");
    flat[i * k + static_cast<std::size_t>(labels[i])] = 1;
  }
  return average_precision(scores.data, flat);
}

// ---------------------------------------------------------------------------
// Protocol

struct EvaluationReport {
  std::string modality;  // image | text | fusion
  std::vector<std::string> class_names;
  ClassificationMetrics metrics;
  std::vector<std::optional<double>> ap;  // nullopt when the class has no positives
  std::vector<PRCurve> curves;            // only classes with positives
  double micro_ap = 0.0;
  std::vector<std::string> notes;
};

inline EvaluationReport make_report(std::string modality, std::vector<std::string> class_names, const Tensor& probs,
                                    std::span<const int> labels) {
  const std::size_t k = class_names.size();
  if (probs.rank() != 2 || probs.cols() != k || probs.rows() != labels.size())
    throw InvalidInput("make_report: probabilities " + shape_str(probs.shape) + " do not match " +
                       std::to_string(labels.size()) + " samples x " + std::to_string(k) + " classes");
  EvaluationReport r;
  r.modality = std::move(modality);
  r.class_names = std::move(class_names);
  std::vector<int> pred(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) pred[i] = argmax(probs.row(i));
  r.metrics = classify_metrics(labels, pred, k);
  std::vector<double> col(labels.size());
  std::vector<int> pos(labels.size());
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = probs.data[i * k + c];
      pos[i] = labels[i] == static_cast<int>(c);
    }
    if (r.metrics.per_class[c].support == 0) {
      r.ap.push_back(std::nullopt);
      continue;
    }
    r.curves.push_back(pr_curve(col, pos, c));
    r.ap.push_back(average_precision(r.curves.back()));
  }
  r.micro_ap = micro_average_precision(probs, labels);
  return r;
}

struct ProtocolResult {
  EvaluationReport image, text, fusion;
};

// Maps logits-derived probabilities onto the kept classes: entries outside
// `keep` are masked before renormalising, which is equivalent to a softmax
// over the kept logits only.
inline Tensor restrict_classes(const Tensor& probs, const std::vector<std::size_t>& keep) {
  Tensor out({probs.rows(), keep.size()});
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < keep.size(); ++j) z += probs.data[i * probs.cols() + keep[j]];
    for (std::size_t j = 0; j < keep.size(); ++j)
      out.data[i * keep.size() + j] =
          z > 0.0 ? probs.data[i * probs.cols() + keep[j]] / z : 1.0 / static_cast<double>(keep.size());
  }
  return out;
}

// `model_classes` names the model's output classes. Without a mapping the
// evaluation set must use the same class list. With a mapping, evaluation
// labels are source names mapped onto model classes; excluded sources are
// dropped, and predictions are restricted to the mapped classes.
inline ProtocolResult run_protocol(const ModelState& model, const std::vector<std::string>& model_classes,
                                   const Dataset& eval_set, const std::optional<ClassMapping>& mapping,
                                   AttentionMode mode) {
  if (model_classes.size() != model.spec.n_classes())
    throw InvalidConfig("run_protocol: model has " + std::to_string(model.spec.n_classes()) + " outputs but " +
                        std::to_string(model_classes.size()) + " class names were given");
  if (!mapping) {
    if (eval_set.class_names != model_classes)
      throw ValidationError("run_protocol: evaluation classes differ from the model's; supply a mapping");
    if (eval_set.empty()) throw ValidationError("run_protocol: evaluation set is empty");
    const HeadScores s = predict(model, eval_set, mode);
    std::vector<int> labels;
    for (const auto& smp : eval_set.samples) labels.push_back(smp.label);
    return {make_report("image", model_classes, s.image, labels), make_report("text", model_classes, s.text, labels),
            make_report("fusion", model_classes, s.fusion, labels)};
  }

  mapping->validate();
  std::vector<std::string> names;
  for (const auto& smp : eval_set.samples) {
    if (smp.label < 0 || static_cast<std::size_t>(smp.label) >= eval_set.class_names.size())
      throw ValidationError("run_protocol: sample '" + smp.id + "' has label outside the evaluation classes");
    names.push_back(eval_set.class_names[static_cast<std::size_t>(smp.label)]);
  }
  const MappedLabels mapped = apply_mapping(names, *mapping);

  // Report classes: mapped targets in model output order.
  std::vector<std::size_t> keep;
  std::vector<std::string> report_classes;
  for (std::size_t c = 0; c < model_classes.size(); ++c)
    for (const auto& [src, dst] : mapping->pairs)
      if (dst == model_classes[c]) {
        keep.push_back(c);
        report_classes.push_back(dst);
        break;
      }
  for (const auto& [src, dst] : mapping->pairs)
    if (std::find(model_classes.begin(), model_classes.end(), dst) == model_classes.end())
      throw ValidationError("run_protocol: mapping target '" + dst + "' is not a model class");

  Dataset kept = eval_set;
  kept.samples.clear();
  kept.class_names = report_classes;
  std::vector<int> labels;
  std::size_t m = 0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    if (!mapped.kept[i]) continue;
    const std::string& target = mapped.labels[m++];
    kept.samples.push_back(eval_set.samples[i]);
    const auto at = std::find(report_classes.begin(), report_classes.end(), target) - report_classes.begin();
    kept.samples.back().label = static_cast<int>(at);
    labels.push_back(static_cast<int>(at));
  }
  if (kept.empty()) throw ValidationError("run_protocol: no samples remain after applying the mapping");

  const HeadScores s = predict(model, kept, mode);
  ProtocolResult res{make_report("image", report_classes, restrict_classes(s.image, keep), labels),
                     make_report("text", report_classes, restrict_classes(s.text, keep), labels),
                     make_report("fusion", report_classes, restrict_classes(s.fusion, keep), labels)};
  std::ostringstream note;
  note << "inter-dataset: " << (eval_set.size() - kept.size()) << " samples of excluded classes dropped; outputs of "
       << (model_classes.size() - keep.size()) << " non-mapped classes masked before argmax";
  for (EvaluationReport* r : {&res.image, &res.text, &res.fusion}) r->notes.push_back(note.str());
  return res;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::ordered_json to_json(const EvaluationReport& r) {
  using nlohmann::ordered_json;
  const auto& m = r.metrics;
  std::size_t n = 0;
  for (const auto& s : m.per_class) n += s.support;
  ordered_json j;
  j["modality"] = r.modality;
  j["classes"] = r.class_names;
  j["n_samples"] = n;
  j["accuracy"] = m.accuracy;
  auto avg = [](const Averages& a) {
    ordered_json o;
    o["precision"] = a.precision;
    o["recall"] = a.recall;
    o["f1"] = a.f1;
    return o;
  };
  j["macro"] = avg(m.macro);
  j["weighted"] = avg(m.weighted);
  ordered_json per = ordered_json::array();
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const auto& s = m.per_class[c];
    ordered_json o;
    o["name"] = r.class_names[c];
    o["precision"] = s.precision;
    o["recall"] = s.recall;
    o["f1"] = s.f1;
    o["support"] = s.support;
    o["precision_undefined"] = s.precision_undefined;
    o["recall_undefined"] = s.recall_undefined;
    o["ap"] = r.ap[c] ? ordered_json(*r.ap[c]) : ordered_json(nullptr);
    per.push_back(o);
  }
  j["per_class"] = per;
  j["micro_ap"] = r.micro_ap;
  j["confusion"] = m.confusion;
  j["notes"] = r.notes;
  return j;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + p.string() + "'");
  out << s;
}

inline void write_reports(const ProtocolResult& res, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const EvaluationReport* r : {&res.image, &res.text, &res.fusion}) j.push_back(to_json(*r));
  write_text(path, j.dump(2) + "\n");
}

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Class rows; precision/recall/F1 per modality; support last.
inline std::string per_class_table_csv(const ProtocolResult& res) {
  std::ostringstream os;
  os << "class";
  for (const char* mod : {"image", "text", "fusion"})
    for (const char* f : {"precision", "recall", "f1"}) os << ',' << mod << '_' << f;
  os << ",support\n";
  const auto& names = res.fusion.class_names;
  for (std::size_t c = 0; c < names.size(); ++c) {
    os << csv::quote(names[c]);
    for (const EvaluationReport* r : {&res.image, &res.text, &res.fusion}) {
      const auto& s = r->metrics.per_class[c];
      os << ',' << fixed(s.precision) << ',' << fixed(s.recall) << ',' << fixed(s.f1);
    }
    os << ',' << res.fusion.metrics.per_class[c].support << '\n';
  }
  return os.str();
}

inline std::string pr_curves_csv(const EvaluationReport& r) {
  std::ostringstream os;
  os << "class,threshold,precision,recall\n";
  for (const auto& c : r.curves)
    for (const auto& p : c.points)
      os << csv::quote(r.class_names[c.class_id]) << ',' << fixed(p.threshold, 8) << ',' << fixed(p.precision, 8)
         << ',' << fixed(p.recall, 8) << '\n';
  return os.str();
}

inline std::string confusion_csv(const EvaluationReport& r) {
  std::ostringstream os;
  os << "true\\predicted";
  for (const auto& n : r.class_names) os << ',' << csv::quote(n);
  os << '\n';
  for (std::size_t i = 0; i < r.class_names.size(); ++i) {
    os << csv::quote(r.class_names[i]);
    for (std::size_t v : r.metrics.confusion[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace mfuse
