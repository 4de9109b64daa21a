#pragma once

// Experiment configuration as a JSON tree. Unknown keys are errors; every
// error names the offending path (e.g. "train.weights").
//
// {
//   "data": {
//     "source": "synthetic" | "manifest",
//     // synthetic
//     "n_classes", "class_names" (array or "rvl_cdip" | "tobacco3482"),
//     "train_per_class", "val_per_class", "test_per_class", "image_size",
//     "seq_len", "vocab_size", "pixel_noise", "text_signal",
//     "image_label_noise", "text_label_noise", "class_overlap_rate", "seed",
//     // manifest
//     "manifest", "class_names", "image_size", "seq_len", "vocab_size"
//   },
//   "model": { "image": {"widths", "feature_dim", "fusion_sites"},
//              "text": {"widths"}, "stem_pool", "gate": "input" | "self",
//              "combine": "sum" | "average" },
//   "train": { "regime", "beta", "weights": [w1, w2, w3], "batch_size",
//              "initial_lr", "drop", "iter_drop", "momentum", "max_epochs",
//              "patience", "seed", "lr_schedule": "step" | "continuous",
//              "schedule": "joint" | "two_phase", "bypass_attention" },
//   "evaluation": { "mode": "intra" | "inter", "mapping",
//                   "source_classes" (array or bundled list name),
//                   "per_class", "seed", "manifest" },
//   "compare": { "regimes": [...], "seeds": [...] },
//   "output": "dir"
// }
// Relative paths resolve against the config file's directory. The model's
// class count, image size, sequence length and vocabulary come from "data".

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfuse/data.hpp"
#include "mfuse/trainer.hpp"

namespace mfuse {

using json = nlohmann::json;

enum class EvalMode { kIntra, kInter };

struct EvaluationConfig {
  EvalMode mode = EvalMode::kIntra;
  std::filesystem::path mapping;              // inter only
  std::vector<std::string> source_classes;    // synthetic transfer set vocabulary
  std::size_t per_class = 50;                 // synthetic transfer set size
  std::uint64_t seed = 12345;
  std::filesystem::path manifest;             // external evaluation set (optional)
};

struct ExperimentConfig {
  bool synthetic = true;
  DatasetSpec data;
  std::filesystem::path manifest;
  ModelSpec model;
  TrainConfig train;
  EvaluationConfig evaluation;
  std::vector<Regime> compare_regimes;
  std::vector<std::uint64_t> compare_seeds{0, 1, 2, 3, 4};
  std::filesystem::path output;  // empty -> chosen by the runner
  nlohmann::ordered_json echo;   // the parsed document
};

namespace config_detail {

// Typed access to one JSON object that remembers which keys were read.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& msg) {
    throw ValidationError("config: " + path + ": " + msg);
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = raw(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v->is_number_integer() || v->get<long long>() < 0) fail(at(key), "expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) fail(at(key), "expected a number");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) fail(at(key), "expected true or false");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) fail(at(key), "expected a string");
      }
      out = v->get<T>();
    } catch (const json::exception& e) {
      fail(at(key), e.what());
    }
  }

  std::optional<Node> child(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    return Node(*v, at(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(at(it.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::vector<std::string> read_class_list(const json& v, const std::string& path) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "rvl_cdip") return rvl_cdip_class_names();
    if (s == "tobacco3482") return tobacco3482_class_names();
    Node::fail(path, "unknown bundled class list '" + s + "' (rvl_cdip | tobacco3482)");
  }
  if (!v.is_array()) Node::fail(path, "expected an array of names or a bundled list name");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) Node::fail(path, "class names must be strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

template <typename Fn>
void guard(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const InvalidConfig& e) {
    Node::fail(path, e.what());
  } catch (const ValidationError& e) {
    const std::string w = e.what();
    if (w.rfind("config: ", 0) == 0) throw;
    Node::fail(path, w);
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline void read_data(Node n, ExperimentConfig& c, const std::filesystem::path& base) {
  std::string source = "synthetic";
  n.read("source", source);
  if (source != "synthetic" && source != "manifest")
    Node::fail(n.at("source"), "expected \"synthetic\" or \"manifest\"");
  c.synthetic = source == "synthetic";
  DatasetSpec& d = c.data;
  if (const json* v = n.raw("class_names")) d.class_names = read_class_list(*v, n.at("class_names"));
  n.read("image_size", d.image_size);
  n.read("seq_len", d.seq_len);
  n.read("vocab_size", d.vocab_size);
  if (c.synthetic) {
    if (n.has("manifest")) Node::fail(n.at("manifest"), "only valid with source \"manifest\"");
    n.read("n_classes", d.n_classes);
    if (!d.class_names.empty()) {
      if (n.has("n_classes") && d.n_classes != d.class_names.size())
        Node::fail(n.at("n_classes"), "does not match the number of class_names");
      d.n_classes = d.class_names.size();
    }
    n.read("train_per_class", d.train_per_class);
    n.read("val_per_class", d.val_per_class);
    n.read("test_per_class", d.test_per_class);
    n.read("pixel_noise", d.pixel_noise);
    n.read("text_signal", d.text_signal);
    n.read("image_label_noise", d.image_label_noise);
    n.read("text_label_noise", d.text_label_noise);
    n.read("class_overlap_rate", d.class_overlap_rate);
    n.read("seed", d.seed);
    guard("data", [&] { d.validate(); });
  } else {
    std::string m;
    n.read("manifest", m);
    if (m.empty()) Node::fail(n.at("manifest"), "required with source \"manifest\"");
    c.manifest = resolve(base, m);
    if (!std::filesystem::exists(c.manifest))
      Node::fail(n.at("manifest"), "file '" + c.manifest.string() + "' does not exist");
    if (d.class_names.empty()) Node::fail(n.at("class_names"), "required with source \"manifest\"");
    d.n_classes = d.class_names.size();
  }
  n.finish();
}

inline std::vector<std::size_t> read_sizes(const json& v, const std::string& path) {
  if (!v.is_array()) Node::fail(path, "expected an array of non-negative integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || e.get<long long>() < 0) Node::fail(path, "expected non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

inline void read_model(Node n, ModelSpec& m) {
  if (auto img = n.child("image")) {
    if (const json* v = img->raw("widths")) m.image.widths = read_sizes(*v, img->at("widths"));
    img->read("feature_dim", m.image.feature_dim);
    if (const json* v = img->raw("fusion_sites")) m.image.fusion_sites = read_sizes(*v, img->at("fusion_sites"));
    img->finish();
  }
  if (auto txt = n.child("text")) {
    if (const json* v = txt->raw("widths")) m.text.widths = read_sizes(*v, txt->at("widths"));
    txt->finish();
  }
  n.read("stem_pool", m.stem_pool);
  std::string gate = "input", combine = "sum";
  n.read("gate", gate);
  n.read("combine", combine);
  if (gate == "input") m.gate = GateMode::kInput;
  else if (gate == "self") m.gate = GateMode::kSelf;
  else Node::fail(n.at("gate"), "expected \"input\" or \"self\"");
  if (combine == "sum") m.combine = FusionCombine::kSum;
  else if (combine == "average") m.combine = FusionCombine::kAverage;
  else Node::fail(n.at("combine"), "expected \"sum\" or \"average\"");
  n.finish();
}

inline Regime read_regime(const json& v, const std::string& path) {
  if (!v.is_string()) Node::fail(path, "expected a regime name");
  const auto r = parse_regime(v.get<std::string>());
  if (!r) Node::fail(path, "unknown regime '" + v.get<std::string>() + "' (IL | ML_KLD | ML_TrKLD | EAML_TrKLD)");
  return *r;
}

inline void read_train(Node n, TrainConfig& t) {
  if (const json* v = n.raw("regime")) t.regime = read_regime(*v, n.at("regime"));
  n.read("beta", t.beta);
  if (const json* v = n.raw("weights")) {
    if (!v->is_array() || v->size() != 3) Node::fail(n.at("weights"), "expected [w_image, w_text, w_fusion]");
    for (const auto& e : *v)
      if (!e.is_number()) Node::fail(n.at("weights"), "weights must be numbers");
    t.weights = {(*v)[0].get<double>(), (*v)[1].get<double>(), (*v)[2].get<double>()};
    guard(n.at("weights"), [&] { t.weights.validate(); });
  }
  n.read("batch_size", t.batch_size);
  n.read("initial_lr", t.initial_lr);
  n.read("drop", t.drop);
  n.read("iter_drop", t.iter_drop);
  n.read("momentum", t.momentum);
  n.read("max_epochs", t.max_epochs);
  n.read("patience", t.patience);
  n.read("seed", t.seed);
  std::string lr = "step", sched = "joint";
  n.read("lr_schedule", lr);
  n.read("schedule", sched);
  if (lr == "step") t.lr_schedule = LrSchedule::kStep;
  else if (lr == "continuous") t.lr_schedule = LrSchedule::kContinuous;
  else Node::fail(n.at("lr_schedule"), "expected \"step\" or \"continuous\"");
  if (sched == "joint") t.schedule = Schedule::kJoint;
  else if (sched == "two_phase") t.schedule = Schedule::kTwoPhase;
  else Node::fail(n.at("schedule"), "expected \"joint\" or \"two_phase\"");
  n.read("bypass_attention", t.bypass_attention);
  n.finish();
  guard("train", [&] { t.validate(); });
}

inline void read_evaluation(Node n, EvaluationConfig& e, const std::filesystem::path& base) {
  std::string mode = "intra";
  n.read("mode", mode);
  if (mode == "intra") e.mode = EvalMode::kIntra;
  else if (mode == "inter") e.mode = EvalMode::kInter;
  else Node::fail(n.at("mode"), "expected \"intra\" or \"inter\"");
  std::string mapping, manifest;
  n.read("mapping", mapping);
  n.read("manifest", manifest);
  if (const json* v = n.raw("source_classes")) e.source_classes = read_class_list(*v, n.at("source_classes"));
  n.read("per_class", e.per_class);
  n.read("seed", e.seed);
  if (e.mode == EvalMode::kInter) {
    if (mapping.empty()) Node::fail(n.at("mapping"), "required in inter mode");
    e.mapping = resolve(base, mapping);
    if (!std::filesystem::exists(e.mapping))
      Node::fail(n.at("mapping"), "file '" + e.mapping.string() + "' does not exist");
    if (!manifest.empty()) {
      e.manifest = resolve(base, manifest);
      if (!std::filesystem::exists(e.manifest))
        Node::fail(n.at("manifest"), "file '" + e.manifest.string() + "' does not exist");
    }
    if (e.source_classes.empty()) Node::fail(n.at("source_classes"), "required in inter mode");
    if (e.manifest.empty() && e.per_class == 0) Node::fail(n.at("per_class"), "must be at least 1");
  } else {
    for (const char* k : {"mapping", "manifest", "source_classes"})
      if (n.has(k)) Node::fail(n.at(k), "only valid in inter mode");
  }
  n.finish();
}

}  // namespace config_detail

inline ExperimentConfig parse_config(const json& doc, const std::filesystem::path& base) {
  using namespace config_detail;
  ExperimentConfig c;
  c.echo = nlohmann::ordered_json::parse(doc.dump());
  Node root(doc, "");
  if (auto d = root.child("data")) read_data(*d, c, base);
  else c.data.validate();
  if (auto m = root.child("model")) read_model(*m, c.model);
  c.model.image.n_classes = c.model.text.n_classes = c.data.n_classes;
  c.model.text.feature_dim = c.model.image.feature_dim;
  c.model.text.fusion_sites = c.model.image.fusion_sites;
  c.model.image_size = c.data.image_size;
  c.model.seq_len = c.data.seq_len;
  c.model.vocab_size = c.data.vocab_size;
  guard("model", [&] { c.model.validate(); });
  if (auto t = root.child("train")) read_train(*t, c.train);
  if (auto e = root.child("evaluation")) read_evaluation(*e, c.evaluation, base);
  if (auto cmp = root.child("compare")) {
    if (const json* v = cmp->raw("regimes")) {
      if (!v->is_array()) Node::fail(cmp->at("regimes"), "expected an array of regime names");
      for (const auto& r : *v) c.compare_regimes.push_back(read_regime(r, cmp->at("regimes")));
    }
    if (const json* v = cmp->raw("seeds")) {
      c.compare_seeds.clear();
      for (std::size_t s : read_sizes(*v, cmp->at("seeds"))) c.compare_seeds.push_back(s);
      if (c.compare_seeds.empty()) Node::fail(cmp->at("seeds"), "at least one seed is required");
    }
    cmp->finish();
  }
  std::string out;
  root.read("output", out);
  if (!out.empty()) c.output = resolve(base, out);
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config: cannot open '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc, path.parent_path());
}

inline nlohmann::ordered_json to_json(const ModelSpec& s) {
  nlohmann::ordered_json j;
  auto branch = [](const BranchSpec& b) {
    nlohmann::ordered_json o;
    o["widths"] = b.widths;
    o["feature_dim"] = b.feature_dim;
    o["n_classes"] = b.n_classes;
    o["fusion_sites"] = b.fusion_sites;
    return o;
  };
  j["image"] = branch(s.image);
  j["text"] = branch(s.text);
  j["image_size"] = s.image_size;
  j["stem_pool"] = s.stem_pool;
  j["seq_len"] = s.seq_len;
  j["vocab_size"] = s.vocab_size;
  j["gate"] = s.gate == GateMode::kInput ? "input" : "self";
  j["combine"] = s.combine == FusionCombine::kSum ? "sum" : "average";
  return j;
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  try {
    auto branch = [](const json& o, BranchSpec& b) {
      b.widths = o.at("widths").get<std::vector<std::size_t>>();
      b.feature_dim = o.at("feature_dim").get<std::size_t>();
      b.n_classes = o.at("n_classes").get<std::size_t>();
      b.fusion_sites = o.at("fusion_sites").get<std::vector<std::size_t>>();
    };
    branch(j.at("image"), s.image);
    branch(j.at("text"), s.text);
    s.image_size = j.at("image_size").get<std::size_t>();
    s.stem_pool = j.at("stem_pool").get<std::size_t>();
    s.seq_len = j.at("seq_len").get<std::size_t>();
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.gate = j.at("gate").get<std::string>() == "self" ? GateMode::kSelf : GateMode::kInput;
    s.combine = j.at("combine").get<std::string>() == "average" ? FusionCombine::kAverage : FusionCombine::kSum;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model spec: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace mfuse
