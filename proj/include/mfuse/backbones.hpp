#pragma once

// Desk-scale image and text branches with fusion hook points.
//
// Image branch: f x f average downsampling, a 3x3 stem convolution, then a
// stack of residual blocks (block 0 keeps resolution, later blocks halve it),
// global average pooling and an affine map to the d-dimensional feature X_1.
//
// Text branch: token embedding, a stack of position-wise residual transform
// blocks, mean pooling over the sequence and an affine map to X_2.
//
// A fusion site k sits after block k of both branches.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfuse/attention_fusion.hpp"
#include "mfuse/autograd.hpp"
#include "mfuse/layers.hpp"
#include "mfuse/rng.hpp"

namespace mfuse {

enum class FusionCombine { kSum, kAverage };

struct BranchSpec {
  std::vector<std::size_t> widths;  // channels (image) or hidden units (text) per block
  std::size_t feature_dim = 32;
  std::size_t n_classes = 4;
  std::vector<std::size_t> fusion_sites{0};

  std::size_t n_blocks() const { return widths.size(); }

  void validate(const std::string& which) const {
    if (widths.size() < 2) throw InvalidConfig(which + ": at least two blocks are required");
    for (std::size_t w : widths)
      if (w == 0) throw InvalidConfig(which + ": block widths must be positive");
    if (feature_dim == 0) throw InvalidConfig(which + ": feature_dim must be positive");
    if (n_classes < 2) throw InvalidConfig(which + ": n_classes must be at least 2");
    for (std::size_t s : fusion_sites)
      if (s + 1 >= widths.size())
        throw InvalidConfig(which + ": fusion site " + std::to_string(s) + " must precede the last block");
    if (!std::is_sorted(fusion_sites.begin(), fusion_sites.end()) ||
        std::adjacent_find(fusion_sites.begin(), fusion_sites.end()) != fusion_sites.end())
      throw InvalidConfig(which + ": fusion sites must be strictly increasing");
  }
};

struct ModelSpec {
  BranchSpec image{{16, 32, 64}};
  BranchSpec text{{64, 64}};
  std::size_t image_size = 32;
  std::size_t stem_pool = 4;
  std::size_t seq_len = 32;
  std::size_t vocab_size = 64;
  GateMode gate = GateMode::kInput;
  FusionCombine combine = FusionCombine::kSum;

  void validate() const {
    image.validate("image branch");
    text.validate("text branch");
    if (image.feature_dim != text.feature_dim)
      throw InvalidConfig("image and text feature_dim must be equal");
    if (image.n_classes != text.n_classes) throw InvalidConfig("image and text n_classes must be equal");
    if (image.fusion_sites != text.fusion_sites)
      throw InvalidConfig("image and text fusion_sites must be identical");
    if (image_size == 0 || stem_pool == 0 || image_size % stem_pool)
      throw InvalidConfig("stem_pool must divide image_size");
    std::size_t res = image_size / stem_pool;
    for (std::size_t b = 1; b < image.n_blocks(); ++b) res = (res + 1) / 2;
    if (res == 0) throw InvalidConfig("image too small for the block stack");
    if (seq_len == 0 || vocab_size == 0) throw InvalidConfig("seq_len and vocab_size must be positive");
  }

  std::size_t n_classes() const { return image.n_classes; }
  std::size_t feature_dim() const { return image.feature_dim; }
  const std::vector<std::size_t>& fusion_sites() const { return image.fusion_sites; }
};

// ---------------------------------------------------------------------------

struct ResidualBlock {
  Conv conv1;
  Conv conv2;
  std::optional<Conv> shortcut;  // 1x1 projection when width or stride changes

  ResidualBlock() = default;
  ResidualBlock(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng)
      : conv1(name + ".conv1", cin, cout, 3, stride, rng), conv2(name + ".conv2", cout, cout, 3, 1, rng) {
    if (cin != cout || stride != 1) shortcut.emplace(name + ".shortcut", cin, cout, 1, stride, rng);
  }

  template <typename F>
  void visit(F&& f) const {
    conv1.visit(f);
    conv2.visit(f);
    if (shortcut) shortcut->visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    conv1.visit(f);
    conv2.visit(f);
    if (shortcut) shortcut->visit(f);
  }

  Var operator()(Graph& g, const Var& x) const {
    const Var h = conv2(g, ops::relu(conv1(g, x)));
    return ops::relu(ops::add(h, shortcut ? (*shortcut)(g, x) : x));
  }
};

struct ImageBranch {
  std::size_t stem_pool = 4;
  Conv stem;
  std::vector<ResidualBlock> blocks;
  Dense feature;
  Dense classifier;

  template <typename F>
  void visit(F&& f) const {
    stem.visit(f);
    for (const auto& b : blocks) b.visit(f);
    feature.visit(f);
    classifier.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    stem.visit(f);
    for (auto& b : blocks) b.visit(f);
    feature.visit(f);
    classifier.visit(f);
  }

  // images: [N, H, W, 1] -> stem features.
  Var stem_forward(Graph& g, const Var& images) const {
    const Var x = stem_pool > 1 ? ops::avg_downsample(images, stem_pool) : images;
    return ops::relu(stem(g, x));
  }
  Var block_forward(Graph& g, std::size_t i, const Var& x) const { return blocks.at(i)(g, x); }
  Var features(Graph& g, const Var& x) const { return feature(g, ops::mean_over_positions(x)); }
  Var logits(Graph& g, const Var& x1) const { return classifier(g, x1); }
};

struct TransformBlock {
  Dense expand;
  Dense contract;
  std::optional<Dense> shortcut;

  TransformBlock() = default;
  TransformBlock(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng)
      : expand(name + ".ff1", cin, cout, rng), contract(name + ".ff2", cout, cout, rng, 1.0) {
    if (cin != cout) shortcut.emplace(name + ".shortcut", cin, cout, rng, 1.0);
  }

  template <typename F>
  void visit(F&& f) const {
    expand.visit(f);
    contract.visit(f);
    if (shortcut) shortcut->visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    expand.visit(f);
    contract.visit(f);
    if (shortcut) shortcut->visit(f);
  }

  Var operator()(Graph& g, const Var& x) const {
    const Var h = contract(g, ops::relu(expand(g, x)));
    return ops::add(h, shortcut ? (*shortcut)(g, x) : x);
  }
};

struct TextBranch {
  Parameter embedding;  // [vocab, widths[0]]
  std::vector<TransformBlock> blocks;
  Dense feature;
  Dense classifier;

  template <typename F>
  void visit(F&& f) const {
    f(embedding);
    for (const auto& b : blocks) b.visit(f);
    feature.visit(f);
    classifier.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    f(embedding);
    for (auto& b : blocks) b.visit(f);
    feature.visit(f);
    classifier.visit(f);
  }

  Var embed(Graph& g, std::span<const int> tokens, std::size_t n, std::size_t len) const {
    return ops::embedding(g.parameter(embedding), tokens, n, len);
  }
  Var block_forward(Graph& g, std::size_t i, const Var& x) const { return blocks.at(i)(g, x); }
  Var features(Graph& g, const Var& x) const { return feature(g, ops::mean_over_positions(x)); }
  Var logits(Graph& g, const Var& x2) const { return classifier(g, x2); }
};

inline ImageBranch build_image_branch(const BranchSpec& spec, std::size_t stem_pool, std::uint64_t seed) {
  spec.validate("image branch");
  Rng rng(derive_seed(seed, 1));
  ImageBranch b;
  b.stem_pool = stem_pool;
  b.stem = Conv("image.stem", 1, spec.widths[0], 3, 1, rng);
  std::size_t cin = spec.widths[0];
  for (std::size_t i = 0; i < spec.n_blocks(); ++i) {
    b.blocks.emplace_back("image.block" + std::to_string(i), cin, spec.widths[i], i == 0 ? 1 : 2, rng);
    cin = spec.widths[i];
  }
  b.feature = Dense("image.feature", cin, spec.feature_dim, rng, 1.0);
  b.classifier = Dense("image.classifier", spec.feature_dim, spec.n_classes, rng, 1.0);
  return b;
}

inline TextBranch build_text_branch(const BranchSpec& spec, std::size_t vocab_size, std::uint64_t seed) {
  spec.validate("text branch");
  if (vocab_size == 0) throw InvalidConfig("text branch: vocab_size must be positive");
  Rng rng(derive_seed(seed, 2));
  TextBranch b;
  b.embedding = normal_weight("text.embedding", vocab_size, spec.widths[0], rng, 1.0);
  // Embedding rows are looked up, not multiplied; unit-variance entries.
  for (double& v : b.embedding.value.data) v *= std::sqrt(static_cast<double>(vocab_size));
  std::size_t cin = spec.widths[0];
  for (std::size_t i = 0; i < spec.n_blocks(); ++i) {
    b.blocks.emplace_back("text.block" + std::to_string(i), cin, spec.widths[i], rng);
    cin = spec.widths[i];
  }
  b.feature = Dense("text.feature", cin, spec.feature_dim, rng, 1.0);
  b.classifier = Dense("text.classifier", spec.feature_dim, spec.n_classes, rng, 1.0);
  return b;
}

// ---------------------------------------------------------------------------

struct FusionHeadParams {
  Dense classifier;  // d -> K

  template <typename F>
  void visit(F&& f) const {
    classifier.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    classifier.visit(f);
  }
};

// All learnable state of the joint model. Copyable; copies are independent.
struct ModelState {
  ModelSpec spec;
  std::uint64_t seed = 0;
  ImageBranch image;
  TextBranch text;
  std::vector<FusionSiteParams> fusion;  // one per fusion site
  FusionHeadParams head;

  template <typename F>
  void visit(F&& f) const {
    image.visit(f);
    text.visit(f);
    for (const auto& s : fusion) s.visit(f);
    head.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    image.visit(f);
    text.visit(f);
    for (auto& s : fusion) s.visit(f);
    head.visit(f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const Parameter& p) { n += p.value.size(); });
    return n;
  }

  void zero_grad() const {
    visit([](const Parameter& p) { p.zero_grad(); });
  }
};

inline ModelState build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelState m;
  m.spec = spec;
  m.seed = seed;
  m.image = build_image_branch(spec.image, spec.stem_pool, seed);
  m.text = build_text_branch(spec.text, spec.vocab_size, seed);
  Rng rng(derive_seed(seed, 3));
  for (std::size_t site : spec.fusion_sites())
    m.fusion.emplace_back("fusion" + std::to_string(site), spec.image.widths[site], spec.text.widths[site], rng);
  m.head.classifier = Dense("fusion_head.classifier", spec.feature_dim(), spec.n_classes(), rng, 1.0);
  return m;
}

// ---------------------------------------------------------------------------

enum class AttentionMode {
  kDisabled,  // branches run independently
  kEnabled,   // fusion sites gate both branches
  kBypass,    // fusion sites run, but the gate is forced to 1
};

struct JointOutput {
  Var logits_img;
  Var logits_txt;
  Var x1;
  Var x2;
  std::vector<BlockTrace> traces;  // per fusion site, when attention runs
};

struct BatchInput {
  Tensor images;            // [N, H, W, 1]
  std::vector<int> tokens;  // N * L ids
  std::size_t n = 0;
  std::size_t seq_len = 0;
};

inline JointOutput forward_joint(Graph& g, const ModelState& m, const BatchInput& in, AttentionMode mode) {
  const ModelSpec& s = m.spec;
  if (in.images.rank() != 4 || in.images.dim(0) != in.n || in.images.dim(1) != s.image_size ||
      in.images.dim(2) != s.image_size || in.images.dim(3) != 1)
    throw InvalidInput("forward_joint: images must be [N," + std::to_string(s.image_size) + "," +
                       std::to_string(s.image_size) + ",1], got " + shape_str(in.images.shape));
  if (in.seq_len != s.seq_len || in.tokens.size() != in.n * in.seq_len)
    throw InvalidInput("forward_joint: token batch must be N x " + std::to_string(s.seq_len));

  JointOutput out;
  Var xi = m.image.stem_forward(g, g.constant(in.images));
  Var xt = m.text.embed(g, in.tokens, in.n, in.seq_len);
  const auto& sites = s.fusion_sites();
  std::size_t next_site = 0;
  const std::size_t depth = std::max(m.image.blocks.size(), m.text.blocks.size());
  for (std::size_t b = 0; b < depth; ++b) {
    if (b < m.image.blocks.size()) xi = m.image.block_forward(g, b, xi);
    if (b < m.text.blocks.size()) xt = m.text.block_forward(g, b, xt);
    if (next_site < sites.size() && sites[next_site] == b) {
      if (mode != AttentionMode::kDisabled) {
        const FusionSiteParams& fp = m.fusion[next_site];
        BlockTrace trace;
        const Var di = visual_attention(g, fp.visual, xi, &trace);
        const Var dt = text_attention(g, fp.text, xt, &trace);
        if (mode == AttentionMode::kEnabled) {
          const GatedPair gp = fuse_and_gate(di, dt, xi, xt, s.gate);
          xi = gp.image;
          xt = gp.text;
        } else {
          const std::size_t n = in.n;
          const Var one_i = g.constant(Tensor({n, xi.shape().back()}, 1.0));
          const Var one_t = g.constant(Tensor({n, xt.shape().back()}, 1.0));
          xi = ops::channel_scale(xi, one_i);
          xt = ops::channel_scale(xt, one_t);
        }
        out.traces.push_back(std::move(trace));
      }
      ++next_site;
    }
  }
  out.x1 = m.image.features(g, xi);
  out.x2 = m.text.features(g, xt);
  out.logits_img = m.image.logits(g, out.x1);
  out.logits_txt = m.text.logits(g, out.x2);
  return out;
}

}  // namespace mfuse
