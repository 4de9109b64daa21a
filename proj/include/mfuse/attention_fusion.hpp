#pragma once

// Self-attention fusion block placed between intermediate blocks of the image
// and text branches.
//
// Image path: the feature map is pooled twice (global average and global max)
// into two channel descriptors. Each descriptor drives its own self-attention
// block whose query comes from that descriptor and whose keys/values range
// over both descriptors. The two outputs are concatenated and projected back
// to C_img.
//
// Text path: the sequence is max-pooled into one descriptor and passed
// through a single self-attention block, then projected back to C_txt.
//
// The two resulting descriptors are concatenated into the fusion map, passed
// through a sigmoid, and each slice rescales its branch's features channel by
// channel at every spatial or sequence position.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mfuse/autograd.hpp"
#include "mfuse/layers.hpp"
#include "mfuse/rng.hpp"

namespace mfuse {

// ---------------------------------------------------------------------------
// Value types

struct ImageFeatureMap {
  Tensor grid;  // [H, W, C]

  ImageFeatureMap() = default;
  explicit ImageFeatureMap(Tensor t) : grid(std::move(t)) {
    if (grid.rank() != 3 || grid.empty())
      throw InvalidInput("ImageFeatureMap requires a non-empty [H, W, C] grid, got " +
                         shape_str(grid.shape));
  }
  ImageFeatureMap(std::size_t h, std::size_t w, std::size_t c, std::vector<double> values)
      : ImageFeatureMap(Tensor({h, w, c}, std::move(values))) {}

  std::size_t height() const { return grid.dim(0); }
  std::size_t width() const { return grid.dim(1); }
  std::size_t channels() const { return grid.dim(2); }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return grid[(y * width() + x) * channels() + c];
  }
};

struct TextFeatureSequence {
  Tensor seq;  // [L, C]

  TextFeatureSequence() = default;
  explicit TextFeatureSequence(Tensor t) : seq(std::move(t)) {
    if (seq.rank() != 2 || seq.empty())
      throw InvalidInput("TextFeatureSequence requires a non-empty [L, C] array, got " +
                         shape_str(seq.shape));
  }
  TextFeatureSequence(std::size_t len, std::size_t c, std::vector<double> values)
      : TextFeatureSequence(Tensor({len, c}, std::move(values))) {}

  std::size_t length() const { return seq.dim(0); }
  std::size_t channels() const { return seq.dim(1); }
  double at(std::size_t t, std::size_t c) const { return seq[t * channels() + c]; }
};

using ChannelDescriptor = std::vector<double>;

struct AttentionState {
  Tensor q;  // [m_q, d_f]
  Tensor k;  // [m, d_f]
  Tensor v;  // [m, d_f]
  Tensor a;  // [m_q, m]
};

enum class GateMode {
  kInput,  // sigmoid(map) rescales the branch inputs
  kSelf,   // sigmoid(map) * map rescales the branch inputs
};

// ---------------------------------------------------------------------------
// Parameters

// Three independent affine projections for query, key and value.
struct SelfAttentionParams {
  Dense query;
  Dense key;
  Dense value;

  SelfAttentionParams() = default;
  SelfAttentionParams(const std::string& name, std::size_t width, std::size_t d_f, Rng& rng)
      : query(name + ".query", width, d_f, rng, 1.0),
        key(name + ".key", width, d_f, rng, 1.0),
        value(name + ".value", width, d_f, rng, 1.0) {}

  std::size_t input_width() const { return query.in(); }
  std::size_t feature_width() const { return query.out(); }

  template <typename F>
  void visit(F&& f) const {
    query.visit(f);
    key.visit(f);
    value.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    query.visit(f);
    key.visit(f);
    value.visit(f);
  }
};

struct VisualAttentionParams {
  SelfAttentionParams avg_block;
  SelfAttentionParams max_block;
  Dense projection;  // [2 d_f] -> C_img

  VisualAttentionParams() = default;
  VisualAttentionParams(const std::string& name, std::size_t channels, std::size_t d_f, Rng& rng)
      : avg_block(name + ".avg", channels, d_f, rng),
        max_block(name + ".max", channels, d_f, rng),
        projection(name + ".proj", 2 * d_f, channels, rng, 1.0) {}

  std::size_t channels() const { return projection.out(); }

  template <typename F>
  void visit(F&& f) const {
    avg_block.visit(f);
    max_block.visit(f);
    projection.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    avg_block.visit(f);
    max_block.visit(f);
    projection.visit(f);
  }
};

struct TextAttentionParams {
  SelfAttentionParams block;
  Dense projection;  // d_f -> C_txt

  TextAttentionParams() = default;
  TextAttentionParams(const std::string& name, std::size_t channels, std::size_t d_f, Rng& rng)
      : block(name + ".max", channels, d_f, rng), projection(name + ".proj", d_f, channels, rng, 1.0) {}

  std::size_t channels() const { return projection.out(); }

  template <typename F>
  void visit(F&& f) const {
    block.visit(f);
    projection.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    block.visit(f);
    projection.visit(f);
  }
};

struct FusionSiteParams {
  VisualAttentionParams visual;
  TextAttentionParams text;

  FusionSiteParams() = default;
  // d_f = 0 selects the incoming descriptor width.
  FusionSiteParams(const std::string& name, std::size_t c_img, std::size_t c_txt, Rng& rng,
                   std::size_t d_f_img = 0, std::size_t d_f_txt = 0)
      : visual(name + ".visual", c_img, d_f_img ? d_f_img : c_img, rng),
        text(name + ".text", c_txt, d_f_txt ? d_f_txt : c_txt, rng) {}

  template <typename F>
  void visit(F&& f) const {
    visual.visit(f);
    text.visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    visual.visit(f);
    text.visit(f);
  }
};

// ---------------------------------------------------------------------------
// Batched graph ops. Image features are [N, H, W, C], text features [N, L, C],
// descriptors [N, C].

struct BlockTrace {
  std::vector<Tensor> maps;  // one attention map per self-attention block
};

struct QkvVars {
  Var q, k, v;
};

inline QkvVars project_qkv(Graph& g, const SelfAttentionParams& p, const Var& query_tokens,
                           const Var& kv_tokens) {
  if (query_tokens.shape().back() != p.input_width() || kv_tokens.shape().back() != p.input_width())
    throw InvalidConfig("qkv_project: descriptor width does not match parameter input width " +
                        std::to_string(p.input_width()));
  return {p.query(g, query_tokens), p.key(g, kv_tokens), p.value(g, kv_tokens)};
}

// Image-path descriptor [N, C_img].
inline Var visual_attention(Graph& g, const VisualAttentionParams& p, const Var& x_img,
                            BlockTrace* trace = nullptr) {
  const Var avg = ops::mean_over_positions(x_img);
  const Var mx = ops::max_over_positions(x_img);
  const Var tokens = ops::stack_tokens({avg, mx});
  std::vector<Var> outs;
  for (const auto& [block, own] : {std::pair{&p.avg_block, avg}, std::pair{&p.max_block, mx}}) {
    const QkvVars qkv = project_qkv(g, *block, ops::stack_tokens({own}), tokens);
    ops::AttentionResult att = ops::attention(qkv.q, qkv.k, qkv.v);
    if (trace) trace->maps.push_back(std::move(att.map));
    outs.push_back(ops::flatten_tokens(att.output));
  }
  return p.projection(g, ops::concat_last(outs[0], outs[1]));
}

// Text-path descriptor [N, C_txt].
inline Var text_attention(Graph& g, const TextAttentionParams& p, const Var& x_txt,
                          BlockTrace* trace = nullptr) {
  const Var tokens = ops::stack_tokens({ops::max_over_positions(x_txt)});
  const QkvVars qkv = project_qkv(g, p.block, tokens, tokens);
  ops::AttentionResult att = ops::attention(qkv.q, qkv.k, qkv.v);
  if (trace) trace->maps.push_back(std::move(att.map));
  return p.projection(g, ops::flatten_tokens(att.output));
}

// Gate vector for a descriptor map under the chosen mode.
inline Var gate_values(const Var& fusion_map, GateMode mode) {
  const Var s = ops::sigmoid(fusion_map);
  return mode == GateMode::kInput ? s : ops::mul(s, fusion_map);
}

struct GatedPair {
  Var image;
  Var text;
};

// Concatenates the two descriptors, gates, and rescales each branch's
// features by its slice.
inline GatedPair fuse_and_gate(const Var& img_desc, const Var& txt_desc, const Var& x_img,
                               const Var& x_txt, GateMode mode = GateMode::kInput) {
  const std::size_t ci = x_img.shape().back(), ct = x_txt.shape().back();
  if (img_desc.shape().size() != 2 || img_desc.shape()[1] != ci || txt_desc.shape().size() != 2 ||
      txt_desc.shape()[1] != ct)
    throw InvalidConfig("fuse_and_gate: descriptor lengths must match C_img=" + std::to_string(ci) +
                        " and C_txt=" + std::to_string(ct));
  const Var gate = gate_values(ops::concat_last(img_desc, txt_desc), mode);
  return {ops::channel_scale(x_img, ops::slice_last(gate, 0, ci)),
          ops::channel_scale(x_txt, ops::slice_last(gate, ci, ct))};
}

// ---------------------------------------------------------------------------
// Single-sample value API over the same graph ops.

namespace detail {

inline Tensor with_batch(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape.begin(), t.shape.end());
  return t.reshaped(std::move(s));
}

inline Tensor drop_batch(const Tensor& t) {
  Shape s(t.shape.begin() + 1, t.shape.end());
  return t.reshaped(std::move(s));
}

}  // namespace detail

inline ChannelDescriptor global_avg_pool_2d(const ImageFeatureMap& x) {
  if (x.grid.empty()) throw InvalidInput("global_avg_pool_2d: empty grid");
  Graph g(false);
  return ops::mean_over_positions(g.constant(detail::with_batch(x.grid))).value().data;
}

inline ChannelDescriptor global_max_pool_2d(const ImageFeatureMap& x) {
  if (x.grid.empty()) throw InvalidInput("global_max_pool_2d: empty grid");
  Graph g(false);
  return ops::max_over_positions(g.constant(detail::with_batch(x.grid))).value().data;
}

inline ChannelDescriptor global_max_pool_1d(const TextFeatureSequence& x) {
  if (x.seq.empty()) throw InvalidInput("global_max_pool_1d: empty sequence");
  Graph g(false);
  return ops::max_over_positions(g.constant(detail::with_batch(x.seq))).value().data;
}

// Projects one descriptor through the three independent layers.
inline AttentionState qkv_project(const ChannelDescriptor& desc, const SelfAttentionParams& p) {
  Graph g(false);
  const Var tok = g.constant(Tensor({1, 1, desc.size()}, desc));
  const QkvVars qkv = project_qkv(g, p, tok, tok);
  return {detail::drop_batch(qkv.q.value()), detail::drop_batch(qkv.k.value()),
          detail::drop_batch(qkv.v.value()), Tensor()};
}

struct AttentionOutput {
  Tensor output;  // [m_q, d_v]
  Tensor map;     // [m_q, m]
};

// q: [m_q, d_f], k: [m, d_f], v: [m, d_v].
inline AttentionOutput scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw InvalidConfig("scaled_dot_attention: inputs must be 2-D");
  Graph g(false);
  ops::AttentionResult r = ops::attention(g.constant(detail::with_batch(q)), g.constant(detail::with_batch(k)),
                                          g.constant(detail::with_batch(v)));
  return {detail::drop_batch(r.output.value()), detail::drop_batch(r.map)};
}

inline ChannelDescriptor visual_attention_block(const ImageFeatureMap& x, const VisualAttentionParams& p,
                                                BlockTrace* trace = nullptr) {
  Graph g(false);
  return visual_attention(g, p, g.constant(detail::with_batch(x.grid)), trace).value().data;
}

inline ChannelDescriptor text_attention_block(const TextFeatureSequence& x, const TextAttentionParams& p,
                                              BlockTrace* trace = nullptr) {
  Graph g(false);
  return text_attention(g, p, g.constant(detail::with_batch(x.seq)), trace).value().data;
}

inline std::pair<ImageFeatureMap, TextFeatureSequence> fuse_and_gate(
    const ChannelDescriptor& img_desc, const ChannelDescriptor& txt_desc, const ImageFeatureMap& x_img,
    const TextFeatureSequence& x_txt, GateMode mode = GateMode::kInput) {
  if (img_desc.size() != x_img.channels() || txt_desc.size() != x_txt.channels())
    throw InvalidConfig("fuse_and_gate: descriptor lengths must match branch channel counts");
  Graph g(false);
  const GatedPair out =
      fuse_and_gate(g.constant(Tensor({1, img_desc.size()}, img_desc)),
                    g.constant(Tensor({1, txt_desc.size()}, txt_desc)), g.constant(detail::with_batch(x_img.grid)),
                    g.constant(detail::with_batch(x_txt.seq)), mode);
  return {ImageFeatureMap(detail::drop_batch(out.image.value())),
          TextFeatureSequence(detail::drop_batch(out.text.value()))};
}

}  // namespace mfuse
