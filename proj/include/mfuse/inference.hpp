#pragma once

#include <span>
#include <vector>

#include "mfuse/data.hpp"
#include "mfuse/fusion_head.hpp"

namespace mfuse {

struct Batch {
  BatchInput input;
  std::vector<int> labels;
};

inline Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  Batch b;
  const std::size_t n = indices.size(), sz = d.image_size, len = d.seq_len;
  b.input.images = Tensor({n, sz, sz, 1});
  b.input.tokens.reserve(n * len);
  b.input.n = n;
  b.input.seq_len = len;
  for (std::size_t i = 0; i < n; ++i) {
    const LabeledSample& s = d.samples.at(indices[i]);
    if (s.image.size() != sz * sz || s.tokens.size() != len)
      throw InvalidInput("make_batch: sample '" + s.id + "' does not match dataset shapes");
    std::copy(s.image.begin(), s.image.end(), b.input.images.data.begin() + static_cast<std::ptrdiff_t>(i * sz * sz));
    b.input.tokens.insert(b.input.tokens.end(), s.tokens.begin(), s.tokens.end());
    b.labels.push_back(s.label);
  }
  return b;
}

// Class probabilities of all three heads, one row per sample.
struct HeadScores {
  Tensor image;   // [n, K]
  Tensor text;    // [n, K]
  Tensor fusion;  // [n, K]
};

inline HeadScores predict(const ModelState& m, const Dataset& d, AttentionMode mode, std::size_t batch_size = 64) {
  const std::size_t n = d.size(), k = m.spec.n_classes();
  HeadScores out{Tensor({n, k}), Tensor({n, k}), Tensor({n, k})};
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(d, idx);
    Graph g(false);
    const ModelOutput o = forward_model(g, m, b.input, mode);
    const std::pair<const Var*, Tensor*> heads[] = {
        {&o.joint.logits_img, &out.image}, {&o.joint.logits_txt, &out.text}, {&o.logits_fusion, &out.fusion}};
    for (const auto& [logits, dst] : heads)
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::vector<double> p = softmax(logits->value().row(r));
        std::copy(p.begin(), p.end(), dst->data.begin() + static_cast<std::ptrdiff_t>((start + r) * k));
      }
  }
  return out;
}

// Lowest index wins ties.
inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double accuracy(const Tensor& probs, const Dataset& d) {
  if (d.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < d.size(); ++i) hit += argmax(probs.row(i)) == d.samples[i].label;
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

}  // namespace mfuse
