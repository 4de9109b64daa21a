#pragma once

// Multi-modal head: the two branch features are superposed elementwise and
// classified by one affine layer followed by softmax.

#include <span>
#include <utility>
#include <vector>

#include "mfuse/backbones.hpp"
#include "mfuse/losses.hpp"

namespace mfuse {

using FusedFeature = std::vector<double>;

inline FusedFeature superpose(std::span<const double> x1, std::span<const double> x2,
                              FusionCombine combine = FusionCombine::kSum) {
  if (x1.size() != x2.size())
    throw InvalidInput("superpose: feature lengths differ (" + std::to_string(x1.size()) + " vs " +
                       std::to_string(x2.size()) + ")");
  FusedFeature x3(x1.size());
  const double s = combine == FusionCombine::kSum ? 1.0 : 0.5;
  for (std::size_t i = 0; i < x3.size(); ++i) x3[i] = s * (x1[i] + x2[i]);
  return x3;
}

inline Var superpose(const Var& x1, const Var& x2, FusionCombine combine = FusionCombine::kSum) {
  if (x1.shape() != x2.shape())
    throw InvalidInput("superpose: feature shapes differ " + shape_str(x1.shape()) + " vs " +
                       shape_str(x2.shape()));
  const Var sum = ops::add(x1, x2);
  return combine == FusionCombine::kSum ? sum : ops::scale(sum, 0.5);
}

inline Var fusion_logits(Graph& g, const FusionHeadParams& head, const Var& x3) {
  return head.classifier(g, x3);
}

struct FusionPrediction {
  std::vector<double> logits;
  std::vector<double> probabilities;
};

inline FusionPrediction fusion_classify(std::span<const double> x3, const FusionHeadParams& head) {
  if (x3.size() != head.classifier.in())
    throw InvalidConfig("fusion_classify: head expects width " + std::to_string(head.classifier.in()) +
                        ", got " + std::to_string(x3.size()));
  Graph g(false);
  const Var z = fusion_logits(g, head, g.constant(Tensor({1, x3.size()}, {x3.begin(), x3.end()})));
  FusionPrediction out{z.value().data, {}};
  out.probabilities = softmax(out.logits);
  return out;
}

// Full three-head forward: branch logits plus fusion logits.
struct ModelOutput {
  JointOutput joint;
  Var logits_fusion;
};

inline ModelOutput forward_model(Graph& g, const ModelState& m, const BatchInput& in, AttentionMode mode) {
  ModelOutput out{forward_joint(g, m, in, mode), {}};
  out.logits_fusion = fusion_logits(g, m.head, superpose(out.joint.x1, out.joint.x2, m.spec.combine));
  return out;
}

}  // namespace mfuse
