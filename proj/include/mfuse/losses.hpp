#pragma once

// Objectives for two-branch mutual learning: softmax, cross-entropy, the
// standard and truncated KL divergences used as mimicry terms, and the
// weighted three-term training objective.
//
// All functions are pure. Probabilities are clipped to [kProbEpsilon, 1]
// before any logarithm; a target entry that is exactly zero contributes
// nothing to either divergence.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mfuse/error.hpp"

namespace mfuse {

inline constexpr double kProbEpsilon = 1e-7;

inline double clip_probability(double p) { return std::clamp(p, kProbEpsilon, 1.0); }

inline std::vector<double> clip_probabilities(std::span<const double> p) {
  std::vector<double> out(p.begin(), p.end());
  for (double& v : out) v = clip_probability(v);
  return out;
}

/// Max-shifted softmax. Throws NonFiniteValue on non-finite logits and
/// InvalidInput on K < 1.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidInput("softmax: empty logit vector");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    if (!std::isfinite(v)) throw NonFiniteValue("softmax: non-finite logit");
    mx = std::max(mx, v);
  }
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - mx);
    sum += out[k];
  }
  for (double& v : out) v /= sum;
  return out;
}

inline double cross_entropy(std::span<const double> p, std::size_t class_index) {
  if (class_index >= p.size())
    throw InvalidInput("cross_entropy: class index " + std::to_string(class_index) +
                       " out of range for K=" + std::to_string(p.size()));
  return -std::log(clip_probability(p[class_index]));
}

namespace detail {

inline void check_pair(std::span<const double> a, std::span<const double> b, const char* who) {
  if (a.size() != b.size())
    throw InvalidInput(std::string(who) + ": length mismatch (" + std::to_string(a.size()) +
                       " vs " + std::to_string(b.size()) + ")");
  if (a.empty()) throw InvalidInput(std::string(who) + ": empty distribution");
}

}  // namespace detail

namespace detail {

// Summands p_t log(p_t / p_c) split by sign. Both divergences are built from
// the same positive partial sum, so tr_kld_reg >= kld holds in floating point.
struct SplitSum {
  double positive = 0.0;
  double negative = 0.0;
};

inline SplitSum split_divergence(std::span<const double> p_target, std::span<const double> p_current) {
  SplitSum s;
  for (std::size_t k = 0; k < p_target.size(); ++k) {
    if (p_target[k] == 0.0) continue;
    const double t = clip_probability(p_target[k]);
    const double c = clip_probability(p_current[k]);
    // log1p keeps full precision when t and c are close.
    const double term = t * std::log1p((t - c) / c);
    (term > 0.0 ? s.positive : s.negative) += term;
  }
  return s;
}

}  // namespace detail

/// KL(p_target || p_current) = sum_k p_t log(p_t / p_c), floored at 0.
inline double kld(std::span<const double> p_target, std::span<const double> p_current) {
  detail::check_pair(p_target, p_current, "kld");
  const auto s = detail::split_divergence(p_target, p_current);
  return std::max(0.0, s.positive + s.negative);
}

/// Truncated KL: only summands with a positive log-ratio are kept.
inline double tr_kld_reg(std::span<const double> p_target, std::span<const double> p_current) {
  detail::check_pair(p_target, p_current, "tr_kld_reg");
  return detail::split_divergence(p_target, p_current).positive;
}

// d kld / d p_current, with p_target held constant.
inline std::vector<double> kld_grad(std::span<const double> p_target,
                                    std::span<const double> p_current) {
  detail::check_pair(p_target, p_current, "kld_grad");
  std::vector<double> g(p_target.size(), 0.0);
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (p_target[k] == 0.0) continue;
    g[k] = -clip_probability(p_target[k]) / clip_probability(p_current[k]);
  }
  return g;
}

/// d tr_kld_reg / d p_current, with p_target held constant. Entries whose
/// log-ratio is <= 0 (including the kink at exactly 0) get zero.
inline std::vector<double> tr_kld_reg_grad(std::span<const double> p_target,
                                           std::span<const double> p_current) {
  detail::check_pair(p_target, p_current, "tr_kld_reg_grad");
  std::vector<double> g(p_target.size(), 0.0);
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (p_target[k] == 0.0) continue;
    const double t = clip_probability(p_target[k]);
    const double c = clip_probability(p_current[k]);
    if (t > c) g[k] = -t / c;
  }
  return g;
}

enum class Divergence { kKld, kTruncatedKld };

inline double divergence(Divergence d, std::span<const double> p_target,
                         std::span<const double> p_current) {
  return d == Divergence::kKld ? kld(p_target, p_current) : tr_kld_reg(p_target, p_current);
}

inline std::vector<double> divergence_grad(Divergence d, std::span<const double> p_target,
                                           std::span<const double> p_current) {
  return d == Divergence::kKld ? kld_grad(p_target, p_current)
                               : tr_kld_reg_grad(p_target, p_current);
}

/// Per-branch objective: supervised term plus beta-weighted mimicry term.
inline double modality_loss(double ce, double mimicry, double beta) {
  if (ce < 0.0 || mimicry < 0.0 || beta < 0.0 || !std::isfinite(ce) || !std::isfinite(mimicry) ||
      !std::isfinite(beta))
    throw InvalidInput("modality_loss: inputs must be finite and non-negative");
  return ce + beta * mimicry;
}

struct LossWeights {
  double w1 = 1.0 / 3.0;  // image branch
  double w2 = 1.0 / 3.0;  // text branch
  double w3 = 1.0 / 3.0;  // fusion head

  void validate() const {
    for (double w : {w1, w2, w3})
      if (!(w >= 0.0 && w <= 1.0))
        throw InvalidConfig("loss weights must each lie in [0, 1]");
    if (std::abs(w1 + w2 + w3 - 1.0) > 1e-9)
      throw InvalidConfig("loss weights must sum to 1 (got " + std::to_string(w1 + w2 + w3) + ")");
  }
};

struct LossBreakdown {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double total = 0.0;
  double d_image = 0.0;  // mimicry term inside l1
  double d_text = 0.0;   // mimicry term inside l2
};

inline LossBreakdown total_loss(double l1, double l2, double l3, const LossWeights& w) {
  w.validate();
  for (double l : {l1, l2, l3})
    if (!(l >= 0.0)) throw InvalidInput("total_loss: component losses must be non-negative");
  return {l1, l2, l3, w.w1 * l1 + w.w2 * l2 + w.w3 * l3, 0.0, 0.0};
}

}  // namespace mfuse
