#pragma once

#include <functional>
#include <random>
#include <vector>

#include "mfuse/autograd.hpp"
#include "oracles.hpp"

namespace gradcheck {

using mfuse::Graph;
using mfuse::Parameter;
using mfuse::Var;

struct Result {
  double worst_rel = 0.0;
  std::size_t checked = 0;
};

// Compares the tape gradient of a scalar loss against central differences at
// `samples` randomly chosen parameter entries.
inline Result check(const std::vector<Parameter*>& params, const std::function<Var(Graph&)>& loss,
                    std::size_t samples, std::uint64_t seed, double h = 1e-6, double abs_floor = 1e-8) {
  for (auto* p : params) p->zero_grad();
  {
    Graph g(true);
    g.backward(loss(g));
  }
  auto eval = [&] {
    Graph g(false);
    return loss(g).value()[0];
  };
  std::mt19937_64 gen(seed);
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  Result r;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t pick = gen() % total;
    Parameter* p = nullptr;
    for (auto* q : params) {
      if (pick < q->value.size()) {
        p = q;
        break;
      }
      pick -= q->value.size();
    }
    const double orig = p->value[pick];
    p->value[pick] = orig + h;
    const double up = eval();
    p->value[pick] = orig - h;
    const double dn = eval();
    p->value[pick] = orig;
    const double fd = (up - dn) / (2 * h);
    const double an = p->grad[pick];
    r.worst_rel = std::max(r.worst_rel, oracle::rel_err(an, fd, abs_floor));
    ++r.checked;
  }
  return r;
}

inline Parameter random_param(const char* name, mfuse::Shape shape, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  mfuse::Tensor t(shape);
  for (auto& v : t.data) v = n(gen);
  return Parameter(name, std::move(t));
}

}  // namespace gradcheck
