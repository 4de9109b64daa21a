#pragma once

#include <cmath>
#include <string>

#include "mfuse/autograd.hpp"
#include "mfuse/rng.hpp"

namespace mfuse {

// Gaussian init scaled by sqrt(gain / fan_in); gain 2 is He, 1 is LeCun.
inline Parameter normal_weight(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                               double gain = 2.0) {
  Tensor w({fan_in, fan_out});
  const double sd = std::sqrt(gain / static_cast<double>(fan_in));
  for (double& v : w.data) v = sd * rng.normal();
  return Parameter(std::move(name), std::move(w));
}

inline Parameter zero_bias(std::string name, std::size_t n) {
  return Parameter(std::move(name), Tensor({n}));
}

// Affine map with weight [in, out] and bias [out].
struct Dense {
  Parameter weight;
  Parameter bias;

  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double gain = 2.0)
      : weight(normal_weight(name + ".weight", in, out, rng, gain)), bias(zero_bias(name + ".bias", out)) {}

  std::size_t in() const { return weight.value.dim(0); }
  std::size_t out() const { return weight.value.dim(1); }

  template <typename F>
  void visit(F&& f) const {
    f(weight);
    f(bias);
  }
  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }

  Var operator()(Graph& g, const Var& x) const { return ops::linear(x, g.parameter(weight), g.parameter(bias)); }
};

// Square convolution. Weight rows are ordered (ky, kx, c_in).
struct Conv {
  Parameter weight;
  Parameter bias;
  std::size_t ksize = 3;
  std::size_t stride = 1;

  Conv() = default;
  Conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t s, Rng& rng)
      : weight(normal_weight(name + ".weight", k * k * cin, cout, rng)),
        bias(zero_bias(name + ".bias", cout)),
        ksize(k),
        stride(s) {}

  template <typename F>
  void visit(F&& f) const {
    f(weight);
    f(bias);
  }
  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }

  Var operator()(Graph& g, const Var& x) const {
    return ops::conv2d(x, g.parameter(weight), g.parameter(bias), ksize, stride);
  }
};

}  // namespace mfuse
