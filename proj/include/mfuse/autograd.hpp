#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Graph records every op in creation order, which is already a valid
// topological order, so backward() just walks the node list in reverse.
// Parameters live outside the graph; their gradients accumulate straight into
// Parameter::grad. A Graph built with recording = false stores values only.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfuse/error.hpp"
#include "mfuse/losses.hpp"
#include "mfuse/tensor.hpp"

namespace mfuse {

struct Parameter {
  std::string name;
  Tensor value;
  // Scratch written by backward passes; not part of the parameter's value.
  mutable Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
  void zero_grad() const { grad.fill(0.0); }
};

class Graph;

class Var {
 public:
  Var() = default;
  Graph* graph() const { return g_; }
  std::size_t id() const { return id_; }
  bool valid() const { return g_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }

 private:
  Var(Graph* g, std::size_t id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  std::size_t id_ = 0;
  friend class Graph;
};

class Graph {
 public:
  using Backward = std::function<void(const Tensor& out_grad)>;

  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor t) {
    nodes_.emplace_back();
    nodes_.back().value = std::move(t);
    return Var(this, nodes_.size() - 1);
  }

  // A parameter node aliases the Parameter's storage; the Parameter must
  // outlive the graph.
  Var parameter(const Parameter& p) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.external = &p.value;
    if (recording_) {
      n.needs_grad = true;
      if (p.grad.shape != p.value.shape) p.grad = Tensor(p.value.shape);
      n.external_grad = &p.grad;
    }
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of a node, zero-initialised on first touch.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.external_grad) return *n.external_grad;
    if (n.grad.shape != value(id).shape) n.grad = Tensor(value(id).shape);
    return n.grad;
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Var record(Tensor value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    if (recording_)
      for (const Var& v : inputs) {
        if (v.graph() != this) throw InvalidInput("autograd: mixing vars from different graphs");
        needs = needs || nodes_[v.id()].needs_grad;
      }
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.value = std::move(value);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(backward);
    return Var(this, nodes_.size() - 1);
  }

  // Seeds d(root)/d(root) = 1 for a single-element root and propagates.
  void backward(const Var& root) {
    if (!recording_) throw InvalidInput("autograd: backward on a non-recording graph");
    if (value(root.id()).size() != 1) throw InvalidInput("autograd: backward root must be scalar");
    if (!nodes_[root.id()].needs_grad) return;
    grad(root.id()).data[0] += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(n.grad);
      // Intermediate gradients are no longer needed once propagated.
      n.grad = Tensor();
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    Tensor* external_grad = nullptr;
    bool needs_grad = false;
    Backward backward;
  };

  bool recording_;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return g_->value(id_); }

namespace ops {

namespace detail {

inline void require_same_graph(const Var& a, const Var& b) {
  if (a.graph() != b.graph()) throw InvalidInput("autograd: vars from different graphs");
}

inline void require_shape(const Var& a, const Shape& s, const char* who) {
  if (a.shape() != s)
    throw InvalidInput(std::string(who) + ": expected shape " + shape_str(s) + ", got " +
                       shape_str(a.shape()));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_graph(a, b);
  detail::require_shape(b, a.shape(), "add");
  Graph& g = *a.graph();
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {a, b}, [&g, ia, ib](const Tensor& go) {
    for (std::size_t id : {ia, ib})
      if (g.needs_grad(id)) {
        Tensor& gr = g.grad(id);
        for (std::size_t i = 0; i < go.size(); ++i) gr[i] += go[i];
      }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_graph(a, b);
  detail::require_shape(b, a.shape(), "mul");
  Graph& g = *a.graph();
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {a, b}, [&g, ia, ib](const Tensor& go) {
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    if (g.needs_grad(ia)) {
      Tensor& gr = g.grad(ia);
      for (std::size_t i = 0; i < go.size(); ++i) gr[i] += go[i] * bv[i];
    }
    if (g.needs_grad(ib)) {
      Tensor& gr = g.grad(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gr[i] += go[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  const std::size_t ia = a.id();
  return g.record(std::move(out), {a}, [&g, ia, s](const Tensor& go) {
    Tensor& gr = g.grad(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gr[i] += s * go[i];
  });
}

// sum_i coeffs[i] * terms[i] over single-element vars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& coeffs) {
  if (terms.empty() || terms.size() != coeffs.size())
    throw InvalidInput("weighted_sum: terms/coeffs mismatch");
  Graph& g = *terms.front().graph();
  double total = 0.0;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw InvalidInput("weighted_sum: terms must be scalars");
    total += coeffs[i] * terms[i].value()[0];
    ids.push_back(terms[i].id());
  }
  return g.record(Tensor({1}, {total}), std::span<const Var>(terms),
                  [&g, ids, coeffs](const Tensor& go) {
                    for (std::size_t i = 0; i < ids.size(); ++i)
                      if (g.needs_grad(ids[i])) g.grad(ids[i])[0] += coeffs[i] * go[0];
                  });
}

inline Var relu(const Var& a) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return g.record(std::move(out), {a}, [&g, ia](const Tensor& go) {
    const Tensor& x = g.value(ia);
    Tensor& gr = g.grad(ia);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (x[i] > 0.0) gr[i] += go[i];
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (double& v : out.data) v = sigmoid_value(v);
  const std::size_t ia = a.id();
  Tensor s = out;
  return g.record(std::move(out), {a}, [&g, ia, s = std::move(s)](const Tensor& go) {
    Tensor& gr = g.grad(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gr[i] += go[i] * s[i] * (1.0 - s[i]);
  });
}

// x: [..., in], w: [in, out], b: [out]  ->  [..., out]
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.empty() || xv.cols() != wv.dim(0))
    throw InvalidConfig("linear: input width " + std::to_string(xv.cols()) +
                        " does not match weight " + shape_str(wv.shape));
  detail::require_shape(b, {wv.dim(1)}, "linear bias");
  Graph& g = *x.graph();
  const std::size_t rows = xv.rows(), in = wv.dim(0), outw = wv.dim(1);
  Shape os = xv.shape;
  os.back() = outw;
  Tensor out(os);
  auto O = as_matrix(out.data.data(), rows, outw);
  O.noalias() = as_matrix(xv.data.data(), rows, in) * as_matrix(wv.data.data(), in, outw);
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < outw; ++c) out[r * outw + c] += bv[c];
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return g.record(std::move(out), {x, w, b}, [&g, ix, iw, ib, rows, in, outw](const Tensor& go) {
    auto G = as_matrix(go.data.data(), rows, outw);
    if (g.needs_grad(iw)) {
      auto GW = as_matrix(g.grad(iw).data.data(), in, outw);
      GW.noalias() += as_matrix(g.value(ix).data.data(), rows, in).transpose() * G;
    }
    if (g.needs_grad(ib)) {
      Tensor& gb = g.grad(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < outw; ++c) gb[c] += go[r * outw + c];
    }
    if (g.needs_grad(ix)) {
      auto GX = as_matrix(g.grad(ix).data.data(), rows, in);
      GX.noalias() += G * as_matrix(g.value(iw).data.data(), in, outw).transpose();
    }
  });
}

// Square-kernel convolution over NHWC input with zero padding (k - 1) / 2.
// w: [k * k * C_in, C_out] with (ky, kx, c_in) ordering along the rows.
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t ksize, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw InvalidInput("conv2d: input must be [N,H,W,C]");
  if (ksize % 2 == 0 || stride == 0) throw InvalidConfig("conv2d: odd kernel, positive stride");
  const std::size_t n = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), cin = xv.dim(3);
  const Tensor& wv = w.value();
  const std::size_t patch = ksize * ksize * cin;
  if (wv.rank() != 2 || wv.dim(0) != patch)
    throw InvalidConfig("conv2d: weight shape " + shape_str(wv.shape) + " incompatible with C_in=" +
                        std::to_string(cin));
  const std::size_t cout = wv.dim(1);
  detail::require_shape(b, {cout}, "conv2d bias");
  const std::size_t pad = (ksize - 1) / 2;
  const std::size_t ho = (h + 2 * pad - ksize) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - ksize) / stride + 1;
  const std::size_t rows = n * ho * wo;

  auto cols = std::make_shared<std::vector<double>>(rows * patch, 0.0);
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* dst = cols->data() + ((in * ho + oy) * wo + ox) * patch;
        for (std::size_t ky = 0; ky < ksize; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < ksize; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
            const double* src = xv.data.data() + ((in * h + iy) * wd + ix) * cin;
            std::copy(src, src + cin, dst + (ky * ksize + kx) * cin);
          }
        }
      }

  Tensor out({n, ho, wo, cout});
  auto O = as_matrix(out.data.data(), rows, cout);
  O.noalias() = as_matrix(cols->data(), rows, patch) * as_matrix(wv.data.data(), patch, cout);
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] += bv[c];

  Graph& g = *x.graph();
  const std::size_t ixx = x.id(), iw = w.id(), ib = b.id();
  if (!g.recording()) cols.reset();
  return g.record(std::move(out), {x, w, b},
                  [&g, ixx, iw, ib, cols, n, h, wd, cin, ho, wo, cout, patch, rows, ksize, stride,
                   pad](const Tensor& go) {
                    auto G = as_matrix(go.data.data(), rows, cout);
                    if (g.needs_grad(iw)) {
                      auto GW = as_matrix(g.grad(iw).data.data(), patch, cout);
                      GW.noalias() += as_matrix(cols->data(), rows, patch).transpose() * G;
                    }
                    if (g.needs_grad(ib)) {
                      Tensor& gb = g.grad(ib);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cout; ++c) gb[c] += go[r * cout + c];
                    }
                    if (!g.needs_grad(ixx)) return;
                    std::vector<double> dcols(rows * patch);
                    as_matrix(dcols.data(), rows, patch).noalias() =
                        G * as_matrix(g.value(iw).data.data(), patch, cout).transpose();
                    Tensor& gx = g.grad(ixx);
                    for (std::size_t in = 0; in < n; ++in)
                      for (std::size_t oy = 0; oy < ho; ++oy)
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                          const double* src = dcols.data() + ((in * ho + oy) * wo + ox) * patch;
                          for (std::size_t ky = 0; ky < ksize; ++ky) {
                            const long iy =
                                static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            for (std::size_t kx = 0; kx < ksize; ++kx) {
                              const long ix =
                                  static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                              double* dst = gx.data.data() + ((in * h + iy) * wd + ix) * cin;
                              const double* s = src + (ky * ksize + kx) * cin;
                              for (std::size_t c = 0; c < cin; ++c) dst[c] += s[c];
                            }
                          }
                        }
                  });
}

// Non-overlapping f x f average pooling over NHWC input.
inline Var avg_downsample(const Var& x, std::size_t f) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw InvalidInput("avg_downsample: input must be [N,H,W,C]");
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (f == 0 || h % f || w % f) throw InvalidConfig("avg_downsample: factor must divide H and W");
  const std::size_t ho = h / f, wo = w / f;
  const double inv = 1.0 / static_cast<double>(f * f);
  Tensor out({n, ho, wo, c});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((in * ho + y / f) * wo + xx / f) * c + ch] += inv * xv[((in * h + y) * w + xx) * c + ch];
  Graph& g = *x.graph();
  const std::size_t ix = x.id();
  return g.record(std::move(out), {x}, [&g, ix, n, h, w, c, f, ho, wo, inv](const Tensor& go) {
    Tensor& gx = g.grad(ix);
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch)
            gx[((in * h + y) * w + xx) * c + ch] += inv * go[((in * ho + y / f) * wo + xx / f) * c + ch];
  });
}

namespace detail {

// Views x as [N, S, C] where S is the product of the middle dims.
struct PositionView {
  std::size_t n, s, c;
};

inline PositionView positions(const Tensor& x, const char* who) {
  if (x.rank() < 3) throw InvalidInput(std::string(who) + ": input must be [N, ..., C]");
  const std::size_t n = x.dim(0), c = x.shape.back();
  const std::size_t s = n && c ? x.size() / (n * c) : 0;
  if (n == 0 || s == 0 || c == 0) throw InvalidInput(std::string(who) + ": empty input");
  return {n, s, c};
}

}  // namespace detail

// Mean over every position (spatial grid or sequence) per channel: [N,...,C] -> [N,C].
inline Var mean_over_positions(const Var& x) {
  const auto [n, s, c] = detail::positions(x.value(), "mean_over_positions");
  const Tensor& xv = x.value();
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < s; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += xv[(i * s + p) * c + ch];
  const double inv = 1.0 / static_cast<double>(s);
  for (double& v : out.data) v *= inv;
  Graph& g = *x.graph();
  const std::size_t ix = x.id();
  return g.record(std::move(out), {x}, [&g, ix, n, s, c, inv](const Tensor& go) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < s; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[(i * s + p) * c + ch] += inv * go[i * c + ch];
  });
}

// Max over every position per channel. Ties route the gradient to the first
// maximising position.
inline Var max_over_positions(const Var& x) {
  const auto [n, s, c] = detail::positions(x.value(), "max_over_positions");
  const Tensor& xv = x.value();
  Tensor out({n, c}, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(n * c, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < s; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = xv[(i * s + p) * c + ch];
        if (v > out[i * c + ch]) {
          out[i * c + ch] = v;
          arg[i * c + ch] = p;
        }
      }
  Graph& g = *x.graph();
  const std::size_t ix = x.id();
  return g.record(std::move(out), {x}, [&g, ix, s, c, arg = std::move(arg)](const Tensor& go) {
    Tensor& gx = g.grad(ix);
    for (std::size_t j = 0; j < arg.size(); ++j) {
      const std::size_t i = j / c, ch = j % c;
      gx[(i * s + arg[j]) * c + ch] += go[j];
    }
  });
}

// Embedding lookup: tokens (N * L ids) -> [N, L, H].
inline Var embedding(const Var& table, std::span<const int> tokens, std::size_t n, std::size_t len) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw InvalidConfig("embedding: table must be [V, H]");
  if (tokens.size() != n * len) throw InvalidInput("embedding: token count mismatch");
  const std::size_t vocab = tv.dim(0), hid = tv.dim(1);
  Tensor out({n, len, hid});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= vocab)
      throw InvalidInput("embedding: token id " + std::to_string(tokens[t]) + " out of vocabulary");
    const double* src = tv.data.data() + static_cast<std::size_t>(tokens[t]) * hid;
    std::copy(src, src + hid, out.data.data() + t * hid);
  }
  Graph& g = *table.graph();
  const std::size_t it = table.id();
  std::vector<int> ids(tokens.begin(), tokens.end());
  return g.record(std::move(out), {table}, [&g, it, hid, ids = std::move(ids)](const Tensor& go) {
    Tensor& gt = g.grad(it);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      double* dst = gt.data.data() + static_cast<std::size_t>(ids[t]) * hid;
      for (std::size_t h = 0; h < hid; ++h) dst[h] += go[t * hid + h];
    }
  });
}

// Per-channel scaling broadcast over positions: x [N,...,C] * gate [N,C].
inline Var channel_scale(const Var& x, const Var& gate) {
  detail::require_same_graph(x, gate);
  const auto [n, s, c] = detail::positions(x.value(), "channel_scale");
  if (gate.value().shape != Shape{n, c})
    throw InvalidConfig("channel_scale: gate shape " + shape_str(gate.value().shape) +
                        " does not match features " + shape_str(x.value().shape));
  const Tensor& xv = x.value();
  const Tensor& gv = gate.value();
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < s; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[(i * s + p) * c + ch] *= gv[i * c + ch];
  Graph& g = *x.graph();
  const std::size_t ix = x.id(), ig = gate.id();
  return g.record(std::move(out), {x, gate}, [&g, ix, ig, n, s, c](const Tensor& go) {
    const Tensor& xv = g.value(ix);
    const Tensor& gv = g.value(ig);
    if (g.needs_grad(ix)) {
      Tensor& gx = g.grad(ix);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < s; ++p)
          for (std::size_t ch = 0; ch < c; ++ch)
            gx[(i * s + p) * c + ch] += go[(i * s + p) * c + ch] * gv[i * c + ch];
    }
    if (g.needs_grad(ig)) {
      Tensor& gg = g.grad(ig);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < s; ++p)
          for (std::size_t ch = 0; ch < c; ++ch)
            gg[i * c + ch] += go[(i * s + p) * c + ch] * xv[(i * s + p) * c + ch];
    }
  });
}

// Concatenates [N, A] and [N, B] along the last axis.
inline Var concat_last(const Var& a, const Var& b) {
  detail::require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0))
    throw InvalidConfig("concat_last: expected [N,A] and [N,B]");
  const std::size_t n = av.dim(0), wa = av.dim(1), wb = bv.dim(1);
  Tensor out({n, wa + wb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data.data() + i * wa, wa, out.data.data() + i * (wa + wb));
    std::copy_n(bv.data.data() + i * wb, wb, out.data.data() + i * (wa + wb) + wa);
  }
  Graph& g = *a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {a, b}, [&g, ia, ib, n, wa, wb](const Tensor& go) {
    if (g.needs_grad(ia)) {
      Tensor& ga = g.grad(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < wa; ++j) ga[i * wa + j] += go[i * (wa + wb) + j];
    }
    if (g.needs_grad(ib)) {
      Tensor& gb = g.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < wb; ++j) gb[i * wb + j] += go[i * (wa + wb) + wa + j];
    }
  });
}

// Columns [offset, offset + len) of a [N, T] var.
inline Var slice_last(const Var& x, std::size_t offset, std::size_t len) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || offset + len > xv.dim(1)) throw InvalidConfig("slice_last: out of range");
  const std::size_t n = xv.dim(0), t = xv.dim(1);
  Tensor out({n, len});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.data.data() + i * t + offset, len, out.data.data() + i * len);
  Graph& g = *x.graph();
  const std::size_t ix = x.id();
  return g.record(std::move(out), {x}, [&g, ix, n, t, offset, len](const Tensor& go) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < len; ++j) gx[i * t + offset + j] += go[i * len + j];
  });
}

// Stacks m vars of shape [N, C] into [N, m, C].
inline Var stack_tokens(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("stack_tokens: no parts");
  const Shape s0 = parts.front().shape();
  if (s0.size() != 2) throw InvalidInput("stack_tokens: parts must be [N, C]");
  const std::size_t n = s0[0], c = s0[1], m = parts.size();
  Tensor out({n, m, c});
  std::vector<std::size_t> ids;
  for (std::size_t j = 0; j < m; ++j) {
    detail::require_same_graph(parts.front(), parts[j]);
    detail::require_shape(parts[j], s0, "stack_tokens");
    const Tensor& v = parts[j].value();
    for (std::size_t i = 0; i < n; ++i) std::copy_n(v.data.data() + i * c, c, out.data.data() + (i * m + j) * c);
    ids.push_back(parts[j].id());
  }
  Graph& g = *parts.front().graph();
  return g.record(std::move(out), std::span<const Var>(parts), [&g, ids, n, m, c](const Tensor& go) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!g.needs_grad(ids[j])) continue;
      Tensor& gp = g.grad(ids[j]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) gp[i * c + k] += go[(i * m + j) * c + k];
    }
  });
}

// Flattens [N, m, C] into [N, m * C].
inline Var flatten_tokens(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw InvalidInput("flatten_tokens: expected [N, m, C]");
  Graph& g = *x.graph();
  const std::size_t ix = x.id();
  return g.record(xv.reshaped({xv.dim(0), xv.dim(1) * xv.dim(2)}), {x}, [&g, ix](const Tensor& go) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

struct AttentionResult {
  Var output;  // [N, m_q, d]
  Tensor map;  // [N, m_q, m_kv], rows sum to 1
};

// Scaled dot-product attention per sample: softmax(q k^T / sqrt(d)) v.
inline AttentionResult attention(const Var& q, const Var& k, const Var& v) {
  detail::require_same_graph(q, k);
  detail::require_same_graph(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 3 || kv.rank() != 3 || vv.rank() != 3)
    throw InvalidConfig("attention: q, k, v must be [N, m, d]");
  const std::size_t n = qv.dim(0), mq = qv.dim(1), d = qv.dim(2), m = kv.dim(1);
  if (d == 0) throw InvalidConfig("attention: feature width d_f must be positive");
  if (kv.dim(0) != n || vv.dim(0) != n || kv.dim(2) != d || vv.dim(1) != m || m == 0 || mq == 0)
    throw InvalidConfig("attention: incompatible q/k/v shapes " + shape_str(qv.shape) + " " +
                        shape_str(kv.shape) + " " + shape_str(vv.shape));
  const std::size_t dv = vv.dim(2);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor amap({n, mq, m});
  Tensor out({n, mq, dv});
  std::vector<double> logits(m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < mq; ++a) {
      const double* qa = qv.data.data() + (i * mq + a) * d;
      for (std::size_t b = 0; b < m; ++b) {
        const double* kb = kv.data.data() + (i * m + b) * d;
        double dot = 0.0;
        for (std::size_t t = 0; t < d; ++t) dot += qa[t] * kb[t];
        logits[b] = dot * inv_sqrt;
      }
      const std::vector<double> p = softmax(logits);
      for (std::size_t b = 0; b < m; ++b) {
        amap[(i * mq + a) * m + b] = p[b];
        const double* vb = vv.data.data() + (i * m + b) * dv;
        double* o = out.data.data() + (i * mq + a) * dv;
        for (std::size_t t = 0; t < dv; ++t) o[t] += p[b] * vb[t];
      }
    }

  Graph& g = *q.graph();
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  Var res = g.record(std::move(out), {q, k, v},
                     [&g, iq, ik, iv, amap, n, mq, m, d, dv, inv_sqrt](const Tensor& go) {
                       const Tensor& qv = g.value(iq);
                       const Tensor& kv = g.value(ik);
                       const Tensor& vv = g.value(iv);
                       std::vector<double> da(m), ds(m);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t a = 0; a < mq; ++a) {
                           const double* goa = go.data.data() + (i * mq + a) * dv;
                           const double* pa = amap.data.data() + (i * mq + a) * m;
                           double dot = 0.0;
                           for (std::size_t b = 0; b < m; ++b) {
                             const double* vb = vv.data.data() + (i * m + b) * dv;
                             double s = 0.0;
                             for (std::size_t t = 0; t < dv; ++t) s += goa[t] * vb[t];
                             da[b] = s;
                             dot += s * pa[b];
                           }
                           for (std::size_t b = 0; b < m; ++b) ds[b] = pa[b] * (da[b] - dot) * inv_sqrt;
                           if (g.needs_grad(iv)) {
                             Tensor& gv = g.grad(iv);
                             for (std::size_t b = 0; b < m; ++b)
                               for (std::size_t t = 0; t < dv; ++t)
                                 gv[(i * m + b) * dv + t] += pa[b] * goa[t];
                           }
                           if (g.needs_grad(iq)) {
                             Tensor& gq = g.grad(iq);
                             for (std::size_t b = 0; b < m; ++b)
                               for (std::size_t t = 0; t < d; ++t)
                                 gq[(i * mq + a) * d + t] += ds[b] * kv[(i * m + b) * d + t];
                           }
                           if (g.needs_grad(ik)) {
                             Tensor& gk = g.grad(ik);
                             for (std::size_t b = 0; b < m; ++b)
                               for (std::size_t t = 0; t < d; ++t)
                                 gk[(i * m + b) * d + t] += ds[b] * qv[(i * mq + a) * d + t];
                           }
                         }
                     });
  return {res, std::move(amap)};
}

// Row-wise softmax over the last axis.
inline Var softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  const std::size_t rows = xv.rows(), k = xv.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::vector<double> p = softmax(xv.row(r));
    std::copy(p.begin(), p.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * k));
  }
  Graph& g = *x.graph();
  const std::size_t ix = x.id();
  Tensor probs = out;
  return g.record(std::move(out), {x}, [&g, ix, rows, k, probs = std::move(probs)](const Tensor& go) {
    Tensor& gx = g.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += go[r * k + j] * probs[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += probs[r * k + j] * (go[r * k + j] - dot);
    }
  });
}

// Mean cross-entropy of probability rows [N, K] against class labels.
inline Var cross_entropy_mean(const Var& probs, std::span<const int> labels) {
  const Tensor& pv = probs.value();
  const std::size_t n = pv.rows(), k = pv.cols();
  if (labels.size() != n) throw InvalidInput("cross_entropy_mean: label count mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) throw InvalidInput("cross_entropy_mean: negative label");
    sum += cross_entropy(pv.row(i), static_cast<std::size_t>(labels[i]));
  }
  Graph& g = *probs.graph();
  const std::size_t ip = probs.id();
  std::vector<int> ls(labels.begin(), labels.end());
  return g.record(Tensor({1}, {sum / static_cast<double>(n)}), {probs},
                  [&g, ip, n, k, ls = std::move(ls)](const Tensor& go) {
                    const Tensor& pv = g.value(ip);
                    Tensor& gp = g.grad(ip);
                    const double s = go[0] / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t j = i * k + static_cast<std::size_t>(ls[i]);
                      gp[j] -= s / clip_probability(pv[j]);
                    }
                  });
}

// Mean divergence D(target || current) over rows. The target is a constant:
// no gradient reaches whatever produced it.
inline Var mimicry_mean(const Var& current, const Tensor& target, Divergence kind) {
  const Tensor& cv = current.value();
  if (target.shape != cv.shape) throw InvalidInput("mimicry_mean: target/current shape mismatch");
  const std::size_t n = cv.rows(), k = cv.cols();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += divergence(kind, target.row(i), cv.row(i));
  Graph& g = *current.graph();
  const std::size_t ic = current.id();
  return g.record(Tensor({1}, {sum / static_cast<double>(n)}), {current},
                  [&g, ic, n, k, target, kind](const Tensor& go) {
                    const Tensor& cv = g.value(ic);
                    Tensor& gc = g.grad(ic);
                    const double s = go[0] / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::vector<double> gr = divergence_grad(kind, target.row(i), cv.row(i));
                      for (std::size_t j = 0; j < k; ++j) gc[i * k + j] += s * gr[j];
                    }
                  });
}

}  // namespace ops
}  // namespace mfuse
