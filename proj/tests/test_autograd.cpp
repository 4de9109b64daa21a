#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "mfuse/autograd.hpp"
#include "mfuse/layers.hpp"
#include "oracles.hpp"

using namespace mfuse;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(s));
  for (auto& v : t.data) v = n(gen);
  return t;
}

// Scalar head shared by the op checks: random reweighting, pooling to [N, C],
// softmax and cross-entropy against fixed labels.
Var scalar_head(Graph& g, const Var& x, const Tensor& mix, const std::vector<int>& labels) {
  Var y = ops::mul(x, g.constant(mix));
  if (y.shape().size() > 2) y = ops::mean_over_positions(y);
  return ops::cross_entropy_mean(ops::softmax_rows(y), labels);
}

}  // namespace

TEST(Autograd, LinearMatchesOracleAndGradient) {
  std::mt19937_64 gen(1);
  Parameter x = gradcheck::random_param("x", {3, 4}, gen);
  Parameter w = gradcheck::random_param("w", {4, 5}, gen);
  Parameter b = gradcheck::random_param("b", {5}, gen);
  Graph g0(false);
  const Var y = ops::linear(g0.parameter(x), g0.parameter(w), g0.parameter(b));
  const auto ref = oracle::affine(x.value.data, 3, 4, w.value.data, b.value.data, 5);
  EXPECT_LT(max_abs_diff(y.value().data, ref), 1e-12);
  const Tensor mix = random_tensor({3, 5}, gen);
  const auto r = gradcheck::check({&x, &w, &b}, [&](Graph& g) {
    return scalar_head(g, ops::linear(g.parameter(x), g.parameter(w), g.parameter(b)), mix, {0, 4, 2});
  }, 60, 2);
  EXPECT_LT(r.worst_rel, 1e-6);
}

TEST(Autograd, Conv2dGradient) {
  std::mt19937_64 gen(2);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t k : {1u, 3u}) {
      Parameter x = gradcheck::random_param("x", {2, 5, 5, 3}, gen);
      Parameter w = gradcheck::random_param("w", {k * k * 3, 4}, gen, 0.5);
      Parameter b = gradcheck::random_param("b", {4}, gen);
      Graph g0(false);
      const Shape out = ops::conv2d(g0.parameter(x), g0.parameter(w), g0.parameter(b), k, stride).shape();
      const Tensor mix = random_tensor(out, gen);
      const auto r = gradcheck::check({&x, &w, &b}, [&](Graph& g) {
        return scalar_head(g, ops::conv2d(g.parameter(x), g.parameter(w), g.parameter(b), k, stride), mix, {1, 3});
      }, 80, 3);
      EXPECT_LT(r.worst_rel, 1e-5) << "k=" << k << " stride=" << stride;
    }
  }
}

TEST(Autograd, Conv2dMatchesDirectSum) {
  std::mt19937_64 gen(3);
  const Tensor x = random_tensor({1, 4, 4, 2}, gen), w = random_tensor({9 * 2, 3}, gen), b = random_tensor({3}, gen);
  Graph g(false);
  const Tensor y = ops::conv2d(g.constant(x), g.constant(w), g.constant(b), 3, 1).value();
  ASSERT_EQ(y.shape, (Shape{1, 4, 4, 3}));
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox)
      for (int co = 0; co < 3; ++co) {
        long double s = b[co];
        for (int dy = 0; dy < 3; ++dy)
          for (int dx = 0; dx < 3; ++dx)
            for (int ci = 0; ci < 2; ++ci) {
              const int iy = oy + dy - 1, ix = ox + dx - 1;
              if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) continue;
              s += static_cast<long double>(x[(iy * 4 + ix) * 2 + ci]) * w[((dy * 3 + dx) * 2 + ci) * 3 + co];
            }
        EXPECT_NEAR(y[(oy * 4 + ox) * 3 + co], static_cast<double>(s), 1e-12);
      }
}

TEST(Autograd, PoolingEmbeddingAndElementwiseGradients) {
  std::mt19937_64 gen(4);
  Parameter x = gradcheck::random_param("x", {2, 4, 4, 3}, gen);
  Parameter table = gradcheck::random_param("table", {7, 3}, gen);
  const std::vector<int> tokens{0, 3, 3, 6, 1, 2, 5, 5};
  const Tensor mix = random_tensor({2, 3}, gen);
  const auto r = gradcheck::check({&x, &table}, [&](Graph& g) {
    const Var img = ops::avg_downsample(ops::relu(g.parameter(x)), 2);
    const Var a = ops::add(ops::mean_over_positions(img), ops::max_over_positions(g.parameter(x)));
    const Var t = ops::max_over_positions(ops::sigmoid(ops::embedding(g.parameter(table), tokens, 2, 4)));
    return scalar_head(g, ops::scale(ops::mul(a, t), 1.5), mix, {2, 0});
  }, 80, 5);
  EXPECT_LT(r.worst_rel, 1e-5);
}

TEST(Autograd, ShapeOpsAndAttentionGradients) {
  std::mt19937_64 gen(5);
  Parameter a = gradcheck::random_param("a", {2, 3}, gen);
  Parameter b = gradcheck::random_param("b", {2, 3}, gen);
  Parameter x = gradcheck::random_param("x", {2, 5, 6}, gen);
  const Tensor mix = random_tensor({2, 5, 6}, gen);
  const auto r = gradcheck::check({&a, &b, &x}, [&](Graph& g) {
    const Var tok = ops::stack_tokens({g.parameter(a), g.parameter(b)});
    const Var q = ops::stack_tokens({g.parameter(a)});
    const auto att = ops::attention(q, tok, tok);
    const Var gate = ops::sigmoid(ops::concat_last(ops::flatten_tokens(att.output), g.parameter(b)));
    const Var scaled = ops::channel_scale(g.parameter(x), ops::slice_last(gate, 0, 6));
    return scalar_head(g, scaled, mix, {5, 1});
  }, 80, 6);
  EXPECT_LT(r.worst_rel, 1e-5);
}

TEST(Autograd, AttentionMatchesOracle) {
  std::mt19937_64 gen(6);
  const Tensor q = random_tensor({1, 3, 4}, gen), k = random_tensor({1, 5, 4}, gen), v = random_tensor({1, 5, 2}, gen);
  Graph g(false);
  const auto r = ops::attention(g.constant(q), g.constant(k), g.constant(v));
  const auto o = oracle::attention(q.data, k.data, v.data, 3, 5, 4, 2);
  EXPECT_LT(max_abs_diff(r.output.value().data, o.out), 1e-12);
  EXPECT_LT(max_abs_diff(r.map.data, o.map), 1e-12);
  EXPECT_THROW(ops::attention(g.constant(Tensor({1, 1, 0})), g.constant(Tensor({1, 1, 0})),
                              g.constant(Tensor({1, 1, 2}))),
               InvalidConfig);
}

TEST(Autograd, MimicryDetachesTarget) {
  std::mt19937_64 gen(7);
  Parameter cur = gradcheck::random_param("cur", {3, 4}, gen);
  Parameter peer = gradcheck::random_param("peer", {3, 4}, gen);
  for (Divergence d : {Divergence::kKld, Divergence::kTruncatedKld}) {
    cur.zero_grad();
    peer.zero_grad();
    Graph g(true);
    const Var pc = ops::softmax_rows(g.parameter(cur));
    const Var pp = ops::softmax_rows(g.parameter(peer));
    g.backward(ops::mimicry_mean(pc, pp.value(), d));
    for (double v : peer.grad.data) EXPECT_EQ(v, 0.0);
    double norm = 0;
    for (double v : cur.grad.data) norm += std::abs(v);
    EXPECT_GT(norm, 0.0);

    const auto r = gradcheck::check({&cur}, [&](Graph& g2) {
      Graph side(false);
      const Tensor target = ops::softmax_rows(side.parameter(peer)).value();
      return ops::mimicry_mean(ops::softmax_rows(g2.parameter(cur)), target, d);
    }, 12, 8);
    EXPECT_LT(r.worst_rel, 1e-4);
  }
}

TEST(Autograd, MimicryValueMatchesRowMean) {
  const Tensor cur({2, 2}, std::vector<double>{0.4, 0.6, 0.5, 0.5});
  const Tensor tgt({2, 2}, std::vector<double>{0.2, 0.8, 0.9, 0.1});
  Graph g(false);
  const double v = ops::mimicry_mean(g.constant(cur), tgt, Divergence::kTruncatedKld).value()[0];
  EXPECT_NEAR(v, 0.5 * (tr_kld_reg(std::vector<double>{0.2, 0.8}, std::vector<double>{0.4, 0.6}) +
                        tr_kld_reg(std::vector<double>{0.9, 0.1}, std::vector<double>{0.5, 0.5})),
              1e-15);
}

TEST(Autograd, BackwardRequiresScalarRoot) {
  Graph g(true);
  Parameter p("p", Tensor({2}, std::vector<double>{1, 2}));
  const Var v = ops::relu(g.parameter(p));
  EXPECT_ANY_THROW(g.backward(v));
}

TEST(Autograd, NonRecordingGraphLeavesGradientsUntouched) {
  Rng rng(9);
  const Dense d("d", 3, 2, rng);
  d.weight.grad.fill(0.25);
  Graph g(false);
  const Var y = d(g, g.constant(Tensor({1, 3}, 1.0)));
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  for (double v : d.weight.grad.data) EXPECT_EQ(v, 0.25);
}
