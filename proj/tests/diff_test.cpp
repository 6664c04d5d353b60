#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "persona/diff/adam.hpp"
#include "persona/diff/ops.hpp"
#include "support/gradcheck.hpp"

namespace persona::diff {
namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    v = rng.uniform(-1.0, 1.0);
  }
  return t;
}

std::vector<double> values(Var v) { return {v.value().data().begin(), v.value().data().end()}; }

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({0, 2}), DimensionError);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Graph g;
  auto eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto b = g.constant(Tensor::matrix(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(values(matmul(eye, b)), (std::vector<double>{5, 6, 7, 8}));

  auto a = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto ones = g.constant(Tensor::matrix(2, 1, {1, 1}));
  EXPECT_EQ(values(matmul(a, ones)), (std::vector<double>{3, 7}));

  auto zero = g.constant(Tensor({3, 2}));
  EXPECT_EQ(values(matmul(zero, b)), std::vector<double>(6, 0.0));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  auto a = g.constant(Tensor({2, 3}));
  auto b = g.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Softmax, ClosedForms) {
  Graph g;
  auto half = softmax(g.constant(Tensor::vector({0.0, 0.0})));
  EXPECT_DOUBLE_EQ(half.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(half.value()[1], 0.5);

  auto third = softmax(g.constant(Tensor::vector({std::log(2.0), 0.0})));
  EXPECT_NEAR(third.value()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(third.value()[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvarianceAndSimplex) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    Tensor x = random_tensor({3, 5}, rng);
    Tensor shifted = x;
    const double c = rng.uniform(-50.0, 50.0);
    for (double& v : shifted.data()) {
      v += c;
    }
    auto p = softmax(g.constant(x));
    auto q = softmax(g.constant(shifted));
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t col = 0; col < 5; ++col) {
        const double v = p.value().at(r, col);
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        EXPECT_NEAR(v, q.value().at(r, col), 1e-12);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  Graph g;
  auto gamma = g.constant(Tensor::vector({1, 1, 1}));
  auto beta = g.constant(Tensor::vector({0, 0, 0}));
  auto flat = layer_norm(g.constant(Tensor::vector({3, 3, 3})), gamma, beta);
  for (double v : flat.value().data()) {
    EXPECT_DOUBLE_EQ(v, 0.0);
  }

  auto g2 = g.constant(Tensor::vector({1, 1}));
  auto b2 = g.constant(Tensor::vector({0, 0}));
  auto unit = layer_norm(g.constant(Tensor::vector({1, -1})), g2, b2, 0.0);
  EXPECT_DOUBLE_EQ(unit.value()[0], 1.0);
  EXPECT_DOUBLE_EQ(unit.value()[1], -1.0);
}

TEST(LayerNorm, OutputMeanTracksBetaMean) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    auto x = g.constant(random_tensor({4, 8}, rng));
    auto gamma = g.constant(random_tensor({8}, rng));
    Tensor beta_t = random_tensor({8}, rng);
    auto y = layer_norm(x, g.constant(Tensor::vector(std::vector<double>(8, 1.0))), g.constant(beta_t));
    double beta_mean = 0.0;
    for (double b : beta_t.data()) {
      beta_mean += b / 8.0;
    }
    for (std::size_t r = 0; r < 4; ++r) {
      double m = 0.0;
      for (double v : y.value().row(r)) {
        m += v / 8.0;
      }
      EXPECT_NEAR(m, beta_mean, 1e-12);
    }
    (void)gamma;
  }
}

TEST(CrossEntropy, Examples) {
  Graph g;
  // Logits that put (numerically) all mass on the gold token.
  auto sure = g.constant(Tensor::matrix(2, 3, {100, 0, 0, 0, 0, 100}));
  std::vector<int> gold{0, 2};
  EXPECT_NEAR(cross_entropy(sure, gold, -1).item(), 0.0, 1e-40);

  auto uniform = g.constant(Tensor({3, 4}));
  std::vector<int> any{0, 3, 1};
  EXPECT_NEAR(cross_entropy(uniform, any, -1).item(), std::log(4.0), 1e-15);

  auto probs = g.constant(Tensor::matrix(1, 3, {std::log(0.5), std::log(0.25), std::log(0.25)}));
  std::vector<int> one{1};
  EXPECT_NEAR(cross_entropy(probs, one, -1).item(), -std::log(0.25), 1e-15);
}

TEST(CrossEntropy, IgnoredPositionsAndErrors) {
  Graph g;
  auto logits = g.constant(Tensor({2, 4}));
  std::vector<int> all_ignored{0, 0};
  EXPECT_THROW(cross_entropy(logits, all_ignored, 0), ContractError);
  std::vector<int> out_of_range{1, 9};
  EXPECT_THROW(cross_entropy(logits, out_of_range, 0), ContractError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehot) {
  Rng rng(3);
  Parameter logits("logits", random_tensor({3, 5}, rng));
  std::vector<int> gold{4, 0, 2};
  Graph g;
  g.backward(cross_entropy(g.parameter(logits), gold, -1));
  Graph h(false);
  auto p = softmax(h.constant(logits.value()));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      const double expected = (p.value().at(r, c) - (static_cast<int>(c) == gold[r] ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR(logits.grad().at(r, c), expected, 1e-15);
    }
  }
}

TEST(Cosine, Examples) {
  Graph g;
  auto v = g.constant(Tensor::vector({0.3, -2.0, 1.5}));
  auto neg = scale(v, -1.0);
  EXPECT_NEAR(cosine_similarity(v, v).item(), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(v, neg).item(), -1.0, 1e-15);
  auto e1 = g.constant(Tensor::vector({1, 0}));
  auto e2 = g.constant(Tensor::vector({0, 1}));
  EXPECT_DOUBLE_EQ(cosine_similarity(e1, e2).item(), 0.0);
  auto zero = g.constant(Tensor::vector({0, 0}));
  EXPECT_DOUBLE_EQ(cosine_similarity(zero, e1).item(), 0.0);
}

TEST(Cosine, BoundedOnRandomInput) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    auto a = g.constant(random_tensor({6}, rng));
    auto b = rng.bernoulli(0.2) ? a : g.constant(random_tensor({6}, rng));
    const double s = cosine_similarity(a, b).item();
    EXPECT_GE(s, -1.0 - 1e-12);
    EXPECT_LE(s, 1.0 + 1e-12);
  }
}

TEST(Backward, QuadraticGradient) {
  Parameter x("x", Tensor::vector({1.0, -2.0, 0.5}));
  Graph g;
  auto xv = g.parameter(x);
  g.backward(sum(mul(xv, xv)));
  EXPECT_EQ(std::vector<double>(x.grad().data().begin(), x.grad().data().end()),
            (std::vector<double>{2.0, -4.0, 1.0}));
}

TEST(Backward, UnreachableLeafIsZeroAndNonScalarRejected) {
  Parameter used("used", Tensor::vector({1.0, 2.0}));
  Parameter unused("unused", Tensor::vector({1.0, 2.0}));
  unused.grad().fill(7.0);
  Graph g;
  auto u = g.parameter(used);
  g.parameter(unused);
  EXPECT_THROW(g.backward(u), ContractError);
  g.backward(sum(u));
  for (double v : unused.grad().data()) {
    EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, BitIdenticalAcrossRuns) {
  Rng rng(13);
  Parameter a("a", random_tensor({4, 6}, rng));
  Parameter b("b", random_tensor({6, 3}, rng));
  auto run = [&] {
    Graph g;
    auto y = gelu(matmul(g.parameter(a), g.parameter(b)));
    std::vector<int> gold{0, 1, 2, 1};
    g.backward(cross_entropy(y, gold, -1));
    std::vector<double> out(a.grad().data().begin(), a.grad().data().end());
    out.insert(out.end(), b.grad().data().begin(), b.grad().data().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  Parameter w("w", Tensor::vector({1.0, 2.0}));
  w.set_frozen(true);
  Graph g;
  auto v = g.parameter(w);
  auto loss = sum(mul(v, v));
  EXPECT_FALSE(g.needs_grad(loss.id));
  g.backward(loss);
  EXPECT_EQ(w.grad().data()[0], 0.0);
}

// ---- finite-difference suite: 20 random instances per op ----

constexpr int kInstances = 20;

// Reduces an arbitrary output to a scalar through a fixed random weighting.
Var project(Var y, const Tensor& weights) { return sum(mul(y, y.graph->constant(weights))); }

class GradCheck : public ::testing::Test {
 protected:
  Rng rng{2024};

  Tensor rand(Shape s) { return random_tensor(std::move(s), rng); }

  void expect_pass(const std::vector<Parameter*>& params, const std::function<Var(Graph&)>& loss) {
    auto r = testing::gradcheck(params, loss);
    EXPECT_TRUE(r.passed) << "max rel " << r.max_rel_error << " max abs@0 " << r.max_abs_error_at_zero;
  }
};

TEST_F(GradCheck, Matmul) {
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    Parameter a("a", rand({m, k})), b("b", rand({k, n}));
    Tensor w = rand({m, n});
    expect_pass({&a, &b}, [&](Graph& g) { return project(matmul(g.parameter(a), g.parameter(b)), w); });
  }
}

TEST_F(GradCheck, MatmulTransposed) {
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    Parameter a("a", rand({m, k})), b("b", rand({n, k}));
    Tensor w = rand({m, n});
    expect_pass({&a, &b}, [&](Graph& g) { return project(matmul_nt(g.parameter(a), g.parameter(b)), w); });
  }
}

TEST_F(GradCheck, MatmulChain) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter a("a", rand({3, 4})), b("b", rand({4, 2})), c("c", rand({2, 3}));
    Tensor w = rand({3, 3});
    expect_pass({&a, &b, &c}, [&](Graph& g) {
      return project(matmul(matmul(g.parameter(a), g.parameter(b)), g.parameter(c)), w);
    });
  }
}

TEST_F(GradCheck, AddBiasScaleMul) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter x("x", rand({3, 4})), y("y", rand({3, 4})), b("b", rand({4}));
    Tensor w = rand({3, 4});
    expect_pass({&x, &y, &b}, [&](Graph& g) {
      auto xv = g.parameter(x);
      auto s = add(scale(mul(xv, g.parameter(y)), 1.7), xv);
      return project(add_bias(s, g.parameter(b)), w);
    });
  }
}

TEST_F(GradCheck, Gelu) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter x("x", rand({2, 5}));
    Tensor w = rand({2, 5});
    expect_pass({&x}, [&](Graph& g) { return project(gelu(g.parameter(x)), w); });
  }
}

TEST_F(GradCheck, Softmax) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter x("x", rand({3, 4}));
    Tensor w = rand({3, 4});
    expect_pass({&x}, [&](Graph& g) { return project(softmax(g.parameter(x)), w); });
  }
}

TEST_F(GradCheck, LayerNorm) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter x("x", rand({3, 5})), gamma("g", rand({5})), beta("b", rand({5}));
    Tensor w = rand({3, 5});
    expect_pass({&x, &gamma, &beta}, [&](Graph& g) {
      return project(layer_norm(g.parameter(x), g.parameter(gamma), g.parameter(beta)), w);
    });
  }
}

TEST_F(GradCheck, CrossEntropy) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter x("x", rand({4, 6}));
    std::vector<int> gold;
    for (int t = 0; t < 4; ++t) {
      gold.push_back(static_cast<int>(rng.below(6)));
    }
    gold[static_cast<std::size_t>(rng.below(4))] = -100;  // one ignored position
    expect_pass({&x}, [&](Graph& g) { return cross_entropy(g.parameter(x), gold, -100); });
  }
}

TEST_F(GradCheck, Cosine) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter a("a", rand({5})), b("b", rand({5}));
    expect_pass({&a, &b}, [&](Graph& g) { return cosine_similarity(g.parameter(a), g.parameter(b)); });
  }
}

TEST_F(GradCheck, EmbeddingConcatSelect) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter table("t", rand({5, 3})), extra("e", rand({3}));
    std::vector<int> ids{static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5)), 2, 2};
    Tensor w = rand({5, 3});
    expect_pass({&table, &extra}, [&](Graph& g) {
      auto rows = embedding(g.parameter(table), ids);
      std::vector<Var> parts{rows, g.parameter(extra)};
      auto stacked = concat_rows(parts);
      return add(project(stacked, w), sum(mul(select_row(stacked, 1), select_row(stacked, 4))));
    });
  }
}

TEST_F(GradCheck, Attention) {
  for (int i = 0; i < kInstances; ++i) {
    const bool causal = i % 2 == 0;
    const std::size_t tq = 1 + rng.below(4);
    const std::size_t tk = causal ? tq + rng.below(2) : 1 + rng.below(4);
    Parameter q("q", rand({tq, 4})), k("k", rand({tk, 4})), v("v", rand({tk, 4}));
    Tensor w = rand({tq, 4});
    expect_pass({&q, &k, &v}, [&](Graph& g) {
      return project(attention(g.parameter(q), g.parameter(k), g.parameter(v), 2, causal), w);
    });
  }
}

TEST_F(GradCheck, ReshapeAndWeightedSum) {
  for (int i = 0; i < kInstances; ++i) {
    Parameter x("x", rand({2, 3}));
    Tensor w = rand({3, 2});
    expect_pass({&x}, [&](Graph& g) {
      auto xv = g.parameter(x);
      std::vector<Var> terms{project(reshape(xv, {3, 2}), w), sum(mul(xv, xv))};
      std::vector<double> weights{1.0, 0.1};
      return weighted_sum(terms, weights);
    });
  }
}

TEST(Attention, CausalMaskHidesFuture) {
  Rng rng(17);
  Graph g;
  Tensor q = random_tensor({4, 4}, rng), k = random_tensor({4, 4}, rng), v = random_tensor({4, 4}, rng);
  auto base = attention(g.constant(q), g.constant(k), g.constant(v), 2, true);
  Tensor k2 = k, v2 = v;
  for (std::size_t c = 0; c < 4; ++c) {
    k2.at(3, c) += 5.0;
    v2.at(3, c) -= 3.0;
  }
  auto perturbed = attention(g.constant(q), g.constant(k2), g.constant(v2), 2, true);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(base.value().at(r, c), perturbed.value().at(r, c));
    }
  }
  EXPECT_NE(base.value().at(3, 0), perturbed.value().at(3, 0));
}

TEST(Dropout, ZeroRateIsIdentityAndMaskIsSeeded) {
  Graph g;
  Rng r1(1), r2(1);
  auto x = g.constant(Tensor::vector({1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(dropout(x, 0.0, r1).id, x.id);
  EXPECT_EQ(values(dropout(x, 0.5, r1)), values(dropout(x, 0.5, r2)));
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Parameter p("p", Tensor::vector({1.0, -1.0}));
  std::vector<Parameter*> params{&p};
  AdamState state;
  adam_step(params, state);
  EXPECT_EQ(p.value()[0], 1.0);
  EXPECT_EQ(p.value()[1], -1.0);
  EXPECT_EQ(state.t, 1);
}

TEST(Adam, FirstStepAndMoments) {
  Parameter p("p", Tensor::vector({0.5, 0.5, 0.5}));
  const std::vector<double> g{0.2, -3.0, 1e-3};
  std::copy(g.begin(), g.end(), p.grad().data().begin());
  AdamConfig cfg;
  cfg.lr = 0.01;
  AdamState state(cfg);
  std::vector<Parameter*> params{&p};
  adam_step(params, state);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(p.value()[i], 0.5 - cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps), 1e-15);
    EXPECT_NEAR(state.m[0][i], (1.0 - cfg.beta1) * g[i], 1e-18);
    EXPECT_NEAR(state.v[0][i], (1.0 - cfg.beta2) * g[i] * g[i], 1e-18);
  }
  adam_step(params, state);
  EXPECT_EQ(state.t, 2);
}

TEST(Adam, ShapeMismatchIsRejected) {
  Parameter p("p", Tensor::vector({1.0, 2.0}));
  Parameter q("q", Tensor::vector({1.0}));
  std::vector<Parameter*> one{&p};
  std::vector<Parameter*> two{&p, &q};
  AdamState state;
  adam_step(one, state);
  EXPECT_THROW(adam_step(two, state), ContractError);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  Parameter p("p", Tensor::vector({0.0, 0.0}));
  p.grad()[0] = 3.0;
  p.grad()[1] = 4.0;
  std::vector<Parameter*> params{&p};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
}

}  // namespace
}  // namespace persona::diff
