#include "mmn/graph.hpp"

#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "mmn/error.hpp"
#include "mmn/grad_check.hpp"
#include "test_util.hpp"

namespace mmn::diffcore {
namespace {

using mmn::testing::random_tensor;

constexpr int kInstances = 20;
constexpr double kOpTolerance = 1e-6;

// sum_k c_k y_k with fixed random c, so every output coordinate matters.
Var weighted_sum(Var y, std::uint64_t seed) {
  const std::size_t n = y.value().size();
  std::mt19937_64 rng(seed);
  Graph& g = *y.graph();
  Var row = reshape(y, {1, n});
  return sum(matmul(row, g.constant(random_tensor({n, 1}, rng))));
}

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Max relative error of the analytic gradient of weighted_sum(build(x)).
double op_error(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t seed) {
  ParameterStore store;
  for (std::size_t k = 0; k < inputs.size(); ++k) store.add("x" + std::to_string(k), inputs[k]);
  auto fn = [&](Graph& g) {
    std::vector<Var> xs;
    for (auto& p : store.all()) xs.push_back(g.param(p));
    return weighted_sum(build(g, xs), seed);
  };
  return grad_check(fn, store).max_rel_error;
}

void expect_op_gradients(const char* name, const Builder& build,
                         const std::function<std::vector<Tensor>(std::mt19937_64&)>& make) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(1000 + s);
    const auto inputs = make(rng);
    EXPECT_LT(op_error(build, inputs, 77 + s), kOpTolerance) << name << " instance " << s;
  }
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<std::uint8_t> random_mask(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::uint8_t> m(n);
  for (auto& b : m) b = std::bernoulli_distribution(0.6)(rng) ? 1 : 0;
  return m;
}

TEST(GraphGradTest, Matmul) {
  expect_op_gradients(
      "matmul", [](Graph&, const auto& x) { return matmul(x[0], x[1]); },
      [](auto& rng) {
        const auto m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        return std::vector<Tensor>{random_tensor({m, k}, rng), random_tensor({k, n}, rng)};
      });
}

TEST(GraphGradTest, MatmulTransposed) {
  expect_op_gradients(
      "matmul^T", [](Graph&, const auto& x) { return matmul(x[0], x[1], true); },
      [](auto& rng) {
        const auto m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        return std::vector<Tensor>{random_tensor({m, k}, rng), random_tensor({n, k}, rng)};
      });
}

TEST(GraphGradTest, AddSameShapeAndBias) {
  expect_op_gradients(
      "add", [](Graph&, const auto& x) { return add(add(x[0], x[1]), x[2]); },
      [](auto& rng) {
        const auto m = pick(rng, 1, 4), n = pick(rng, 1, 4);
        return std::vector<Tensor>{random_tensor({m, n}, rng), random_tensor({m, n}, rng),
                                   random_tensor({n}, rng)};
      });
}

TEST(GraphGradTest, SubAndScale) {
  expect_op_gradients(
      "sub/scale", [](Graph&, const auto& x) { return scale(sub(x[0], x[1]), -2.5); },
      [](auto& rng) {
        const auto n = pick(rng, 1, 6);
        return std::vector<Tensor>{random_tensor({n}, rng), random_tensor({n}, rng)};
      });
}

TEST(GraphGradTest, Relu) {
  expect_op_gradients(
      "relu", [](Graph&, const auto& x) { return relu(x[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 5), 3}, rng)}; });
}

TEST(GraphGradTest, Conv2dSame) {
  expect_op_gradients(
      "conv2d_same",
      [](Graph&, const auto& x) { return conv2d_same(x[0], x[1], x[2]); },
      [](auto& rng) {
        const auto h = pick(rng, 1, 5), w = pick(rng, 1, 5), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
        const std::size_t k = pick(rng, 0, 1) ? 3 : 1;
        return std::vector<Tensor>{random_tensor({h, w, ci}, rng), random_tensor({k, k, ci, co}, rng),
                                   random_tensor({co}, rng)};
      });
}

TEST(GraphGradTest, Conv2dSameWithOutputMask) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(2000 + s);
    const std::size_t n = pick(rng, 2, 5), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
    const auto mask = random_mask(n * n, rng);
    std::vector<Tensor> in{random_tensor({n, n, ci}, rng), random_tensor({3, 3, ci, co}, rng)};
    Builder b = [&](Graph&, const std::vector<Var>& x) {
      return conv2d_same(x[0], x[1], std::nullopt, mask);
    };
    EXPECT_LT(op_error(b, in, s), kOpTolerance) << s;
  }
}

TEST(GraphGradTest, MaxpoolInterval) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(3000 + s);
    const std::size_t n = pick(rng, 1, 6), d = pick(rng, 1, 3);
    auto mask = random_mask(n * n, rng);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) mask[i * n + j] = 0;
    }
    std::vector<Tensor> in{random_tensor({n, d}, rng)};
    Builder b = [&](Graph&, const std::vector<Var>& x) { return maxpool_interval(x[0], mask); };
    EXPECT_LT(op_error(b, in, s), kOpTolerance) << s;
  }
}

TEST(GraphGradTest, LayerNorm) {
  expect_op_gradients(
      "layer_norm", [](Graph&, const auto& x) { return layer_norm(x[0], x[1], x[2]); },
      [](auto& rng) {
        const auto m = pick(rng, 1, 3), n = pick(rng, 2, 6);
        return std::vector<Tensor>{random_tensor({m, n}, rng), random_tensor({n}, rng),
                                   random_tensor({n}, rng)};
      });
}

TEST(GraphGradTest, L2Normalize) {
  expect_op_gradients(
      "l2_normalize", [](Graph&, const auto& x) { return l2_normalize(x[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 3), pick(rng, 1, 5)}, rng)}; });
}

TEST(GraphGradTest, SigmoidLogExp) {
  expect_op_gradients(
      "sigmoid", [](Graph&, const auto& x) { return sigmoid(scale(x[0], 4.0)); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 6)}, rng)}; });
  expect_op_gradients(
      "log", [](Graph&, const auto& x) { return log(x[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 6)}, rng, 0.2, 3.0)}; });
  expect_op_gradients(
      "exp", [](Graph&, const auto& x) { return exp(x[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 6)}, rng)}; });
}

TEST(GraphGradTest, SumMean) {
  expect_op_gradients(
      "sum", [](Graph&, const auto& x) { return scale(sum(x[0]), 1.0); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 4), 3}, rng)}; });
  expect_op_gradients(
      "mean", [](Graph&, const auto& x) { return mean(x[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 4), 3}, rng)}; });
}

TEST(GraphGradTest, MaskedFill) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(4000 + s);
    const std::size_t n = pick(rng, 1, 4), d = pick(rng, 1, 3);
    const auto mask = random_mask(n * n, rng);
    std::vector<Tensor> in{random_tensor({n, n, d}, rng)};
    Builder b = [&](Graph&, const std::vector<Var>& x) { return masked_fill(x[0], mask, 0.7); };
    EXPECT_LT(op_error(b, in, s), kOpTolerance) << s;
  }
}

TEST(GraphGradTest, IndexingOps) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(5000 + s);
    const std::size_t v = pick(rng, 1, 5), d = pick(rng, 1, 4);
    std::vector<std::size_t> rows, flat;
    for (int k = 0; k < 6; ++k) rows.push_back(pick(rng, 0, v - 1));
    for (int k = 0; k < 7; ++k) flat.push_back(pick(rng, 0, v * d - 1));
    std::vector<Tensor> in{random_tensor({v, d}, rng), random_tensor({2, d}, rng)};
    Builder gather = [&](Graph&, const std::vector<Var>& x) { return gather_rows(x[0], rows); };
    Builder take_b = [&](Graph&, const std::vector<Var>& x) { return take(x[0], flat); };
    Builder concat = [&](Graph&, const std::vector<Var>& x) {
      const Var parts[] = {x[0], x[1], x[0]};
      return reshape(concat_rows(parts), {(2 * v + 2) * d});
    };
    EXPECT_LT(op_error(gather, in, s), kOpTolerance) << "gather " << s;
    EXPECT_LT(op_error(take_b, in, s), kOpTolerance) << "take " << s;
    EXPECT_LT(op_error(concat, in, s), kOpTolerance) << "concat " << s;
  }
}

TEST(GraphGradTest, LogSumExpBceAddN) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(6000 + s);
    const std::size_t n = pick(rng, 1, 8);
    Tensor targets = random_tensor({n}, rng, 0.0, 1.0);
    std::vector<Tensor> in{random_tensor({n}, rng, -3.0, 3.0), random_tensor({n}, rng)};
    Builder lse = [&](Graph&, const std::vector<Var>& x) { return logsumexp(scale(x[0], 5.0)); };
    Builder bce = [&](Graph&, const std::vector<Var>& x) { return bce_with_logits(scale(x[0], 4.0), targets); };
    Builder addn = [&](Graph&, const std::vector<Var>& x) {
      const Var terms[] = {x[0], x[1], x[0]};
      return add_n(terms);
    };
    EXPECT_LT(op_error(lse, in, s), kOpTolerance) << "logsumexp " << s;
    EXPECT_LT(op_error(bce, in, s), kOpTolerance) << "bce " << s;
    EXPECT_LT(op_error(addn, in, s), kOpTolerance) << "add_n " << s;
  }
}

TEST(GraphGradTest, ThreeLayerComposition) {
  for (int s = 0; s < kInstances; ++s) {
    std::mt19937_64 rng(7000 + s);
    std::vector<Tensor> in{random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                           random_tensor({5}, rng), random_tensor({5, 2}, rng)};
    Builder b = [](Graph&, const std::vector<Var>& x) {
      Var h = relu(add(matmul(x[0], x[1]), x[2]));
      return sigmoid(matmul(h, x[3]));
    };
    EXPECT_LT(op_error(b, in, s), kOpTolerance) << s;
  }
}

TEST(GraphTest, SigmoidAtZero) {
  Graph g;
  EXPECT_DOUBLE_EQ(sigmoid(g.constant(Tensor::scalar(0.0))).value().item(), 0.5);
}

TEST(GraphTest, L2NormalizeThreeFour) {
  Graph g;
  Var y = l2_normalize(g.constant(Tensor::vector({3.0, 4.0})));
  EXPECT_NEAR(y.value()[0], 0.6, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.8, 1e-12);
}

TEST(GraphTest, L2NormalizeZeroRowWithoutEpsRejected) {
  Graph g;
  EXPECT_THROW(l2_normalize(g.constant(Tensor({1, 3}, 0.0)), 0.0), NumericError);
  EXPECT_NO_THROW(l2_normalize(g.constant(Tensor({1, 3}, 0.0))));
}

TEST(GraphTest, ConvAllOnesCenter) {
  Graph g;
  Var y = conv2d_same(g.constant(Tensor({3, 3, 1}, 1.0)), g.constant(Tensor({3, 3, 1, 1}, 1.0)), std::nullopt);
  EXPECT_DOUBLE_EQ(y.value().at(1, 1, 0), 9.0);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0), 4.0);
}

TEST(GraphTest, ConvRejectsEvenKernel) {
  Graph g;
  EXPECT_THROW(conv2d_same(g.constant(Tensor({3, 3, 1})), g.constant(Tensor({2, 2, 1, 1})), std::nullopt),
               InvalidArgument);
}

TEST(GraphTest, ShapeMismatchRejected) {
  Graph g;
  EXPECT_THROW(matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), ShapeError);
  EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2}))), ShapeError);
}

TEST(GraphTest, SumGradientIsOnes) {
  Graph g;
  Var x = g.variable(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
  g.backward(sum(x));
  const Tensor gx = x.grad();
  for (double v : gx.values()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(GraphTest, SigmoidGradientAtZero) {
  ParameterStore store;
  auto& w = store.add("w", Tensor::scalar(0.0));
  Graph g;
  g.backward(sigmoid(g.param(w)));
  EXPECT_DOUBLE_EQ(w.grad.item(), 0.25);
}

TEST(GraphTest, BackwardRequiresScalarAndRunsOnce) {
  Graph g;
  Var x = g.variable(Tensor({2}, 1.0));
  EXPECT_THROW(g.backward(x), ShapeError);
  Var s = sum(x);
  g.backward(s);
  EXPECT_THROW(g.backward(s), InvalidArgument);
}

TEST(GraphTest, RecordsAreTopological) {
  Graph g;
  Var a = g.variable(Tensor({2, 2}, 1.0));
  Var b = relu(matmul(a, a));
  sum(b);
  for (const auto& r : g.records()) {
    for (std::size_t in : r.inputs) EXPECT_LT(in, r.output);
  }
}

TEST(GraphTest, MaxpoolRoutesOneUnitPerOutputToLowestIndex) {
  Graph g;
  Var x = g.variable(Tensor({3, 1}, std::vector<double>{2.0, 2.0, 1.0}));
  std::vector<std::uint8_t> valid(9, 0);
  valid[0 * 3 + 2] = 1;  // cell (0, 2)
  Var y = maxpool_interval(x, valid);
  EXPECT_DOUBLE_EQ(y.value().at(0, 2, 0), 2.0);
  g.backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(GraphTest, MaxpoolGradientMassEqualsValidOutputs) {
  std::mt19937_64 rng(11);
  const std::size_t n = 6, d = 3;
  std::vector<std::uint8_t> valid(n * n, 0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      valid[i * n + j] = (i + j) % 2 == 0;
      count += valid[i * n + j];
    }
  }
  Graph g;
  Tensor t = random_tensor({n, d}, rng);
  for (std::size_t k = 0; k < t.size(); k += 2) t[k] = 0.5;  // force ties
  Var x = g.variable(t);
  g.backward(sum(maxpool_interval(x, valid)));
  const Tensor gx = x.grad();
  double mass = 0.0;
  for (double v : gx.values()) mass += v;
  EXPECT_DOUBLE_EQ(mass, static_cast<double>(count * d));
}

TEST(GraphTest, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(5);
    ParameterStore store;
    auto& w = store.add("w", random_tensor({4, 3}, rng));
    Graph g;
    Var x = g.constant(random_tensor({2, 4}, rng));
    Var loss = mean(sigmoid(matmul(x, g.param(w))));
    g.backward(loss);
    return std::make_pair(loss.value().item(), std::vector<double>(w.grad.values().begin(), w.grad.values().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(GraphTest, NonRecordingGraphLeavesGradientsAlone) {
  ParameterStore store;
  auto& w = store.add("w", Tensor({2}, 1.0));
  w.grad.fill(3.0);
  Graph g(false);
  Var y = sum(g.param(w));
  EXPECT_DOUBLE_EQ(y.value().item(), 2.0);
  EXPECT_DOUBLE_EQ(w.grad[0], 3.0);
}

TEST(GraphTest, UnreachedParameterGetsZeroGradient) {
  ParameterStore store;
  auto& a = store.add("a", Tensor({2}, 1.0));
  auto& b = store.add("b", Tensor({2}, 1.0));
  Graph g;
  g.param(b);
  g.backward(sum(g.param(a)));
  EXPECT_EQ(b.grad.size(), 2u);
  EXPECT_DOUBLE_EQ(b.grad[0], 0.0);
}

TEST(GradCheckTest, LinearMapIsExact) {
  std::mt19937_64 rng(3);
  ParameterStore store;
  store.add("w", random_tensor({3, 2}, rng));
  const Tensor x = random_tensor({1, 3}, rng);
  auto fn = [&](Graph& g) { return sum(matmul(g.constant(x), g.param(store.get("w")))); };
  EXPECT_LT(grad_check(fn, store).max_rel_error, 1e-10);
}

TEST(GradCheckTest, RestoresParameters) {
  ParameterStore store;
  store.add("w", Tensor::vector({1.0, 2.0}));
  auto fn = [&](Graph& g) { return sum(exp(g.param(store.get("w")))); };
  grad_check(fn, store);
  EXPECT_DOUBLE_EQ(store.get("w").value[0], 1.0);
  EXPECT_DOUBLE_EQ(store.get("w").value[1], 2.0);
}

TEST(GradCheckTest, DetectsWrongGradient) {
  // relu at its kink: the one-sided derivative differs from the central one.
  ParameterStore store;
  store.add("w", Tensor::vector({0.0}));
  auto fn = [&](Graph& g) { return sum(relu(g.param(store.get("w")))); };
  EXPECT_GT(grad_check(fn, store).max_rel_error, 0.1);
}

TEST(ParameterStoreTest, GradNormAndZero) {
  ParameterStore store;
  auto& a = store.add("a", Tensor({2}, 0.0));
  a.grad = Tensor::vector({3.0, 4.0});
  EXPECT_DOUBLE_EQ(store.grad_norm(), 5.0);
  store.zero_grad();
  EXPECT_DOUBLE_EQ(store.grad_norm(), 0.0);
  EXPECT_TRUE(store.contains("a"));
  EXPECT_FALSE(store.contains("b"));
}

}  // namespace
}  // namespace mmn::diffcore
