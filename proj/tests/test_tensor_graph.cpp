#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/ops.hpp"
#include "asff/tensor.hpp"
#include "support/oracles.hpp"

using namespace asff;
using asff::testing::random_tensor;

TEST(Tensor, DataLengthMatchesShape) {
  Tensor<float> t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.data().size(), 120u);
  EXPECT_FALSE(t.has_grad());
  t.grad_buffer();
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Tensor, ValueConstructorRejectsWrongLength) {
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Tensor, AtUsesNchwLayout) {
  Tensor<double> t(Shape{2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  EXPECT_EQ(t.at(1, 2, 3, 4), 119.0);
  EXPECT_EQ(t.at(1, 0, 0, 0), 60.0);
  EXPECT_EQ(t.at(0, 1, 0, 0), 20.0);
  EXPECT_EQ(t.at(0, 0, 1, 0), 5.0);
}

TEST(Tensor, CloneIsIndependentHandleIsShared) {
  Tensor<float> a(Shape{1, 1, 1, 3}, std::vector<float>{1, 2, 3});
  Tensor<float> alias = a;
  Tensor<float> copy = a.clone();
  a[0] = 9;
  EXPECT_EQ(alias[0], 9);
  EXPECT_EQ(copy[0], 1);
  EXPECT_TRUE(alias.same(a));
  EXPECT_FALSE(copy.same(a));
}

TEST(Tensor, CastConvertsValues) {
  Tensor<float> a(Shape{1, 1, 1, 2}, std::vector<float>{1.5f, -2.25f});
  Tensor<double> b = a.cast<double>();
  EXPECT_EQ(b[0], 1.5);
  EXPECT_EQ(b[1], -2.25);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Tensor<double> x = random_tensor<double>(rng, Shape{2, 3, 4, 4}, true);
  Graph<double> g;
  g.backward(sum_all(g, x));
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquareGivesInput) {
  std::mt19937_64 rng(2);
  Tensor<double> x = random_tensor<double>(rng, Shape{1, 2, 3, 3}, true);
  Graph<double> g;
  g.backward(scale(g, sum_all(g, mul(g, x, x)), 0.5));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Backward, NonScalarLossIsInvalid) {
  Tensor<float> x(Shape{1, 1, 2, 2}, 1.0f, true);
  Graph<float> g;
  Tensor<float> y = scale(g, x, 2.0f);
  EXPECT_THROW(g.backward(y), InvalidArgument);
}

TEST(Backward, UnreachableParameterGetsZeros) {
  Tensor<float> used(Shape{1, 1, 2, 2}, 1.0f, true);
  Tensor<float> unused(Shape{1, 1, 2, 2}, 3.0f, true);
  Graph<float> g;
  Tensor<float> other = scale(g, unused, 2.0f);
  (void)other;
  g.backward(sum_all(g, used));
  ASSERT_TRUE(unused.has_grad());
  for (float v : unused.grad()) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, LeafGradsAccumulateAcrossCalls) {
  Tensor<double> x(Shape{1, 1, 1, 2}, 1.0, true);
  Graph<double> g;
  Tensor<double> loss = sum_all(g, scale(g, x, 3.0));
  g.backward(loss);
  g.backward(loss);
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  g.backward(loss);
  EXPECT_EQ(x.grad()[0], 3.0);
}

TEST(Backward, DeterministicBitwise) {
  std::mt19937_64 rng(3);
  Tensor<float> x = random_tensor<float>(rng, Shape{2, 4, 8, 8}, true);
  Tensor<float> w = random_tensor<float>(rng, Shape{3, 4, 3, 3}, true);
  Tensor<float> probe = random_tensor<float>(rng, Shape{2, 3, 4, 4});
  std::vector<std::vector<float>> runs;
  for (int r = 0; r < 2; ++r) {
    x.zero_grad();
    w.zero_grad();
    Graph<float> g;
    Tensor<float> y = conv2d(g, x, w, Tensor<float>(), 2, 1);
    g.backward(asff::testing::probe_loss(g, leaky_relu(g, y), probe));
    std::vector<float> all(x.grad().begin(), x.grad().end());
    all.insert(all.end(), w.grad().begin(), w.grad().end());
    runs.push_back(all);
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(Backward, SeedShapeMismatchIsDimensionError) {
  Tensor<float> x(Shape{1, 1, 2, 2}, 1.0f, true);
  Graph<float> g;
  Tensor<float> y = scale(g, x, 2.0f);
  std::vector<Seed<float>> seeds{{y, std::vector<float>(3, 1.0f)}};
  EXPECT_THROW(g.backward(seeds), DimensionError);
}

TEST(Backward, SeededPassReachesOnlyUpstream) {
  Tensor<double> x(Shape{1, 1, 1, 1}, 2.0, true);
  Graph<double> g;
  Tensor<double> a = scale(g, x, 3.0);
  Tensor<double> b = scale(g, x, 5.0);
  Tensor<double> loss = sum_all(g, add(g, a, b));
  (void)loss;
  std::vector<Seed<double>> seeds{{b, {1.0}}};
  g.backward(seeds);
  EXPECT_EQ(x.grad()[0], 5.0);
}

TEST(Backward, NonFiniteLeafGradientThrows) {
  Tensor<float> x(Shape{1, 1, 1, 1}, 1.0f, true);
  Graph<float> g;
  Tensor<float> y = scale(g, x, std::numeric_limits<float>::infinity());
  EXPECT_THROW(g.backward(sum_all(g, y)), NumericError);
}

TEST(Graph, NodesAreTopological) {
  std::mt19937_64 rng(4);
  Tensor<float> x = random_tensor<float>(rng, Shape{1, 2, 4, 4}, true);
  Tensor<float> w = random_tensor<float>(rng, Shape{2, 2, 1, 1}, true);
  Graph<float> g;
  Tensor<float> y = leaky_relu(g, conv2d(g, x, w, Tensor<float>(), 1, 0));
  Tensor<float> z = add(g, y, maxpool2(g, interpolate_bilinear(g, y, 2)));
  sum_all(g, z);
  std::set<const void*> produced;
  std::set<const void*> produced_by_graph;
  for (const auto& node : g.nodes()) produced_by_graph.insert(node.output.id());
  for (const auto& node : g.nodes()) {
    for (const auto& in : node.inputs) {
      if (in.defined() && produced_by_graph.contains(in.id())) {
        EXPECT_TRUE(produced.contains(in.id())) << node.op;
      }
    }
    produced.insert(node.output.id());
  }
}

TEST(Graph, RecordingOffKeepsNoNodes) {
  Tensor<float> x(Shape{1, 1, 2, 2}, 1.0f, true);
  Graph<float> g;
  g.set_recording(false);
  Tensor<float> y = scale(g, x, 2.0f);
  EXPECT_EQ(g.size(), 0u);
  EXPECT_EQ(y[0], 2.0f);
}

TEST(Graph, ConstantsAreNotRecorded) {
  Tensor<float> x(Shape{1, 1, 2, 2}, 1.0f);
  Graph<float> g;
  scale(g, x, 2.0f);
  EXPECT_EQ(g.size(), 0u);
}

TEST(Graph, OutputsStayFiniteThroughPipeline) {
  std::mt19937_64 rng(5);
  Tensor<float> x = random_tensor<float>(rng, Shape{2, 3, 8, 8}, true);
  Graph<float> g;
  Tensor<float> y = softmax_over_sources(g, scale(g, x, 100.0f));
  g.backward(sum_all(g, mul(g, y, x)));
  EXPECT_TRUE(y.all_finite());
  for (float v : x.grad()) EXPECT_TRUE(std::isfinite(v));
}
