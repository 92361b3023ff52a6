// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "haaf/hypernet.hpp"
#include "support.hpp"

using namespace haaf;

namespace {

HyperNetConfig cfg(std::size_t d = 16) {
  HyperNetConfig c;
  c.k = 6;
  c.hidden = 12;
  c.d = d;
  return c;
}

TabularVector random_t(std::mt19937_64& rng, std::size_t k) { return {test::random_values(rng, k, -2, 2), true}; }

void zero_heads(ModelParams& p) {
  for (auto& [name, t] : p)
    if (name.find(".head_") != std::string::npos)
      for (auto& v : t.mutable_values()) v = 0;
}

}  // namespace

TEST(HyperNet, OutputShapes) {
  auto c = cfg();
  auto p = hypernet_init(c, 0);
  std::mt19937_64 rng(1);
  auto t = hypernet_forward(p, c, random_t(rng, c.k));
  EXPECT_EQ(t.v.size(), c.d);
  EXPECT_EQ(t.w.size(), c.d);
}

TEST(HyperNet, TrunkDefaultsAndHeads) {
  HyperNetConfig c;
  EXPECT_EQ(c.k, 20u);
  EXPECT_EQ(c.hidden, 64u);
  EXPECT_EQ(c.depth, 3u);
  c.d = 128;
  EXPECT_DOUBLE_EQ(c.resolved_head_variance(), 1.0 / (64.0 * 128.0));
  auto p = hypernet_init(c, 0);
  EXPECT_EQ(p.at("hyper.trunk.l1.W").shape(), (Shape{20, 64}));
  EXPECT_EQ(p.at("hyper.trunk.l3.W").shape(), (Shape{64, 64}));
  EXPECT_EQ(p.at("hyper.head_v.W").shape(), (Shape{64, 128}));
  EXPECT_EQ(p.at("hyper.head_w.W").shape(), (Shape{64, 128}));
  EXPECT_EQ(p.at("hyper.head_b.W").shape(), (Shape{64, 1}));
  EXPECT_FALSE(p.contains("hyper.trunk.l4.W"));
}

TEST(HyperNet, DimensionMismatchThrows) {
  auto c = cfg();
  auto p = hypernet_init(c, 0);
  EXPECT_THROW(hypernet_forward(p, c, TabularVector{{1, 2, 3}, true}), ShapeError);
}

TEST(HyperNet, ZeroHeadsGiveZeroTctp) {
  auto c = cfg();
  auto p = hypernet_init(c, 2);
  zero_heads(p);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    auto t = hypernet_forward(p, c, random_t(rng, c.k));
    EXPECT_TRUE(std::all_of(t.v.begin(), t.v.end(), [](real x) { return x == 0; }));
    EXPECT_TRUE(std::all_of(t.w.begin(), t.w.end(), [](real x) { return x == 0; }));
    EXPECT_EQ(t.b, 0);
  }
}

TEST(HyperNet, ZeroInputZeroBiasesGiveZeroTctp) {
  auto c = cfg();
  auto p = hypernet_init(c, 4);  // trunk and head biases start at zero, gelu(0) = 0
  auto t = hypernet_forward(p, c, TabularVector{std::vector<real>(c.k, 0), true});
  EXPECT_TRUE(std::all_of(t.v.begin(), t.v.end(), [](real x) { return x == 0; }));
  EXPECT_TRUE(std::all_of(t.w.begin(), t.w.end(), [](real x) { return x == 0; }));
  EXPECT_EQ(t.b, 0);
}

TEST(HyperNet, PureFunction) {
  auto c = cfg();
  auto p = hypernet_init(c, 5);
  std::mt19937_64 rng(6);
  auto t = random_t(rng, c.k);
  auto a = hypernet_forward(p, c, t), b = hypernet_forward(p, c, t);
  EXPECT_EQ(a.v, b.v);
  EXPECT_EQ(a.w, b.w);
  EXPECT_EQ(a.b, b.b);
}

TEST(HyperNet, NoVHeadWhenDisabled) {
  auto c = cfg();
  c.emit_v = false;
  auto p = hypernet_init(c, 0);
  EXPECT_FALSE(p.contains("hyper.head_v.W"));
  std::mt19937_64 rng(1);
  EXPECT_TRUE(hypernet_forward(p, c, random_t(rng, c.k)).v.empty());
}

TEST(HyperNet, TrunkGradientMatchesFiniteDifferences) {
  auto c = cfg(8);
  auto p = hypernet_init(c, 7);
  std::mt19937_64 rng(8);
  auto t = Tensor::row(random_t(rng, c.k).values);
  auto rv = test::random_tensor(rng, {1, c.d}), rw = test::random_tensor(rng, {c.d, 1});
  for (const char* name : {"hyper.trunk.l1.W", "hyper.trunk.l1.b", "hyper.trunk.l2.W", "hyper.trunk.l3.W", "hyper.trunk.l3.b"}) {
    auto f = [&](const Tensor& x) {
      ModelParams q = p;
      q.set(name, x);
      auto o = HyperNet::bind(q, "hyper", c).forward(t);
      return add(add(sum(mul(o.v, rv)), sum(mul(o.w, rw))), sum(o.b));
    };
    EXPECT_LT(finite_diff_check(f, p.at(name).detach(), 1e-6), 1e-5) << name;
  }
}

TEST(HyperNet, GradientReachesEveryTensor) {
  auto c = cfg(8);
  auto p = hypernet_init(c, 9);
  std::mt19937_64 rng(10);
  auto o = HyperNet::bind(p, "hyper", c).forward(Tensor::row(random_t(rng, c.k).values));
  auto rv = test::random_tensor(rng, {1, c.d}), rw = test::random_tensor(rng, {c.d, 1});
  add(add(sum(mul(o.v, rv)), sum(mul(o.w, rw))), sum(o.b)).backward();
  for (auto& [name, t] : p) {
    ASSERT_TRUE(t.has_grad()) << name;
    double norm = 0;
    for (real g : t.grad()) norm += g * g;
    EXPECT_GT(norm, 0) << name;
  }
}

// Monte-Carlo checks of the head initialization over 1000 independent inits.

TEST(HyperNetInit, GeneratedBiasIsSmall) {
  HyperNetConfig c;
  c.d = 128;
  std::mt19937_64 rng(11);
  int small = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto p = hypernet_init(c, s);
    std::normal_distribution<double> n(0, 1);
    TabularVector t;
    for (std::size_t i = 0; i < c.k; ++i) t.values.push_back(static_cast<real>(n(rng)));
    t.normalized = true;
    small += std::abs(hypernet_forward(p, c, t).b) < 0.5;
  }
  EXPECT_GE(small, 990);
}

TEST(HyperNetInit, GeneratedWeightVarianceMatchesTarget) {
  // W = z Hw with z the trunk output; conditional on z each entry has
  // variance |z|^2 * target, so W_j / |z| has variance `target`.
  HyperNetConfig c;
  c.d = 32;
  const double target = c.resolved_head_variance();
  std::mt19937_64 rng(12);
  double acc = 0;
  std::size_t n = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto p = hypernet_init(c, s);
    TabularVector t{test::random_values(rng, c.k, -2, 2), true};
    auto trunk = Mlp::bind(p, "hyper.trunk", 3, Activation::gelu, true).forward(Tensor::row(t.values));
    double z2 = 0;
    for (real v : trunk.values()) z2 += v * v;
    for (real w : hypernet_forward(p, c, t).w) {
      acc += w * w / z2;
      ++n;
    }
  }
  EXPECT_NEAR(acc / double(n) / target, 1.0, 0.2);
}
