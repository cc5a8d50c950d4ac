#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fedbench/params.hpp"

using namespace fedbench;

TEST(Layout, FlattenUnflattenIdentity) {
  Layout layout{{"w", {2, 3}}, {"b", {3}}};
  std::vector<std::vector<double>> tensors{{1, 2, 3, 4, 5, 6}, {7, 8, 9}};
  const auto p = ParamVector::flatten(tensors, layout);
  EXPECT_EQ(p.size(), 9u);
  EXPECT_EQ(p.unflatten(), tensors);
  EXPECT_EQ(layout_size(layout), 9u);
}

TEST(Layout, SizeMismatchThrows) {
  EXPECT_THROW(ParamVector(std::vector<double>{1, 2}, Layout{{"w", {3}}}), std::invalid_argument);
  ParamVector p{1.0, 2.0};
  EXPECT_THROW(p.set_layout(Layout{{"w", {3}}}), std::invalid_argument);
}

TEST(L2Norm, Examples) {
  EXPECT_DOUBLE_EQ(l2_norm(ParamVector{3.0, 4.0}), 5.0);
  EXPECT_EQ(l2_norm(ParamVector{0.0, 0.0, 0.0}), 0.0);
  EXPECT_THROW(l2_norm(ParamVector{}), std::invalid_argument);
}

TEST(L2Norm, MatchesExtendedPrecisionOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(100);
    for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform(-3, 3));
    long double s = 0;
    for (double x : v) s += static_cast<long double>(x) * x;
    const double expected = static_cast<double>(std::sqrt(s));
    EXPECT_NEAR(l2_norm(ParamVector(v)), expected, 1e-9 * expected);
  }
}

TEST(L2Norm, Homogeneous) {
  Rng rng(3);
  std::vector<double> v(50);
  for (auto& x : v) x = rng.normal();
  const ParamVector p(v);
  for (double c : {-7.5, -1.0, 0.001, 3.0, 1e6}) {
    ParamVector q = p;
    q *= c;
    EXPECT_NEAR(l2_norm(q), std::abs(c) * l2_norm(p), 1e-12 * std::abs(c) * l2_norm(p));
  }
}

TEST(L2Norm, NoOverflowOnHugeValues) {
  EXPECT_DOUBLE_EQ(l2_norm(ParamVector{3e200, 4e200}), 5e200);
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_sim(ParamVector{1, 2, 3}, ParamVector{1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(ParamVector{1, 0}, ParamVector{0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cosine_sim(ParamVector{1, -2}, ParamVector{-1, 2}), -1.0);
}

TEST(Cosine, ZeroInputIsFlaggedNotAnError) {
  const auto r = cosine_sim_checked(ParamVector{0, 0}, ParamVector{1, 1});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.zero_input);
  EXPECT_FALSE(cosine_sim_checked(ParamVector{1, 0}, ParamVector{1, 1}).zero_input);
}

TEST(Cosine, ScaleInvariance) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(10);
    for (auto& x : v) x = rng.normal();
    const ParamVector a(v);
    const double c = rng.uniform(0.01, 100.0);
    ParamVector pos = a, neg = a;
    pos *= c;
    neg *= -c;
    EXPECT_NEAR(cosine_sim(a, pos), 1.0, 1e-12);
    EXPECT_NEAR(cosine_sim(a, neg), -1.0, 1e-12);
  }
}

TEST(FixedOrderSum, Examples) {
  std::vector<ParamVector> vs{ParamVector{1, 2}, ParamVector{3, 4}};
  const auto s = fixed_order_sum(vs);
  EXPECT_EQ(s.raw(), (std::vector<double>{4, 6}));
  EXPECT_EQ(fixed_order_sum(std::vector<ParamVector>{ParamVector{7, 8}}).raw(), (std::vector<double>{7, 8}));
  EXPECT_THROW(fixed_order_sum(std::vector<ParamVector>{ParamVector{1}, ParamVector{1, 2}}), std::invalid_argument);
}

TEST(FixedOrderSum, PermutedInputGivesIdenticalBytes) {
  Rng rng(9);
  std::vector<ParamVector> vs;
  for (int i = 0; i < 8; ++i) {
    std::vector<double> v(64);
    for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
    vs.emplace_back(v);
  }
  std::vector<const ParamVector*> ptrs;
  std::vector<int> ids;
  for (int i = 0; i < 8; ++i) {
    ptrs.push_back(&vs[static_cast<std::size_t>(i)]);
    ids.push_back(i);
  }
  const auto ref = fixed_order_sum(ptrs, ids);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<const ParamVector*> p2;
    std::vector<int> id2;
    for (auto k : perm) {
      p2.push_back(ptrs[k]);
      id2.push_back(ids[k]);
    }
    EXPECT_TRUE(fixed_order_sum(p2, id2).same_bits(ref));
  }
  EXPECT_TRUE(fixed_order_sum(ptrs, ids).same_bits(ref));
}

// Reference values from an independent splitmix64 / mt19937_64 script.
TEST(Seeds, FrozenDerivation) {
  EXPECT_EQ(mix64(0), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(derive_seed({0, 0, 0, StreamTag::init}), 0xe366d2c7b6c57915ULL);
  EXPECT_EQ(derive_seed({42, 3, 7, StreamTag::shuffle}), 0x37cbe4909fa4b18bULL);
  EXPECT_EQ(derive_seed({~0ULL, 1000, 99, StreamTag::poison}), 0xc429d0d800895c6bULL);
  Rng rng(derive_seed({42, 3, 7, StreamTag::shuffle}));
  EXPECT_EQ(rng.next_u64(), 0xaea21bf225c68f85ULL);
  EXPECT_DOUBLE_EQ(rng.uniform(), 0.2626956904575385);
  EXPECT_DOUBLE_EQ(rng.uniform(), 0.12003278672260365);
}

TEST(Seeds, SameSpecSameStream) {
  Rng a = derive_rng({7, 1, 2, StreamTag::noise}), b = derive_rng({7, 1, 2, StreamTag::noise});
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Seeds, NoPrefixCollisionsAcrossClientsAndTags) {
  std::set<std::vector<std::uint64_t>> prefixes;
  int specs = 0;
  for (std::uint64_t c = 0; c < 1250; ++c)
    for (std::uint32_t tag = 0; tag < 8; ++tag) {
      Rng r = derive_rng({123, 5, c, static_cast<StreamTag>(tag)});
      std::vector<std::uint64_t> p(10);
      for (auto& x : p) x = r.next_u64();
      prefixes.insert(p);
      ++specs;
    }
  EXPECT_EQ(prefixes.size(), static_cast<std::size_t>(specs));  // 10^4 specs, all distinct
}

TEST(Rng, UniformRangeAndBelow) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
  }
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
  Rng r(2);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, GammaMeanMatchesShape) {
  Rng r(3);
  for (double shape : {0.05, 0.5, 1.0, 4.0}) {
    double s = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += std::exp(r.log_gamma_draw(shape));
    EXPECT_NEAR(s / n, shape, 0.03 * std::max(shape, 0.3)) << shape;
  }
}

TEST(Rng, DirichletOnSimplex) {
  Rng r(4);
  for (double a : {1e-3, 0.5, 1e6}) {
    const auto p = r.dirichlet(10, a);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    for (double x : p) EXPECT_GE(x, 0.0);
  }
}

TEST(Rng, SampleWithoutReplacementDistinct) {
  Rng r(5);
  std::vector<int> pool(100);
  std::iota(pool.begin(), pool.end(), 0);
  const auto s = r.sample_without_replacement(pool, 10);
  EXPECT_EQ(std::set<int>(s.begin(), s.end()).size(), 10u);
  EXPECT_THROW(r.sample_without_replacement(pool, 101), std::invalid_argument);
}
