// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "grimm/graph.hpp"
#include "test_util.hpp"

namespace grimm {
namespace {

using testing::dense;
using testing::one_hot;

GraphData tiny(NodeId n, std::vector<Edge> edges) {
  std::vector<int> cls(static_cast<std::size_t>(n), 0);
  cls.back() = 1;
  return GraphData::create(n, std::move(edges), Matrix::Identity(n, n), one_hot(cls, 2));
}

TEST(GraphData, CanonicalizesAndDeduplicates) {
  auto g = tiny(3, {{1, 0}, {0, 1}, {2, 1}});
  ASSERT_EQ(g.num_edges(), 2u);
  EXPECT_EQ(g.edges()[0], (Edge{0, 1}));
  EXPECT_EQ(g.edges()[1], (Edge{1, 2}));
  EXPECT_TRUE(g.has_edge(1, 0));
  EXPECT_FALSE(g.has_edge(0, 2));
  EXPECT_EQ(g.degree(1), 2u);
}

TEST(GraphData, RejectsInvalidInput) {
  EXPECT_THROW(tiny(2, {{0, 0}}), ConfigError);
  EXPECT_THROW(tiny(2, {{0, 5}}), ConfigError);
  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 0) = 1.0;
  EXPECT_THROW(GraphData::create(2, {}, Matrix::Zero(2, 1), bad), ConfigError);
  SplitMasks m;
  m.train = {true, false};
  m.test = {true, false};
  EXPECT_THROW(GraphData::create(2, {}, Matrix::Zero(2, 1), one_hot({0, 1}, 2), m), ConfigError);
}

TEST(Laplacian, SingleEdgeSymmetric) {
  auto l = dense(build_laplacian(tiny(2, {{0, 1}}), LaplacianKind::kSymNormalizedWithSelfLoops));
  EXPECT_TRUE(l.isApprox(Matrix::Constant(2, 2, 0.5), 1e-15));
}

TEST(Laplacian, EmptyGraphIsIdentity) {
  auto l = dense(build_laplacian(tiny(3, {}), LaplacianKind::kSymNormalizedWithSelfLoops));
  EXPECT_EQ(l, Matrix::Identity(3, 3));
}

TEST(Laplacian, PathEntry) {
  auto l = dense(build_laplacian(tiny(3, {{0, 1}, {1, 2}}), LaplacianKind::kSymNormalizedWithSelfLoops));
  EXPECT_NEAR(l(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
  EXPECT_EQ(l, l.transpose());
}

TEST(Laplacian, OtherKinds) {
  auto g = tiny(3, {{0, 1}, {1, 2}});
  auto row = dense(build_laplacian(g, LaplacianKind::kRowNormalized));
  EXPECT_NEAR(row(1, 0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(row.row(1).sum(), 1.0, 1e-15);
  auto un = dense(build_laplacian(g, LaplacianKind::kUnnormalized));
  Matrix expect(3, 3);
  expect << 1, 1, 0, 1, 1, 1, 0, 1, 1;
  EXPECT_EQ(un, expect);
  EXPECT_EQ(parse_laplacian_kind("row"), LaplacianKind::kRowNormalized);
  EXPECT_THROW(parse_laplacian_kind("bogus"), ConfigError);
}

Matrix decomposition_residual(const GraphData& g, LaplacianKind kind) {
  const auto l = build_laplacian(g, kind);
  Matrix sum = Matrix::Zero(g.num_nodes(), g.num_nodes());
  for (const auto& e : g.edges()) sum += dense(reduced_laplacian(l, g, e).matrix);
  for (NodeId i = 0; i < g.num_nodes(); ++i) sum += dense(self_loop_contribution(l, i));
  return sum - dense(l);
}

TEST(ReducedLaplacian, SingleEdge) {
  auto g = tiny(2, {{0, 1}});
  EXPECT_EQ(decomposition_residual(g, LaplacianKind::kSymNormalizedWithSelfLoops).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ReducedLaplacian, PathAndStar) {
  for (auto kind : {LaplacianKind::kSymNormalizedWithSelfLoops, LaplacianKind::kRowNormalized,
                    LaplacianKind::kUnnormalized}) {
    EXPECT_LE(decomposition_residual(tiny(3, {{0, 1}, {1, 2}}), kind).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(decomposition_residual(tiny(4, {{0, 1}, {0, 2}, {0, 3}}), kind).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ReducedLaplacian, SupportAndRowSums) {
  auto g = tiny(4, {{0, 1}, {0, 2}, {0, 3}});
  auto l = build_laplacian(g, LaplacianKind::kSymNormalizedWithSelfLoops);
  auto r = dense(reduced_laplacian(l, g, {0, 2}).matrix);
  EXPECT_EQ(r(0, 2), dense(l)(0, 2));
  EXPECT_EQ(r(1, 1), 0.0);
  EXPECT_EQ(r.row(3).sum(), 0.0);
  EXPECT_NEAR(r.rowwise().sum().cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(ReducedLaplacian, PhantomEdgeThrows) {
  auto g = tiny(3, {{0, 1}});
  auto l = build_laplacian(g, LaplacianKind::kSymNormalizedWithSelfLoops);
  EXPECT_THROW(reduced_laplacian(l, g, {1, 2}), ConfigError);
}

TEST(ReducedLaplacian, RandomGraphsAllKinds) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = testing::random_graph(rng, 5 + trial, 0.3, 2);
    for (auto kind : {LaplacianKind::kSymNormalizedWithSelfLoops, LaplacianKind::kRowNormalized,
                      LaplacianKind::kUnnormalized}) {
      EXPECT_LE(decomposition_residual(g, kind).cwiseAbs().maxCoeff(), 1e-12);
      const auto l = build_laplacian(g, kind);
      Matrix fast = dense(contribution_sum(l, g.edges(), true));
      EXPECT_LE((fast - dense(l)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(CsSubgraph, TrivialSplits) {
  auto g = tiny(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});
  auto [a, b] = cs_subgraph_split(g, {});
  EXPECT_EQ(a.num_edges(), 0u);
  EXPECT_EQ(b.edges(), g.edges());
  auto [c, d] = cs_subgraph_split(g, g.edges());
  EXPECT_EQ(c.edges(), g.edges());
  EXPECT_EQ(d.num_edges(), 0u);
  std::vector<Edge> phantom{{0, 2}};
  EXPECT_THROW(cs_subgraph_split(g, phantom), ConfigError);
}

TEST(CsSubgraph, FourCycleMatchingsSumToWhole) {
  auto g = tiny(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});
  std::vector<Edge> matching{{0, 1}, {2, 3}};
  auto [a, b] = cs_subgraph_split(g, matching);
  EXPECT_EQ(a.num_edges() + b.num_edges(), g.num_edges());
  const auto l = build_laplacian(g, LaplacianKind::kSymNormalizedWithSelfLoops);
  Matrix sum = dense(contribution_sum(l, a.edges(), false)) + dense(contribution_sum(l, b.edges(), true));
  EXPECT_LE((sum - dense(l)).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace
}  // namespace grimm
