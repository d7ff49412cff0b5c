// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "grimm/trajectory.hpp"
#include "test_util.hpp"

namespace grimm {
namespace {

using testing::dense;
using testing::one_hot;

ModelArch arch_of(ArchKind kind, std::vector<Eigen::Index> dims, int heads = 1) {
  ModelArch a;
  a.kind = kind;
  a.layer_dims = std::move(dims);
  a.num_heads = heads;
  return a;
}

TEST(EdgeDirectionGcn, ZeroDeltaIsZero) {
  std::mt19937_64 rng(1);
  auto g = testing::random_graph(rng, 5, 0.6, 3);
  auto l = build_laplacian(g, LaplacianKind::kSymNormalizedWithSelfLoops);
  auto c = reduced_laplacian(l, g, g.edges().front());
  auto d = edge_direction_gcn(g.features(), Matrix::Zero(3, 4), c, g.edges().front().u);
  EXPECT_EQ(d.vector, RowVector::Zero(4));
}

TEST(EdgeDirectionGcn, TwoNodesMatchDenseOracle) {
  Matrix x(2, 2);
  x << 1.0, 2.0, -1.0, 0.5;
  auto g = GraphData::create(2, {{0, 1}}, x, one_hot({0, 1}, 2));
  auto l = build_laplacian(g, LaplacianKind::kSymNormalizedWithSelfLoops);
  Matrix dw(2, 3);
  dw << 0.1, -0.2, 0.3, 0.4, 0.0, -0.5;
  Matrix full = dense(l) * x * dw;
  for (NodeId j : {0, 1}) {
    auto d = edge_direction_gcn(x, dw, reduced_laplacian(l, g, {0, 1}), j);
    RowVector self = self_loop_weight(l, j) * x.row(j) * dw;
    EXPECT_LE((d.vector - (full.row(j) - self)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(EdgeDirectionGcn, StarCenterSumsToNodeDirection) {
  Matrix x = Matrix::Random(4, 3);
  auto g = GraphData::create(4, {{0, 1}, {0, 2}, {0, 3}}, x, one_hot({0, 1, 0, 1}, 2));
  auto l = build_laplacian(g, LaplacianKind::kSymNormalizedWithSelfLoops);
  Matrix dw = Matrix::Random(3, 2);
  std::vector<DirectionVector> parts;
  for (const auto& e : g.edges()) parts.push_back(edge_direction_gcn(x, dw, reduced_laplacian(l, g, e), 0));
  parts.push_back({0, 1, self_loop_weight(l, 0) * x.row(0) * dw});
  auto node = node_direction(parts, 2);
  Matrix oracle = dense(l) * x * dw;
  EXPECT_LE((node.vector - oracle.row(0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(NodeDirection, EmptyIsZero) {
  EXPECT_EQ(node_direction({}, 3).vector, RowVector::Zero(3));
}

// Sum of recorded incident edge deltas plus the self-loop share reproduces
// the node's pre-activation delta at every epoch.
void check_edge_sum(const GraphData& g, const ModelArch& arch, int layer, int epochs, double lr) {
  Propagation prop(g, arch);
  auto state = init_model(arch, 4, 4);
  TrajectoryRecorder rec(prop, layer);
  std::vector<ForwardResult> fwds;
  TrainConfig cfg;
  cfg.learning_rate = lr;
  for (int t = 0; t < epochs; ++t) {
    auto res = train_epoch(prop, state, cfg);
    rec.record_epoch(t, res.forward);
    fwds.push_back(std::move(res.forward));
  }
  const auto li = static_cast<std::size_t>(layer - 1);
  double worst = 0.0;
  for (int t = 0; t + 1 < epochs; ++t) {
    const Matrix dh = fwds[t + 1].pre_activations[li] - fwds[t].pre_activations[li];
    const Matrix dm = fwds[t + 1].messages[li] - fwds[t].messages[li];
    Matrix sum(g.num_nodes(), dh.cols());
    for (NodeId i = 0; i < g.num_nodes(); ++i) sum.row(i) = self_loop_weight(prop.laplacian(), i) * dm.row(i);
    for (std::size_t s = 0; s < rec.num_edge_slots(); ++s) {
      const auto id = rec.slot_entity(s);
      sum.row(id.target) += rec.edge_points(t + 1).row(static_cast<Eigen::Index>(s)) -
                            rec.edge_points(t).row(static_cast<Eigen::Index>(s));
    }
    worst = std::max(worst, (sum - dh).cwiseAbs().maxCoeff());
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(EdgeSum, GcnRandomGraphsAllLayers) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    auto g = testing::random_graph(rng, 10 + 8 * trial, 0.2, 4);
    check_edge_sum(g, arch_of(ArchKind::kGcn, {4, 6, 2}), 1, 10, 1.0);
    check_edge_sum(g, arch_of(ArchKind::kGcn, {4, 6, 5, 2}), 2, 10, 1.0);
    auto row = arch_of(ArchKind::kGcn, {4, 6, 2});
    row.laplacian = LaplacianKind::kRowNormalized;
    check_edge_sum(g, row, 1, 10, 1.0);
  }
}

TEST(Recorder, FirstLayerDeltasEqualEdgeDirections) {
  std::mt19937_64 rng(2);
  auto g = testing::random_graph(rng, 9, 0.4, 3);
  auto arch = arch_of(ArchKind::kGcn, {3, 4, 2});
  Propagation prop(g, arch);
  auto state = init_model(arch, 4, 8);
  TrajectoryRecorder rec(prop, 1);
  std::vector<Weights> w{state.weights};
  for (int t = 0; t < 4; ++t) {
    rec.record_epoch(t, train_epoch(prop, state, {}).forward);
    w.push_back(state.weights);
  }
  for (const auto& e : g.edges()) {
    auto c = reduced_laplacian(prop.laplacian(), g, e);
    auto traj = rec.edge_trajectory(e.v, e.u);
    EXPECT_EQ(traj.points.row(0), RowVector::Zero(4));
    for (int t = 0; t + 1 < 4; ++t) {
      Matrix dw = w[t + 1].layers[0].mats[0] - w[t].layers[0].mats[0];
      auto d = edge_direction_gcn(g.features(), dw, c, e.v, t);
      EXPECT_LE((traj.points.row(t + 1) - traj.points.row(t) - d.vector).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Recorder, LengthsAndEpochs) {
  std::mt19937_64 rng(2);
  auto g = testing::random_graph(rng, 9, 0.4, 3);
  auto arch = arch_of(ArchKind::kGcn, {3, 4, 2});
  Propagation prop(g, arch);
  auto state = init_model(arch, 4, 8);
  TrajectoryRecorder rec(prop, 1);
  auto fwd = forward(prop, state.weights);
  rec.record_epoch(0, fwd);
  EXPECT_EQ(rec.node_trajectory(3).length(), 1);
  for (int t = 1; t < 6; ++t) rec.record_epoch(t, fwd);
  auto b = rec.node_trajectory(0);
  EXPECT_EQ(b.epochs, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  EXPECT_THROW(rec.record_epoch(7, fwd), ConfigError);
  EXPECT_THROW(rec.edge_trajectory(0, 0), ConfigError);
  EXPECT_EQ(rec.num_edge_slots(), 2 * g.num_edges());
  rec.reset();
  EXPECT_EQ(rec.length(), 0u);
  rec.record_epoch(40, fwd);
  EXPECT_EQ(rec.node_trajectory(0).epochs, std::vector<int>{40});
}

TEST(Recorder, HistoryWindowKeepsTail) {
  std::mt19937_64 rng(2);
  auto g = testing::random_graph(rng, 9, 0.4, 3);
  auto arch = arch_of(ArchKind::kGcn, {3, 4, 2});
  Propagation prop(g, arch);
  auto full_state = init_model(arch, 4, 8);
  auto short_state = full_state;
  TrajectoryRecorder full(prop, 1), windowed(prop, 1, 3);
  for (int t = 0; t < 7; ++t) {
    full.record_epoch(t, train_epoch(prop, full_state, {}).forward);
    windowed.record_epoch(t, train_epoch(prop, short_state, {}).forward);
  }
  const auto& e = g.edges().front();
  EXPECT_EQ(windowed.edge_trajectory(e.u, e.v).points, full.edge_trajectory(e.u, e.v).tail(3).points);
  EXPECT_EQ(windowed.node_trajectory(2).epochs, (std::vector<int>{4, 5, 6}));
}

TEST(EdgeDirectionGat, IdentityAndCancellation) {
  RowVector z(3);
  z << 1.0, -2.0, 0.5;
  std::vector<Matrix> one{Matrix::Identity(3, 3)};
  std::vector<double> a1{1.0};
  EXPECT_EQ(edge_direction_gat(a1, one, z).vector, z);
  Matrix w = Matrix::Random(3, 2);
  std::vector<Matrix> two{w, -w};
  std::vector<double> a2{0.3, 0.3};
  EXPECT_LE(edge_direction_gat(a2, two, z).vector.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EdgeDirectionGat, RecorderMatchesDenseOracle) {
  std::mt19937_64 rng(6);
  auto g = testing::random_graph(rng, 8, 0.4, 3);
  auto arch = arch_of(ArchKind::kGat, {3, 4, 2}, 2);
  Propagation prop(g, arch);
  auto state = init_model(arch, 3, 8);
  TrajectoryRecorder rec(prop, 1);
  std::vector<ForwardResult> fwds;
  std::vector<Weights> ws;
  for (int t = 0; t < 3; ++t) {
    ws.push_back(state.weights);
    auto r = train_epoch(prop, state, {});
    rec.record_epoch(t, r.forward);
    fwds.push_back(r.forward);
  }
  for (const auto& e : g.edges()) {
    auto traj = rec.edge_trajectory(e.u, e.v);
    for (int t = 0; t < 2; ++t) {
      const auto& lw = ws[t].layers[0];
      std::vector<double> coeff;
      RowVector oracle = RowVector::Zero(4);
      for (int k = 0; k < 2; ++k) {
        coeff.push_back(fwds[t].attention[0].at(k, e.u, e.v));
        oracle += 0.5 * coeff.back() * g.features().row(e.v) * lw.mats[static_cast<std::size_t>(k)];
      }
      auto d = edge_direction_gat(coeff, lw.mats, g.features().row(e.v), t);
      EXPECT_LE((d.vector - oracle).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LE((traj.points.row(t + 1) - traj.points.row(t) - d.vector).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(EdgeDirectionSage, BlockedAggregation) {
  std::mt19937_64 rng(9);
  auto g = testing::random_graph(rng, 10, 0.35, 3);
  auto arch = arch_of(ArchKind::kSage, {3, 4, 2});
  Propagation prop(g, arch);
  auto state = init_model(arch, 2, 2);
  const Matrix& z = g.features();
  Matrix full = prop.mean_aggregator() * z * state.weights.layers[0].mats[1];
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    RowVector sum = RowVector::Zero(4);
    for (NodeId j : g.neighbors(i)) sum += edge_direction_sage(g, state.weights, z, 1, i, j).vector;
    EXPECT_LE((sum - full.row(i)).cwiseAbs().maxCoeff(), 1e-10);
    if (g.degree(i) == 1) {
      EXPECT_LE((edge_direction_sage(g, state.weights, z, 1, i, g.neighbors(i)[0]).vector - full.row(i))
                    .cwiseAbs().maxCoeff(), 1e-15);
    }
  }
  Matrix zero = z;
  const Edge e = g.edges().front();
  zero.row(e.v).setZero();
  EXPECT_EQ(edge_direction_sage(g, state.weights, zero, 1, e.u, e.v).vector, RowVector::Zero(4));
  NodeId a = 0, b = 1;
  while (g.has_edge(a, b)) ++b;
  EXPECT_THROW(edge_direction_sage(g, state.weights, z, 1, a, b), ConfigError);
}

TEST(Normalize, AlreadyOnAxisUnchanged) {
  Matrix p(3, 2);
  p << 0.0, 0.0, 0.4, 0.0, 1.0, 0.0;
  std::vector<Matrix> set{p};
  auto n = normalize(set);
  EXPECT_LE((n[0].points - p).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalize, HandRotation) {
  Matrix p(3, 2);
  p << 1, 1, 2, 3, 4, 5;
  auto a = align_trajectory(p);
  EXPECT_NEAR(a.points(2, 0), 5.0, 1e-12);
  EXPECT_NEAR(a.points(2, 1), 0.0, 1e-12);
  EXPECT_EQ(a.points.row(0), RowVector::Zero(2));
  // The middle point (1, 2) keeps its length.
  EXPECT_NEAR(a.points.row(1).norm(), std::sqrt(5.0), 1e-12);
}

TEST(Normalize, ConstantTrajectoryIsDegenerate) {
  Matrix p = Matrix::Constant(4, 3, 2.5);
  auto a = align_trajectory(p);
  EXPECT_TRUE(a.degenerate);
  EXPECT_EQ(a.points, Matrix::Zero(4, 3));
}

TEST(Normalize, TooShortThrows) {
  EXPECT_THROW(align_trajectory(Matrix::Zero(1, 3)), ConfigError);
  std::vector<Matrix> mixed{Matrix::Random(3, 2), Matrix::Random(4, 2)};
  EXPECT_THROW(normalize(mixed), ConfigError);
}

TEST(Normalize, RandomInvariants) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> dims(1, 16), lens(2, 50);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = dims(rng), t = lens(rng);
    std::vector<Matrix> set(5, Matrix(t, d));
    for (auto& m : set) {
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = 3.0 * normal(rng);
    }
    auto once = normalize(set);
    std::vector<Matrix> again_in;
    for (const auto& n : once) {
      EXPECT_EQ(n.points.row(0), RowVector::Zero(d));
      if (d > 1) EXPECT_LE(n.points.row(t - 1).tail(d - 1).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_GE(n.points.minCoeff(), 0.0);
      EXPECT_LE(n.points.maxCoeff(), 1.0);
      again_in.push_back(n.points);
    }
    auto twice = normalize(again_in);
    for (std::size_t k = 0; k < once.size(); ++k) {
      EXPECT_LE((twice[k].points - once[k].points).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Normalize, FittedScaleClampsProbes) {
  Matrix a(2, 1), b(2, 1);
  a << 0, 2;
  b << 0, 4;
  std::vector<NormalizedTrajectory> fit_set{align_trajectory(a)};
  auto norm = TrajectoryNormalizer::fit(fit_set);
  EXPECT_EQ(norm.scale(), 2.0);
  auto probe = norm.apply(align_trajectory(b));
  EXPECT_EQ(probe.points(1, 0), 1.0);
}

TEST(Mse, BasicProperties) {
  Matrix a = Matrix::Random(6, 3);
  EXPECT_EQ(trajectory_mse(a, a), 0.0);
  RowVector c(3);
  c << 0.5, -1.0, 2.0;
  Matrix b = a.rowwise() + c;
  EXPECT_NEAR(trajectory_mse(a, b), c.squaredNorm(), 1e-12);
  Matrix r = Matrix::Random(6, 3);
  double brute = 0.0;
  for (Eigen::Index t = 0; t < 6; ++t) {
    for (Eigen::Index k = 0; k < 3; ++k) brute += (a(t, k) - r(t, k)) * (a(t, k) - r(t, k));
  }
  EXPECT_NEAR(trajectory_mse(a, r), brute / 6.0, 1e-12);
  EXPECT_EQ(trajectory_mse(a, r), trajectory_mse(r, a));
  EXPECT_THROW(trajectory_mse(a, Matrix::Random(5, 3)), ConfigError);
}

TEST(Dump, RoundTrip) {
  std::vector<TrajectoryBuffer> bufs;
  bufs.push_back({EntityId::node(3), 1, {0, 1, 2}, Matrix::Random(3, 2)});
  bufs.push_back({EntityId::edge(4, 7), 1, {0, 1, 2}, Matrix::Random(3, 2)});
  std::stringstream ss;
  write_trajectories(ss, bufs);
  auto back = read_trajectories(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(back[k].entity, bufs[k].entity);
    EXPECT_EQ(back[k].epochs, bufs[k].epochs);
    EXPECT_EQ(back[k].points, bufs[k].points);
  }
}

TEST(Dump, ErrorsCarryLineNumbers) {
  std::stringstream bad("grimm-trajectories 1 dim=1 length=2\nnode 0 layer=1 epochs=0,1 0.5\n");
  try {
    read_trajectories(bad, "dump.txt");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::stringstream header("something else\n");
  EXPECT_THROW(read_trajectories(header), ParseError);
}

}  // namespace
}  // namespace grimm
