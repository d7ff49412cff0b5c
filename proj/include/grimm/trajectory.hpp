// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "grimm/graph.hpp"
#include "grimm/model.hpp"
#include "grimm/types.hpp"

namespace grimm {

/// Difference between two consecutive trajectory points.
struct DirectionVector {
  int from_epoch = 0;
  int to_epoch = 1;
  RowVector vector;
};

enum class EntityKind { kNode, kEdge };

/// Identifies one trajectory. Edge trajectories are directed: `target`
/// receives the messages sent by `source` along the stored undirected edge.
struct EntityId {
  EntityKind kind = EntityKind::kNode;
  NodeId target = 0;
  NodeId source = -1;  // edges only

  static EntityId node(NodeId i) { return {EntityKind::kNode, i, -1}; }
  static EntityId edge(NodeId target, NodeId source) { return {EntityKind::kEdge, target, source}; }
  Edge undirected() const { return make_edge(target, source); }
  auto operator<=>(const EntityId&) const = default;
};

/// One entity's layer-l feature vectors over consecutive epochs.
struct TrajectoryBuffer {
  EntityId entity;
  int layer = 1;
  std::vector<int> epochs;
  Matrix points;  // one row per epoch

  Eigen::Index length() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }
  /// Last `n` points (all of them when n >= length()).
  TrajectoryBuffer tail(Eigen::Index n) const;
};

/// Direction of edge (target <- source) under a GCN layer: row `target` of
/// R(L, edge) * Z * dW.
DirectionVector edge_direction_gcn(const Matrix& z_prev, const Matrix& delta_w,
                                   const EdgeContribution& contribution, NodeId target,
                                   int from_epoch = 0);

/// Sum of the given directions (zero vector of `dim` for an empty list).
DirectionVector node_direction(std::span<const DirectionVector> parts, Eigen::Index dim);

/// GAT message along (target <- source): sum_k (a_k / K) z_source W_k.
DirectionVector edge_direction_gat(std::span<const double> coefficients,
                                   std::span<const Matrix> head_weights, const RowVector& z_source,
                                   int from_epoch = 0);

/// SAGE blocked aggregation into `target` when only `source` passes:
/// (z_source W_neigh) / deg(target). Throws ConfigError unless the two are
/// adjacent.
DirectionVector edge_direction_sage(const GraphData& g, const Weights& weights, const Matrix& z_prev,
                                    int layer, NodeId target, NodeId source, int from_epoch = 0);

/// Records node and edge trajectories at one interface layer.
///
/// Node points are the layer's pre-activations. Edge points start at the
/// origin and integrate per-epoch edge directions:
///   GCN:      R(L, e) applied to the change of Z_{l-1} W_l between epochs
///   GAT/SAGE: the message the edge delivers at each epoch
/// Every edge yields two directed trajectories. Storage keeps at most
/// `history` epochs (0 keeps everything).
class TrajectoryRecorder {
 public:
  TrajectoryRecorder(const Propagation& prop, int layer, std::size_t history = 0);

  /// Appends one epoch. `fwd` must be the forward pass of the weights at
  /// `epoch`; epochs must be contiguous. Throws ConfigError otherwise.
  void record_epoch(int epoch, const ForwardResult& fwd);

  /// Drops every stored point; the next record starts a fresh trajectory.
  void reset();
  /// Rebinds to a new graph (after rectification) and resets.
  void rebind(const Propagation& prop);

  int layer() const { return layer_; }
  Eigen::Index dim() const { return dim_; }
  std::size_t length() const { return epochs_.size(); }
  const std::deque<int>& epochs() const { return epochs_; }

  std::size_t num_edge_slots() const { return slots_.size(); }
  /// Slot of the directed edge (target <- source), or -1.
  Eigen::Index edge_slot(NodeId target, NodeId source) const;
  EntityId slot_entity(std::size_t slot) const { return slots_[slot]; }

  TrajectoryBuffer node_trajectory(NodeId i) const;
  TrajectoryBuffer edge_trajectory(NodeId target, NodeId source) const;
  TrajectoryBuffer slot_trajectory(std::size_t slot) const;

  /// Node points at one stored epoch index (0 = oldest kept).
  const Matrix& node_points(std::size_t k) const { return node_points_[k]; }
  /// Edge points (one row per slot) at one stored epoch index.
  Matrix edge_points(std::size_t k) const;

 private:
  void bind(const Propagation& prop);
  void current_messages(const ForwardResult& fwd, Matrix& out) const;
  void edge_point(std::size_t k, std::size_t slot, Eigen::Ref<RowVector, 0, Eigen::InnerStride<>> out) const;

  int layer_;
  std::size_t history_;
  ArchKind kind_ = ArchKind::kGcn;
  Eigen::Index dim_ = 0;
  NodeId num_nodes_ = 0;
  std::vector<EntityId> slots_;
  std::vector<std::vector<std::pair<NodeId, std::size_t>>> slot_index_;  // per target
  std::vector<double> slot_coeff_;  // GCN: L[target, source]; SAGE: 1 / deg(target)
  std::vector<Eigen::Index> slot_attention_;  // GAT: CSR position of (target, source)

  std::deque<int> epochs_;
  std::deque<Matrix> node_points_;
  std::deque<Matrix> edge_points_;  // GAT/SAGE
  // GCN edge points are linear in the node messages, so only those are
  // kept: point = L_ts ((M - M0)_s - (M - M0)_t) with M0 the first epoch.
  std::deque<Matrix> message_points_;
  Matrix origin_messages_;
  Matrix last_messages_;
  Matrix position_;
  bool have_last_ = false;
};

/// Trajectory after translation, alignment of its endpoint with the first
/// axis and scaling.
struct NormalizedTrajectory {
  Matrix points;
  bool degenerate = false;
  RowVector translation;  // the original first point
  double displacement = 0.0;  // endpoint norm before scaling
  double scale = 1.0;

  Eigen::Index length() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }
};

/// Translates the first point to the origin, reflects the endpoint onto the
/// positive first axis (a Householder map, norm preserving) and folds every
/// coordinate to its absolute value. No scaling. Zero-displacement inputs
/// come back all-origin and flagged degenerate. Throws ConfigError for fewer
/// than two points.
NormalizedTrajectory align_trajectory(const Matrix& points);

/// Set-wide scale shared by a collection of aligned trajectories: the
/// largest coordinate over the set (1 when everything is at the origin).
class TrajectoryNormalizer {
 public:
  TrajectoryNormalizer() = default;
  explicit TrajectoryNormalizer(double scale) : scale_(scale) {}

  static TrajectoryNormalizer fit(std::span<const NormalizedTrajectory> aligned);
  /// Divides by the fitted scale and clamps into [0, 1].
  NormalizedTrajectory apply(NormalizedTrajectory aligned) const;
  double scale() const { return scale_; }

 private:
  double scale_ = 1.0;
};

/// align + fit + apply over one set. All inputs must share length and
/// dimension.
std::vector<NormalizedTrajectory> normalize(std::span<const Matrix> trajectories);

/// Mean over steps of the squared Euclidean distance between corresponding
/// points. Throws ConfigError on a shape mismatch.
double trajectory_mse(const Matrix& a, const Matrix& b);
inline double trajectory_mse(const NormalizedTrajectory& a, const NormalizedTrajectory& b) {
  return trajectory_mse(a.points, b.points);
}

/// Line-oriented text dump of trajectory buffers. Header
///   grimm-trajectories 1 dim=<d> length=<T>
/// then one record per buffer:
///   node <i> layer=<l> epochs=<e0,e1,...> <T*d reals, row-major>
///   edge <source>><target> layer=<l> epochs=<...> <reals>
void write_trajectories(std::ostream& out, std::span<const TrajectoryBuffer> buffers);
std::vector<TrajectoryBuffer> read_trajectories(std::istream& in, const std::string& source = "<stream>");

}  // namespace grimm
