// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "grimm/types.hpp"

namespace grimm {

/// Undirected edge stored canonically with u < v.
struct Edge {
  NodeId u = 0;
  NodeId v = 0;

  auto operator<=>(const Edge&) const = default;

  bool touches(NodeId n) const { return u == n || v == n; }
  NodeId other(NodeId n) const { return n == u ? v : u; }
};

/// Canonical (min, max) edge. Self pairs are rejected.
Edge make_edge(NodeId a, NodeId b);

using Mask = std::vector<bool>;

struct SplitMasks {
  Mask train;
  Mask val;
  Mask test;
  Mask reliable;
};

/// Immutable attributed graph. Construction validates every invariant; the
/// `with_*` helpers build modified copies.
class GraphData {
 public:
  /// Edges are canonicalized and deduplicated. Throws ConfigError on self
  /// pairs, out-of-range ids, non one-hot labels, mismatched shapes or
  /// overlapping train/val/test masks. Empty masks are expanded to all-false.
  static GraphData create(NodeId num_nodes, std::vector<Edge> edges, Matrix features,
                          Matrix labels, SplitMasks masks = {});

  NodeId num_nodes() const { return num_nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t num_edges() const { return edges_.size(); }
  const Matrix& features() const { return features_; }
  const Matrix& labels() const { return labels_; }
  Eigen::Index num_classes() const { return labels_.cols(); }
  Eigen::Index feature_dim() const { return features_.cols(); }

  int label_of(NodeId i) const { return class_of_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& class_labels() const { return class_of_; }

  const Mask& train_mask() const { return masks_.train; }
  const Mask& val_mask() const { return masks_.val; }
  const Mask& test_mask() const { return masks_.test; }
  const Mask& reliable_mask() const { return masks_.reliable; }
  const SplitMasks& masks() const { return masks_; }

  /// Sorted neighbor ids of `i` (no self).
  std::span<const NodeId> neighbors(NodeId i) const {
    return adjacency_[static_cast<std::size_t>(i)];
  }
  std::size_t degree(NodeId i) const { return adjacency_[static_cast<std::size_t>(i)].size(); }
  bool has_edge(NodeId a, NodeId b) const;
  bool has_edge(const Edge& e) const { return has_edge(e.u, e.v); }

  /// True when both endpoints sit inside the reliable region.
  bool is_reliable_edge(const Edge& e) const;
  std::size_t num_reliable_nodes() const;

  GraphData with_edges(std::vector<Edge> edges) const;
  GraphData with_masks(SplitMasks masks) const;

 private:
  GraphData() = default;
  void build_adjacency();

  NodeId num_nodes_ = 0;
  std::vector<Edge> edges_;
  Matrix features_;
  Matrix labels_;
  SplitMasks masks_;
  std::vector<int> class_of_;
  std::vector<std::vector<NodeId>> adjacency_;
};

enum class LaplacianKind {
  kSymNormalizedWithSelfLoops,  // D~^-1/2 (A + I) D~^-1/2
  kRowNormalized,               // D~^-1 (A + I)
  kUnnormalized,                // A + I
};

std::string_view to_string(LaplacianKind kind);
LaplacianKind parse_laplacian_kind(std::string_view name);

/// Graph propagation operator of the requested kind. Self-loops are always
/// added here, so every row has a positive diagonal.
SparseMatrix build_laplacian(const GraphData& g, LaplacianKind kind);

/// Single-edge share of a Laplacian.
///
/// The share of edge (i, j) holds the off-diagonal entries L[i,j] and L[j,i]
/// and the diagonal entries -L[i,j] and -L[j,i], i.e. the one-edge difference
/// operator weighted by the edge's coefficients. Every row of a contribution
/// sums to zero; the remaining diagonal mass diag(L 1) belongs to the per-node
/// self-loop contributions, so
///   sum_e R(L, e) + sum_i S(L, i) = L
/// holds exactly for any kind.
struct EdgeContribution {
  Edge edge;
  SparseMatrix matrix;
};

/// Throws ConfigError if `edge` is not an edge of `g`.
EdgeContribution reduced_laplacian(const SparseMatrix& laplacian, const GraphData& g,
                                   const Edge& edge);

/// Self-loop share of node i: the 1x1 block (i, i) holding the row sum of L.
SparseMatrix self_loop_contribution(const SparseMatrix& laplacian, NodeId i);

/// Diagonal value of the self-loop share, row i of L summed.
double self_loop_weight(const SparseMatrix& laplacian, NodeId i);

/// Sum of edge contributions over `edges`, plus every node's self-loop share
/// when `with_self_loops` is set.
SparseMatrix contribution_sum(const SparseMatrix& laplacian, std::span<const Edge> edges,
                              bool with_self_loops);

/// Complementary spanning subgraphs: the first keeps `edge_subset`, the
/// second keeps the rest. Both share nodes, features, labels and masks.
/// Throws ConfigError if the subset is not contained in g's edges.
std::pair<GraphData, GraphData> cs_subgraph_split(const GraphData& g,
                                                   std::span<const Edge> edge_subset);

}  // namespace grimm
