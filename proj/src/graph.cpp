// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace grimm {

Edge make_edge(NodeId a, NodeId b) {
  if (a == b) throw ConfigError("self pair (" + std::to_string(a) + ", " + std::to_string(a) + ") is not an edge");
  return a < b ? Edge{a, b} : Edge{b, a};
}

namespace {

Mask expand_mask(Mask m, NodeId n, const char* name) {
  if (m.empty()) return Mask(static_cast<std::size_t>(n), false);
  if (static_cast<NodeId>(m.size()) != n) {
    throw ConfigError(std::string(name) + " mask has " + std::to_string(m.size()) +
                      " entries, expected " + std::to_string(n));
  }
  return m;
}

}  // namespace

GraphData GraphData::create(NodeId num_nodes, std::vector<Edge> edges, Matrix features,
                            Matrix labels, SplitMasks masks) {
  if (num_nodes < 0) throw ConfigError("negative node count");
  if (features.rows() != num_nodes) {
    throw ConfigError("feature matrix has " + std::to_string(features.rows()) + " rows, expected " +
                      std::to_string(num_nodes));
  }
  if (labels.rows() != num_nodes) {
    throw ConfigError("label matrix has " + std::to_string(labels.rows()) + " rows, expected " +
                      std::to_string(num_nodes));
  }
  if (!features.allFinite()) throw ConfigError("features contain non-finite values");

  GraphData g;
  g.num_nodes_ = num_nodes;
  g.class_of_.resize(static_cast<std::size_t>(num_nodes));
  for (NodeId i = 0; i < num_nodes; ++i) {
    int hot = -1;
    for (Eigen::Index k = 0; k < labels.cols(); ++k) {
      const double y = labels(i, k);
      if (y == 1.0) {
        if (hot >= 0) throw ConfigError("label row " + std::to_string(i) + " has several ones");
        hot = static_cast<int>(k);
      } else if (y != 0.0) {
        throw ConfigError("label row " + std::to_string(i) + " is not one-hot");
      }
    }
    if (hot < 0) throw ConfigError("label row " + std::to_string(i) + " sums to 0");
    g.class_of_[static_cast<std::size_t>(i)] = hot;
  }

  for (auto& e : edges) {
    if (e.u < 0 || e.v < 0 || e.u >= num_nodes || e.v >= num_nodes) {
      throw ConfigError("edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) +
                        ") references a node outside [0, " + std::to_string(num_nodes) + ")");
    }
    e = make_edge(e.u, e.v);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  masks.train = expand_mask(std::move(masks.train), num_nodes, "train");
  masks.val = expand_mask(std::move(masks.val), num_nodes, "val");
  masks.test = expand_mask(std::move(masks.test), num_nodes, "test");
  masks.reliable = expand_mask(std::move(masks.reliable), num_nodes, "reliable");
  for (std::size_t i = 0; i < masks.train.size(); ++i) {
    const int hits = int(masks.train[i]) + int(masks.val[i]) + int(masks.test[i]);
    if (hits > 1) throw ConfigError("node " + std::to_string(i) + " is in more than one of train/val/test");
  }

  g.edges_ = std::move(edges);
  g.features_ = std::move(features);
  g.labels_ = std::move(labels);
  g.masks_ = std::move(masks);
  g.build_adjacency();
  return g;
}

void GraphData::build_adjacency() {
  adjacency_.assign(static_cast<std::size_t>(num_nodes_), {});
  for (const auto& e : edges_) {
    adjacency_[static_cast<std::size_t>(e.u)].push_back(e.v);
    adjacency_[static_cast<std::size_t>(e.v)].push_back(e.u);
  }
  for (auto& nbrs : adjacency_) std::sort(nbrs.begin(), nbrs.end());
}

bool GraphData::has_edge(NodeId a, NodeId b) const {
  if (a == b || a < 0 || b < 0 || a >= num_nodes_ || b >= num_nodes_) return false;
  const auto& nbrs = adjacency_[static_cast<std::size_t>(a)];
  return std::binary_search(nbrs.begin(), nbrs.end(), b);
}

bool GraphData::is_reliable_edge(const Edge& e) const {
  return masks_.reliable[static_cast<std::size_t>(e.u)] && masks_.reliable[static_cast<std::size_t>(e.v)];
}

std::size_t GraphData::num_reliable_nodes() const {
  return static_cast<std::size_t>(std::count(masks_.reliable.begin(), masks_.reliable.end(), true));
}

GraphData GraphData::with_edges(std::vector<Edge> edges) const {
  return create(num_nodes_, std::move(edges), features_, labels_, masks_);
}

GraphData GraphData::with_masks(SplitMasks masks) const {
  return create(num_nodes_, edges_, features_, labels_, std::move(masks));
}

std::string_view to_string(LaplacianKind kind) {
  switch (kind) {
    case LaplacianKind::kSymNormalizedWithSelfLoops: return "sym";
    case LaplacianKind::kRowNormalized: return "row";
    case LaplacianKind::kUnnormalized: return "unnormalized";
  }
  return "?";
}

LaplacianKind parse_laplacian_kind(std::string_view name) {
  if (name == "sym" || name == "sym_normalized_with_self_loops") return LaplacianKind::kSymNormalizedWithSelfLoops;
  if (name == "row" || name == "row_normalized") return LaplacianKind::kRowNormalized;
  if (name == "unnormalized") return LaplacianKind::kUnnormalized;
  throw ConfigError("unknown laplacian kind '" + std::string(name) + "'");
}

SparseMatrix build_laplacian(const GraphData& g, LaplacianKind kind) {
  const NodeId n = g.num_nodes();
  std::vector<double> deg(static_cast<std::size_t>(n));
  for (NodeId i = 0; i < n; ++i) deg[static_cast<std::size_t>(i)] = static_cast<double>(g.degree(i)) + 1.0;

  auto coeff = [&](NodeId i, NodeId j) {
    switch (kind) {
      case LaplacianKind::kSymNormalizedWithSelfLoops:
        return 1.0 / std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]);
      case LaplacianKind::kRowNormalized:
        return 1.0 / deg[static_cast<std::size_t>(i)];
      case LaplacianKind::kUnnormalized:
        return 1.0;
    }
    return 0.0;
  };

  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(n) + 2 * g.num_edges());
  for (NodeId i = 0; i < n; ++i) {
    triplets.emplace_back(i, i, coeff(i, i));
    for (NodeId j : g.neighbors(i)) triplets.emplace_back(i, j, coeff(i, j));
  }
  SparseMatrix l(n, n);
  l.setFromTriplets(triplets.begin(), triplets.end());
  l.makeCompressed();
  return l;
}

EdgeContribution reduced_laplacian(const SparseMatrix& laplacian, const GraphData& g,
                                   const Edge& edge) {
  if (!g.has_edge(edge)) {
    throw ConfigError("edge (" + std::to_string(edge.u) + ", " + std::to_string(edge.v) +
                      ") is not in the graph");
  }
  const double uv = laplacian.coeff(edge.u, edge.v);
  const double vu = laplacian.coeff(edge.v, edge.u);
  std::vector<Eigen::Triplet<double>> t;
  t.emplace_back(edge.u, edge.v, uv);
  t.emplace_back(edge.v, edge.u, vu);
  t.emplace_back(edge.u, edge.u, -uv);
  t.emplace_back(edge.v, edge.v, -vu);
  SparseMatrix m(laplacian.rows(), laplacian.cols());
  m.setFromTriplets(t.begin(), t.end());
  return {edge, std::move(m)};
}

double self_loop_weight(const SparseMatrix& laplacian, NodeId i) {
  double s = 0.0;
  for (SparseMatrix::InnerIterator it(laplacian, i); it; ++it) s += it.value();
  return s;
}

SparseMatrix self_loop_contribution(const SparseMatrix& laplacian, NodeId i) {
  SparseMatrix m(laplacian.rows(), laplacian.cols());
  m.insert(i, i) = self_loop_weight(laplacian, i);
  m.makeCompressed();
  return m;
}

SparseMatrix contribution_sum(const SparseMatrix& laplacian, std::span<const Edge> edges,
                              bool with_self_loops) {
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(edges.size() * 4 + static_cast<std::size_t>(laplacian.rows()));
  for (const auto& e : edges) {
    const double uv = laplacian.coeff(e.u, e.v);
    const double vu = laplacian.coeff(e.v, e.u);
    t.emplace_back(e.u, e.v, uv);
    t.emplace_back(e.v, e.u, vu);
    t.emplace_back(e.u, e.u, -uv);
    t.emplace_back(e.v, e.v, -vu);
  }
  if (with_self_loops) {
    for (NodeId i = 0; i < laplacian.rows(); ++i) t.emplace_back(i, i, self_loop_weight(laplacian, i));
  }
  SparseMatrix m(laplacian.rows(), laplacian.cols());
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

std::pair<GraphData, GraphData> cs_subgraph_split(const GraphData& g,
                                                   std::span<const Edge> edge_subset) {
  std::vector<Edge> first;
  first.reserve(edge_subset.size());
  for (const auto& e : edge_subset) {
    const Edge c = make_edge(e.u, e.v);
    if (!g.has_edge(c)) {
      throw ConfigError("subset edge (" + std::to_string(c.u) + ", " + std::to_string(c.v) +
                        ") is not in the graph");
    }
    first.push_back(c);
  }
  std::sort(first.begin(), first.end());
  first.erase(std::unique(first.begin(), first.end()), first.end());

  std::vector<Edge> second;
  second.reserve(g.num_edges() - first.size());
  std::set_difference(g.edges().begin(), g.edges().end(), first.begin(), first.end(),
                      std::back_inserter(second));
  return {g.with_edges(std::move(first)), g.with_edges(std::move(second))};
}

}  // namespace grimm
