// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <vector>

#include "grimm/graph.hpp"

namespace grimm::testing {

inline Matrix one_hot(const std::vector<int>& classes, int num_classes) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(classes.size()), num_classes);
  for (std::size_t i = 0; i < classes.size(); ++i) y(static_cast<Eigen::Index>(i), classes[i]) = 1.0;
  return y;
}

/// Erdos-Renyi graph with Gaussian features and alternating labels.
inline GraphData random_graph(std::mt19937_64& rng, NodeId n, double p, Eigen::Index dim,
                              int classes = 2) {
  std::bernoulli_distribution coin(p);
  std::normal_distribution<double> normal;
  std::vector<Edge> edges;
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId j = i + 1; j < n; ++j) {
      if (coin(rng)) edges.push_back({i, j});
    }
  }
  Matrix x(n, dim);
  for (Eigen::Index c = 0; c < dim; ++c) {
    for (NodeId i = 0; i < n; ++i) x(i, c) = normal(rng);
  }
  std::vector<int> cls(static_cast<std::size_t>(n));
  for (NodeId i = 0; i < n; ++i) cls[static_cast<std::size_t>(i)] = static_cast<int>(i % classes);
  SplitMasks masks;
  masks.train.assign(static_cast<std::size_t>(n), false);
  for (NodeId i = 0; i < n; i += 2) masks.train[static_cast<std::size_t>(i)] = true;
  return GraphData::create(n, std::move(edges), std::move(x), one_hot(cls, classes), std::move(masks));
}

inline Matrix dense(const SparseMatrix& m) { return Matrix(m); }

}  // namespace grimm::testing
