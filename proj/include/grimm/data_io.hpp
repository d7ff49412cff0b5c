// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "grimm/graph.hpp"

namespace grimm {

/// Two-or-more block stochastic block model with noisy one-hot features.
struct SbmSpec {
  std::vector<NodeId> blocks{250, 250};
  double p_in = 0.03;
  double p_out = 0.001;
  Eigen::Index feature_dim = 16;
  double feature_noise = 0.5;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless 0 <= p_out <= p_in <= 1, there are at least
  /// two non-empty blocks and feature_dim >= block count.
  void validate() const;
};

/// Edges are Bernoulli(p_in) within a block and Bernoulli(p_out) across.
/// Features are e_block + N(0, feature_noise^2) per entry. No masks set.
GraphData sbm_generate(const SbmSpec& spec);

struct SplitSpec {
  double train_fraction = 0.1;
  double val_fraction = 0.1;  // the remainder is test
  std::uint64_t seed = 0;

  void validate() const;
};

/// Random disjoint train/val/test masks; the reliable mask is preserved.
GraphData split_masks(const GraphData& g, const SplitSpec& spec);

/// Marks round(fraction * N) nodes reliable, grown by breadth-first search
/// from a seeded root so the region is connected. Roots whose component is
/// too small are skipped. Throws ConfigError if the region would have fewer
/// than two nodes or no component is large enough.
GraphData split_reliable(const GraphData& g, double fraction, std::uint64_t seed);

/// Edge list: one whitespace-separated pair per line, '#' starts a comment.
std::vector<Edge> parse_edge_list(std::istream& in, NodeId num_nodes, const std::string& source);
/// Features: header "N d", then N rows of d reals.
Matrix parse_features(std::istream& in, const std::string& source);
/// Labels: N integers in [0, num_classes); classes counted as max + 1.
std::vector<int> parse_labels(std::istream& in, NodeId num_nodes, const std::string& source);

GraphData load_graph(const std::filesystem::path& edge_path, const std::filesystem::path& feature_path,
                     const std::filesystem::path& label_path, const SplitSpec& split);

void write_edge_list(std::ostream& out, const std::vector<Edge>& edges);
void write_features(std::ostream& out, const Matrix& features);
void write_labels(std::ostream& out, const GraphData& g);

/// Writes <dir>/edges.txt, features.txt and labels.txt.
void save_graph(const GraphData& g, const std::filesystem::path& dir);

}  // namespace grimm
