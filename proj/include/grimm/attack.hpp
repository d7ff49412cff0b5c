// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "grimm/graph.hpp"

namespace grimm {

/// Ground truth of a structure perturbation. Flips are kept in the order
/// they were chosen.
struct PerturbationSet {
  std::vector<Edge> inserted;
  std::vector<Edge> deleted;
  double rate = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return inserted.size() + deleted.size(); }
  bool empty() const { return size() == 0; }

  /// Clean graph -> perturbed graph. Throws ConfigError if an insertion
  /// already exists or a deletion is missing.
  GraphData apply(const GraphData& clean) const;
  /// Perturbed graph -> clean graph.
  GraphData revert(const GraphData& perturbed) const;
};

/// Budget for a rate: round(rate * |E|).
std::size_t perturbation_budget(const GraphData& g, double rate);

/// Uniform random flips: round(insert_fraction * budget) insertions of
/// non-edges, the rest deletions. Pairs inside the reliable region are never
/// touched. Throws ConfigError when the budget cannot be met.
std::pair<GraphData, PerturbationSet> random_perturb(const GraphData& g, double rate,
                                                     double insert_fraction, std::uint64_t seed);

struct GreedyPoisonConfig {
  int surrogate_epochs = 200;
  double surrogate_learning_rate = 0.5;
  double weight_decay = 5e-4;
  /// Gradient-ranked flips rescored exactly per step.
  std::size_t shortlist = 16;
  /// Add surrogate pseudo-labels of unlabeled nodes to the attacked loss.
  bool self_training = true;
};

/// Greedy gradient-scored poisoning against a linearized two-layer GCN
/// surrogate softmax(S^2 X W) trained on the clean graph, S the symmetric
/// normalized propagation with self-loops. Each step ranks all admissible
/// flips by the first-order change of the surrogate loss, rescores the top
/// `shortlist` exactly and applies the best one. Reliable-internal pairs and
/// already flipped pairs are excluded.
std::pair<GraphData, PerturbationSet> greedy_poison(const GraphData& g, std::size_t budget,
                                                    std::uint64_t seed,
                                                    const GreedyPoisonConfig& cfg = {});

/// Surrogate loss of `g` under the weights and targets greedy_poison uses
/// for the same clean graph; exposed for exhaustive checks.
class PoisonSurrogate {
 public:
  PoisonSurrogate(const GraphData& clean, std::uint64_t seed, const GreedyPoisonConfig& cfg = {});
  double loss(const GraphData& g) const;
  const Matrix& weights() const { return w_; }
  const std::vector<NodeId>& targets() const { return targets_; }
  const std::vector<int>& target_labels() const { return target_labels_; }

 private:
  Matrix w_;
  std::vector<NodeId> targets_;
  std::vector<int> target_labels_;
};

/// "+ u v" / "- u v", one flip per line, insertions first; '#' comments.
void write_perturbations(std::ostream& out, const PerturbationSet& p);
PerturbationSet read_perturbations(std::istream& in, const std::string& source = "<stream>");

}  // namespace grimm
