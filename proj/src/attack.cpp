// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/attack.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace grimm {

GraphData PerturbationSet::apply(const GraphData& clean) const {
  std::set<Edge> edges(clean.edges().begin(), clean.edges().end());
  for (const auto& e : deleted) {
    if (edges.erase(make_edge(e.u, e.v)) == 0) {
      throw ConfigError("deleted edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) + ") is not in the graph");
    }
  }
  for (const auto& e : inserted) {
    if (!edges.insert(make_edge(e.u, e.v)).second) {
      throw ConfigError("inserted edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) + ") already exists");
    }
  }
  return clean.with_edges({edges.begin(), edges.end()});
}

GraphData PerturbationSet::revert(const GraphData& perturbed) const {
  PerturbationSet inverse{deleted, inserted, rate, seed};
  return inverse.apply(perturbed);
}

std::size_t perturbation_budget(const GraphData& g, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("perturbation rate must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(g.num_edges())));
}

namespace {

bool reliable_pair(const GraphData& g, NodeId a, NodeId b) {
  return g.reliable_mask()[static_cast<std::size_t>(a)] && g.reliable_mask()[static_cast<std::size_t>(b)];
}

}  // namespace

std::pair<GraphData, PerturbationSet> random_perturb(const GraphData& g, double rate,
                                                     double insert_fraction, std::uint64_t seed) {
  if (!(insert_fraction >= 0.0 && insert_fraction <= 1.0)) throw ConfigError("insert_fraction must lie in [0, 1]");
  const std::size_t budget = perturbation_budget(g, rate);
  const auto n_ins = static_cast<std::size_t>(std::llround(insert_fraction * static_cast<double>(budget)));
  const std::size_t n_del = budget - n_ins;

  std::vector<Edge> deletable;
  for (const auto& e : g.edges()) {
    if (!g.is_reliable_edge(e)) deletable.push_back(e);
  }
  const auto n = static_cast<double>(g.num_nodes());
  const auto rel = static_cast<double>(g.num_reliable_nodes());
  std::size_t reliable_edges = 0;
  for (const auto& e : g.edges()) reliable_edges += g.is_reliable_edge(e);
  const double insertable = n * (n - 1) / 2 - static_cast<double>(g.num_edges()) -
                            (rel * (rel - 1) / 2 - static_cast<double>(reliable_edges));
  if (n_del > deletable.size() || static_cast<double>(n_ins) > insertable) {
    throw ConfigError("perturbation budget " + std::to_string(budget) + " is infeasible for this graph");
  }

  std::mt19937_64 rng(seed);
  PerturbationSet p;
  p.rate = rate;
  p.seed = seed;
  std::shuffle(deletable.begin(), deletable.end(), rng);
  p.deleted.assign(deletable.begin(), deletable.begin() + static_cast<std::ptrdiff_t>(n_del));

  std::uniform_int_distribution<NodeId> pick(0, g.num_nodes() - 1);
  std::set<Edge> chosen;
  while (chosen.size() < n_ins) {
    const NodeId a = pick(rng), b = pick(rng);
    if (a == b || g.has_edge(a, b) || reliable_pair(g, a, b)) continue;
    const Edge e = make_edge(a, b);
    if (chosen.insert(e).second) p.inserted.push_back(e);
  }
  return {p.apply(g), p};
}

// ---------------------------------------------------------------------------
// Greedy surrogate attack

namespace {

using Adjacency = std::vector<std::vector<NodeId>>;

Adjacency adjacency_of(const GraphData& g) {
  Adjacency adj(static_cast<std::size_t>(g.num_nodes()));
  for (NodeId i = 0; i < g.num_nodes(); ++i) adj[static_cast<std::size_t>(i)].assign(g.neighbors(i).begin(), g.neighbors(i).end());
  return adj;
}

// S * M for S = D~^-1/2 (A + I) D~^-1/2.
Matrix propagate(const Adjacency& adj, const Matrix& m) {
  const auto n = static_cast<Eigen::Index>(adj.size());
  Vector inv_sqrt(n);
  for (Eigen::Index i = 0; i < n; ++i) inv_sqrt(i) = 1.0 / std::sqrt(static_cast<double>(adj[static_cast<std::size_t>(i)].size()) + 1.0);
  Matrix out(n, m.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    RowVector acc = inv_sqrt(i) * m.row(i);
    for (NodeId j : adj[static_cast<std::size_t>(i)]) acc += inv_sqrt(j) * m.row(j);
    out.row(i) = inv_sqrt(i) * acc;
  }
  return out;
}

Matrix softmax_rows(const Matrix& h) {
  Matrix out(h.rows(), h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const double mx = h.row(i).maxCoeff();
    out.row(i) = (h.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

double target_loss(const Matrix& probs, const std::vector<NodeId>& targets, const std::vector<int>& labels) {
  double loss = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) loss -= std::log(std::max(probs(targets[k], labels[k]), 1e-300));
  return targets.empty() ? 0.0 : loss / static_cast<double>(targets.size());
}

void toggle(Adjacency& adj, NodeId a, NodeId b) {
  for (auto [x, y] : {std::pair{a, b}, std::pair{b, a}}) {
    auto& v = adj[static_cast<std::size_t>(x)];
    auto it = std::lower_bound(v.begin(), v.end(), y);
    if (it != v.end() && *it == y) {
      v.erase(it);
    } else {
      v.insert(it, y);
    }
  }
}

}  // namespace

PoisonSurrogate::PoisonSurrogate(const GraphData& clean, std::uint64_t /*seed*/, const GreedyPoisonConfig& cfg) {
  const Adjacency adj = adjacency_of(clean);
  const Matrix f = propagate(adj, propagate(adj, clean.features()));
  const Eigen::Index c = clean.num_classes();
  std::vector<NodeId> train;
  for (NodeId i = 0; i < clean.num_nodes(); ++i) {
    if (clean.train_mask()[static_cast<std::size_t>(i)]) train.push_back(i);
  }
  if (train.empty()) throw ConfigError("the surrogate needs labeled training nodes");

  // Multinomial logistic regression on propagated features; convex, so a
  // zero start is enough.
  w_ = Matrix::Zero(clean.feature_dim(), c);
  for (int epoch = 0; epoch < cfg.surrogate_epochs; ++epoch) {
    Matrix grad = cfg.weight_decay * w_;
    Matrix probs = softmax_rows(f * w_);
    for (NodeId i : train) {
      RowVector d = probs.row(i);
      d(clean.label_of(i)) -= 1.0;
      grad += f.row(i).transpose() * d / static_cast<double>(train.size());
    }
    w_ -= cfg.surrogate_learning_rate * grad;
  }

  const Matrix probs = softmax_rows(f * w_);
  for (NodeId i = 0; i < clean.num_nodes(); ++i) {
    const bool labeled = clean.train_mask()[static_cast<std::size_t>(i)];
    if (!labeled && !cfg.self_training) continue;
    targets_.push_back(i);
    if (labeled) {
      target_labels_.push_back(clean.label_of(i));
    } else {
      Eigen::Index arg = 0;
      probs.row(i).maxCoeff(&arg);
      target_labels_.push_back(static_cast<int>(arg));
    }
  }
}

double PoisonSurrogate::loss(const GraphData& g) const {
  const Adjacency adj = adjacency_of(g);
  return target_loss(softmax_rows(propagate(adj, propagate(adj, g.features() * w_))), targets_, target_labels_);
}

std::pair<GraphData, PerturbationSet> greedy_poison(const GraphData& g, std::size_t budget,
                                                    std::uint64_t seed, const GreedyPoisonConfig& cfg) {
  PerturbationSet p;
  p.seed = seed;
  p.rate = g.num_edges() ? static_cast<double>(budget) / static_cast<double>(g.num_edges()) : 0.0;
  if (budget == 0) return {g, p};

  const PoisonSurrogate surrogate(g, seed, cfg);
  const auto& targets = surrogate.targets();
  const auto& labels = surrogate.target_labels();
  const Matrix q = g.features() * surrogate.weights();
  const NodeId n = g.num_nodes();
  const Eigen::Index c = q.cols();

  Adjacency adj = adjacency_of(g);
  std::vector<std::vector<bool>> flipped(static_cast<std::size_t>(n), std::vector<bool>(static_cast<std::size_t>(n), false));
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId j = 0; j < n; ++j) {
      if (i == j || reliable_pair(g, i, j)) flipped[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = true;
    }
  }

  auto loss_of = [&](const Adjacency& a) {
    return target_loss(softmax_rows(propagate(a, propagate(a, q))), targets, labels);
  };

  struct Candidate {
    double score;
    NodeId u, v;
  };
  std::vector<Candidate> ranked;
  ranked.reserve(static_cast<std::size_t>(n * (n - 1) / 2));

  for (std::size_t step = 0; step < budget; ++step) {
    const Matrix k = propagate(adj, q);
    const Matrix probs = softmax_rows(propagate(adj, k));
    Matrix gout = Matrix::Zero(n, c);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      gout.row(targets[t]) = probs.row(targets[t]);
      gout(targets[t], labels[t]) -= 1.0;
    }
    gout /= static_cast<double>(targets.size());

    // dLoss/dS for H = S K, K = S Q (S symmetric).
    const Matrix ds = gout * k.transpose() + propagate(adj, gout) * q.transpose();
    Vector deg(n);
    for (NodeId i = 0; i < n; ++i) deg(i) = static_cast<double>(adj[static_cast<std::size_t>(i)].size()) + 1.0;
    // Degree sensitivity: dLoss/dd_i = -1/2 sum_l (dS_il S_il + dS_li S_li) / d_i,
    // where the diagonal term appears in both sums.
    Vector ddeg = Vector::Zero(n);
    for (NodeId i = 0; i < n; ++i) {
      const double si = 1.0 / deg(i);
      ddeg(i) += ds(i, i) * si;
      for (NodeId j : adj[static_cast<std::size_t>(i)]) {
        const double s_ij = 1.0 / std::sqrt(deg(i) * deg(j));
        ddeg(i) += 0.5 * (ds(i, j) + ds(j, i)) * s_ij;
      }
    }
    for (NodeId i = 0; i < n; ++i) ddeg(i) *= -1.0 / deg(i);

    ranked.clear();
    for (NodeId u = 0; u < n; ++u) {
      const auto& fu = flipped[static_cast<std::size_t>(u)];
      for (NodeId v = u + 1; v < n; ++v) {
        if (fu[static_cast<std::size_t>(v)]) continue;
        const auto& au = adj[static_cast<std::size_t>(u)];
        const bool present = std::binary_search(au.begin(), au.end(), v);
        if (present && (au.size() == 1 || adj[static_cast<std::size_t>(v)].size() == 1)) continue;
        const double g_uv = (ds(u, v) + ds(v, u)) / std::sqrt(deg(u) * deg(v)) + ddeg(u) + ddeg(v);
        ranked.push_back({present ? -g_uv : g_uv, u, v});
      }
    }
    if (ranked.empty()) throw ConfigError("no admissible flips remain for the attack budget");
    const std::size_t keep = std::min(cfg.shortlist == 0 ? std::size_t{1} : cfg.shortlist, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return std::tie(a.u, a.v) < std::tie(b.u, b.v);
                      });

    double best_loss = -std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    for (std::size_t r = 0; r < keep; ++r) {
      toggle(adj, ranked[r].u, ranked[r].v);
      const double l = loss_of(adj);
      toggle(adj, ranked[r].u, ranked[r].v);
      if (l > best_loss) {
        best_loss = l;
        best = r;
      }
    }
    const auto [score, u, v] = ranked[best];
    const auto& au = adj[static_cast<std::size_t>(u)];
    const bool present = std::binary_search(au.begin(), au.end(), v);
    (present ? p.deleted : p.inserted).push_back({u, v});
    toggle(adj, u, v);
    flipped[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] = true;
  }
  return {p.apply(g), p};
}

// ---------------------------------------------------------------------------
// Serialization

void write_perturbations(std::ostream& out, const PerturbationSet& p) {
  out << "# rate=" << p.rate << " seed=" << p.seed << '\n';
  for (const auto& e : p.inserted) out << "+ " << e.u << ' ' << e.v << '\n';
  for (const auto& e : p.deleted) out << "- " << e.u << ' ' << e.v << '\n';
}

PerturbationSet read_perturbations(std::istream& in, const std::string& source) {
  PerturbationSet p;
  std::set<Edge> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string op;
    if (!(ls >> op)) continue;
    long long u = 0, v = 0;
    std::string extra;
    if (!(ls >> u >> v) || (ls >> extra)) throw ParseError(source, lineno, "expected '<op> <u> <v>'");
    if (op != "+" && op != "-") throw ParseError(source, lineno, "op must be '+' or '-'");
    if (u < 0 || v < 0 || u == v) throw ParseError(source, lineno, "invalid node pair");
    const Edge e = make_edge(u, v);
    if (!seen.insert(e).second) throw ParseError(source, lineno, "pair flipped twice");
    (op == "+" ? p.inserted : p.deleted).push_back(e);
  }
  return p;
}

}  // namespace grimm
