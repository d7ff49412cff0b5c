// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <sstream>

namespace grimm {

void SbmSpec::validate() const {
  if (blocks.size() < 2) throw ConfigError("an SBM needs at least two blocks");
  for (auto b : blocks) {
    if (b <= 0) throw ConfigError("SBM block sizes must be positive");
  }
  if (!(p_out >= 0.0 && p_out <= p_in && p_in <= 1.0)) {
    throw ConfigError("SBM probabilities must satisfy 0 <= p_out <= p_in <= 1");
  }
  if (feature_dim < static_cast<Eigen::Index>(blocks.size())) {
    throw ConfigError("feature_dim must be at least the number of blocks");
  }
  if (!(feature_noise >= 0.0)) throw ConfigError("feature_noise must be non-negative");
}

GraphData sbm_generate(const SbmSpec& spec) {
  spec.validate();
  const NodeId n = std::accumulate(spec.blocks.begin(), spec.blocks.end(), NodeId{0});
  std::vector<int> cls;
  cls.reserve(static_cast<std::size_t>(n));
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) cls.insert(cls.end(), static_cast<std::size_t>(spec.blocks[b]), static_cast<int>(b));

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Edge> edges;
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId j = i + 1; j < n; ++j) {
      const double p = cls[static_cast<std::size_t>(i)] == cls[static_cast<std::size_t>(j)] ? spec.p_in : spec.p_out;
      if (unit(rng) < p) edges.push_back({i, j});
    }
  }
  std::normal_distribution<double> noise(0.0, spec.feature_noise > 0.0 ? spec.feature_noise : 1.0);
  Matrix x = Matrix::Zero(n, spec.feature_dim);
  Matrix y = Matrix::Zero(n, static_cast<Eigen::Index>(spec.blocks.size()));
  for (NodeId i = 0; i < n; ++i) {
    const int c = cls[static_cast<std::size_t>(i)];
    y(i, c) = 1.0;
    for (Eigen::Index k = 0; k < spec.feature_dim; ++k) {
      x(i, k) = (k == c ? 1.0 : 0.0) + (spec.feature_noise > 0.0 ? noise(rng) : 0.0);
    }
  }
  return GraphData::create(n, std::move(edges), std::move(x), std::move(y));
}

void SplitSpec::validate() const {
  if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0)) {
    throw ConfigError("split fractions must satisfy train > 0, val >= 0, train + val < 1");
  }
}

GraphData split_masks(const GraphData& g, const SplitSpec& spec) {
  spec.validate();
  const auto n = static_cast<std::size_t>(g.num_nodes());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n))));
  const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
  if (n_train + n_val >= n) throw ConfigError("split leaves no test nodes");
  SplitMasks m;
  m.train.assign(n, false);
  m.val.assign(n, false);
  m.test.assign(n, false);
  m.reliable = g.reliable_mask();
  for (std::size_t k = 0; k < n; ++k) {
    if (k < n_train) {
      m.train[order[k]] = true;
    } else if (k < n_train + n_val) {
      m.val[order[k]] = true;
    } else {
      m.test[order[k]] = true;
    }
  }
  return g.with_masks(std::move(m));
}

GraphData split_reliable(const GraphData& g, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("reliable fraction must lie in (0, 1)");
  const auto n = static_cast<std::size_t>(g.num_nodes());
  const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (want < 2) {
    throw ConfigError("reliable fraction " + std::to_string(fraction) + " yields " + std::to_string(want) +
                      " node(s); at least 2 are needed");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> roots(n);
  std::iota(roots.begin(), roots.end(), 0);
  std::shuffle(roots.begin(), roots.end(), rng);

  for (std::size_t root : roots) {
    Mask region(n, false);
    std::size_t taken = 0;
    std::queue<NodeId> frontier;
    frontier.push(static_cast<NodeId>(root));
    region[root] = true;
    ++taken;
    while (!frontier.empty() && taken < want) {
      const NodeId cur = frontier.front();
      frontier.pop();
      std::vector<NodeId> nbrs(g.neighbors(cur).begin(), g.neighbors(cur).end());
      std::shuffle(nbrs.begin(), nbrs.end(), rng);
      for (NodeId nb : nbrs) {
        if (taken == want) break;
        if (region[static_cast<std::size_t>(nb)]) continue;
        region[static_cast<std::size_t>(nb)] = true;
        ++taken;
        frontier.push(nb);
      }
    }
    if (taken == want) {
      SplitMasks m = g.masks();
      m.reliable = std::move(region);
      return g.with_masks(std::move(m));
    }
  }
  throw ConfigError("no connected component holds " + std::to_string(want) + " nodes");
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

template <typename T>
bool parse_number(std::string_view tok, T& out) {
  const auto* end = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(tok.data(), end, out);
  if (ec != std::errc() || p != end) return false;
  if constexpr (std::is_floating_point_v<T>) return std::isfinite(out);
  return true;
}

std::vector<std::string_view> tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string_view strip_comment(std::string_view line) {
  const auto hash = line.find('#');
  return hash == std::string_view::npos ? line : line.substr(0, hash);
}

std::ifstream open_or_throw(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  return in;
}

}  // namespace

std::vector<Edge> parse_edge_list(std::istream& in, NodeId num_nodes, const std::string& source) {
  std::vector<Edge> edges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto toks = tokens(strip_comment(line));
    if (toks.empty()) continue;
    if (toks.size() != 2) throw ParseError(source, lineno, "expected two node ids, found " + std::to_string(toks.size()) + " fields");
    long long a = 0, b = 0;
    if (!parse_number(toks[0], a) || !parse_number(toks[1], b)) throw ParseError(source, lineno, "node ids must be integers");
    if (a < 0 || b < 0 || a >= num_nodes || b >= num_nodes) {
      throw ParseError(source, lineno, "node id outside [0, " + std::to_string(num_nodes) + ")");
    }
    if (a == b) throw ParseError(source, lineno, "self loop " + std::to_string(a));
    edges.push_back(make_edge(a, b));
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

Matrix parse_features(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  long long n = -1, d = -1;
  while (n < 0 && std::getline(in, line)) {
    ++lineno;
    const auto toks = tokens(strip_comment(line));
    if (toks.empty()) continue;
    if (toks.size() != 2 || !parse_number(toks[0], n) || !parse_number(toks[1], d) || n < 0 || d <= 0) {
      throw ParseError(source, lineno, "expected header 'N d'");
    }
    if (n > 100'000'000 || d > 1'000'000 || n * d > 500'000'000) throw ParseError(source, lineno, "feature matrix too large");
  }
  if (n < 0) throw ParseError(source, lineno + 1, "missing header 'N d'");
  Matrix x(n, d);
  long long row = 0;
  while (row < n && std::getline(in, line)) {
    ++lineno;
    const auto toks = tokens(strip_comment(line));
    if (toks.empty()) continue;
    if (static_cast<long long>(toks.size()) != d) {
      throw ParseError(source, lineno, "row has " + std::to_string(toks.size()) + " values, expected " + std::to_string(d));
    }
    for (long long k = 0; k < d; ++k) {
      double v = 0.0;
      if (!parse_number(toks[static_cast<std::size_t>(k)], v)) {
        throw ParseError(source, lineno, "bad real '" + std::string(toks[static_cast<std::size_t>(k)]) + "'");
      }
      x(row, k) = v;
    }
    ++row;
  }
  if (row < n) throw ParseError(source, lineno, "expected " + std::to_string(n) + " rows, found " + std::to_string(row));
  while (std::getline(in, line)) {
    ++lineno;
    if (!tokens(strip_comment(line)).empty()) throw ParseError(source, lineno, "data after the last feature row");
  }
  return x;
}

constexpr int kMaxClasses = 1 << 16;

std::vector<int> parse_labels(std::istream& in, NodeId num_nodes, const std::string& source) {
  std::vector<int> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    for (auto tok : tokens(strip_comment(line))) {
      int v = 0;
      if (!parse_number(tok, v)) throw ParseError(source, lineno, "bad label '" + std::string(tok) + "'");
      if (v < 0 || v >= kMaxClasses) {
        throw ParseError(source, lineno, "label " + std::to_string(v) + " outside [0, " + std::to_string(kMaxClasses) + ")");
      }
      if (static_cast<NodeId>(out.size()) >= num_nodes) throw ParseError(source, lineno, "more labels than nodes");
      out.push_back(v);
    }
  }
  if (static_cast<NodeId>(out.size()) != num_nodes) {
    throw ParseError(source, lineno, "found " + std::to_string(out.size()) + " labels, expected " + std::to_string(num_nodes));
  }
  return out;
}

GraphData load_graph(const std::filesystem::path& edge_path, const std::filesystem::path& feature_path,
                     const std::filesystem::path& label_path, const SplitSpec& split) {
  auto fin = open_or_throw(feature_path);
  Matrix x = parse_features(fin, feature_path.string());
  const NodeId n = x.rows();
  auto lin = open_or_throw(label_path);
  const auto cls = parse_labels(lin, n, label_path.string());
  auto ein = open_or_throw(edge_path);
  auto edges = parse_edge_list(ein, n, edge_path.string());
  const int classes = cls.empty() ? 1 : *std::max_element(cls.begin(), cls.end()) + 1;
  Matrix y = Matrix::Zero(n, classes);
  for (NodeId i = 0; i < n; ++i) y(i, cls[static_cast<std::size_t>(i)]) = 1.0;
  return split_masks(GraphData::create(n, std::move(edges), std::move(x), std::move(y)), split);
}

void write_edge_list(std::ostream& out, const std::vector<Edge>& edges) {
  for (const auto& e : edges) out << e.u << ' ' << e.v << '\n';
}

void write_features(std::ostream& out, const Matrix& x) {
  out << x.rows() << ' ' << x.cols() << '\n';
  out.precision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index k = 0; k < x.cols(); ++k) out << (k ? " " : "") << x(i, k);
    out << '\n';
  }
}

void write_labels(std::ostream& out, const GraphData& g) {
  for (int c : g.class_labels()) out << c << '\n';
}

void save_graph(const GraphData& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, auto&& fn) {
    std::ofstream out(dir / name);
    if (!out) throw RuntimeFailure("cannot write " + (dir / name).string());
    fn(out);
  };
  write("edges.txt", [&](std::ostream& o) { write_edge_list(o, g.edges()); });
  write("features.txt", [&](std::ostream& o) { write_features(o, g.features()); });
  write("labels.txt", [&](std::ostream& o) { write_labels(o, g); });
}

}  // namespace grimm
