// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/immune.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace grimm {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Linear-interpolated percentile, p in [0, 100]. Sorts in place.
double percentile(std::vector<double>& values, double p) {
  if (values.empty()) throw ConfigError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint64_t out = 0;
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out;
}

// Squared distance, abandoned once it exceeds `bound`.
double bounded_sq_distance(const Matrix& a, const Matrix& b, double bound) {
  double acc = 0.0;
  const Eigen::Index rows = a.rows();
  for (Eigen::Index r = 0; r < rows; ++r) {
    acc += (a.row(r) - b.row(r)).squaredNorm();
    if (acc > bound) return acc;
  }
  return acc;
}

double min_mse(const NormalizedTrajectory& probe, std::span<const NormalizedTrajectory> set) {
  const auto len = static_cast<double>(probe.length());
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : set) {
    if (s.points.rows() != probe.points.rows() || s.points.cols() != probe.points.cols()) {
      throw ConfigError("trajectory shapes differ in detection");
    }
    best = std::min(best, bounded_sq_distance(probe.points, s.points, best * len) / len);
  }
  return best;
}

}  // namespace

std::string_view to_string(LambdaMode m) {
  return m == LambdaMode::kComputedGcn ? "computed_gcn" : "empirical";
}

LambdaMode parse_lambda_mode(std::string_view s) {
  const auto v = lower(s);
  if (v == "computed_gcn" || v == "computed") return LambdaMode::kComputedGcn;
  if (v == "empirical") return LambdaMode::kEmpirical;
  throw ConfigError("unknown lambda mode '" + std::string(s) + "' (expected computed_gcn or empirical)");
}

std::string_view to_string(DetectionRule r) { return r == DetectionRule::kMin ? "min" : "mean"; }

DetectionRule parse_detection_rule(std::string_view s) {
  const auto v = lower(s);
  if (v == "min") return DetectionRule::kMin;
  if (v == "mean") return DetectionRule::kMean;
  throw ConfigError("unknown detection rule '" + std::string(s) + "' (expected min or mean)");
}

std::string_view to_string(ReliableSource r) {
  return r == ReliableSource::kSubgraph ? "subgraph" : "exogenous";
}

ReliableSource parse_reliable_source(std::string_view s) {
  const auto v = lower(s);
  if (v == "subgraph") return ReliableSource::kSubgraph;
  if (v == "exogenous") return ReliableSource::kExogenous;
  throw ConfigError("unknown reliable source '" + std::string(s) + "' (expected subgraph or exogenous)");
}

std::string_view to_string(EdgeVerdictKind k) {
  switch (k) {
    case EdgeVerdictKind::kInserted: return "inserted";
    case EdgeVerdictKind::kDeleted: return "deleted";
    case EdgeVerdictKind::kClean: return "clean";
  }
  return "clean";
}

void ImmuneConfig::validate(const ModelArch& arch, const TrainConfig& train) const {
  if (varrho < 2) throw ConfigError("varrho must be >= 2");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
  if (delta < 0) throw ConfigError("delta must be >= 1 (0 selects the checkpoint interval)");
  if (!(rho >= 0.0) || !std::isfinite(rho)) throw ConfigError("rho must be finite and >= 0 (0 calibrates)");
  if (!(rho_scale > 0.0) || !std::isfinite(rho_scale)) throw ConfigError("rho_scale must be > 0");
  if (!(rho_percentile >= 0.0 && rho_percentile <= 100.0)) throw ConfigError("rho_percentile must lie in [0, 100]");
  if (!(lambda_percentile >= 0.0 && lambda_percentile <= 100.0)) {
    throw ConfigError("lambda_percentile must lie in [0, 100]");
  }
  if (std::isinf(lambda_value) && lambda_value > 0) throw ConfigError("lambda_value must not be +inf");
  if (generator_count < 0) throw ConfigError("generator_count must be >= 0");
  if (probe_budget < 0) throw ConfigError("probe_budget must be >= 0");
  if (iteration_budget < 0) throw ConfigError("iteration_budget must be >= 0 (0 selects 3 * max_epochs)");
  if (max_probe_nodes < 0) throw ConfigError("max_probe_nodes must be >= 0");
  if (interface_layer < 0) throw ConfigError("interface_layer must be >= 0 (0 selects the penultimate layer)");
  arch.validate_interface_layer(effective_layer(arch));
  if (lambda_mode == LambdaMode::kComputedGcn && arch.kind != ArchKind::kGcn) {
    throw ConfigError("lambda_mode computed_gcn requires a GCN architecture; use empirical for " +
                      std::string(to_string(arch.kind)));
  }
  const bool can_fire = checkpoints && checkpoint_interval <= train.max_epochs;
  if ((can_fire || delta > 0) && train.snapshot_capacity < static_cast<std::size_t>(effective_delta()) + 1) {
    throw ConfigError("snapshot_capacity (" + std::to_string(train.snapshot_capacity) +
                      ") must be >= delta + 1 (" + std::to_string(effective_delta() + 1) + ")");
  }
  const auto& g = generator;
  if (g.hidden < 0 || g.epochs < 0 || g.batch < 1 || g.holdout < 1 || g.attempts_per_trajectory < 1) {
    throw ConfigError("generator sizes must be positive");
  }
  if (!(g.learning_rate > 0.0) || !(g.margin >= 0.0) || !(g.step_noise >= 0.0)) {
    throw ConfigError("generator learning_rate must be > 0, margin and step_noise >= 0");
  }
  if (!(g.init_scale_min > 0.0) || !(g.init_scale_max >= g.init_scale_min)) {
    throw ConfigError("generator init scales must satisfy 0 < min <= max");
  }
}

// ---------------------------------------------------------------------------
// Gamma bound

GammaBound gamma_bound_from_output(const Matrix& z_prev, const SparseMatrix& laplacian, const Matrix& output,
                                   const Matrix& labels, double eta) {
  const Eigen::Index n = laplacian.rows();
  if (laplacian.cols() != n || z_prev.rows() != n || output.rows() != n || labels.rows() != n ||
      labels.cols() != output.cols()) {
    throw ConfigError("gamma_bound: inconsistent shapes");
  }
  if (!std::isfinite(eta)) throw ConfigError("gamma_bound: eta must be finite");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (output.row(i).minCoeff() < -1e-12 || std::abs(output.row(i).sum() - 1.0) > 1e-9) {
      throw ConfigError("gamma_bound: output row " + std::to_string(i) + " is not a probability vector");
    }
  }
  const Matrix lz = laplacian * z_prev;
  const Matrix p = lz * (lz.transpose() * (output - labels));
  GammaBound b;
  b.lambda = eta * eta * (n > 0 ? p.rowwise().squaredNorm().maxCoeff() : 0.0);
  return b;
}

GammaBound gamma_bound(const Matrix& z_prev, const Matrix& w, const SparseMatrix& laplacian, const Matrix& labels,
                       double eta) {
  if (z_prev.cols() != w.rows() || w.cols() != labels.cols()) throw ConfigError("gamma_bound: inconsistent shapes");
  Matrix o = laplacian * (z_prev * w);
  for (Eigen::Index i = 0; i < o.rows(); ++i) {
    const double mx = o.row(i).maxCoeff();
    o.row(i) = (o.row(i).array() - mx).exp().matrix();
    o.row(i) /= o.row(i).sum();
  }
  return gamma_bound_from_output(z_prev, laplacian, o, labels, eta);
}

// ---------------------------------------------------------------------------
// Generator

TrajectoryGenerator TrajectoryGenerator::identity(Eigen::Index dim, int hidden, double scale) {
  TrajectoryGenerator g;
  g.dim_ = dim;
  g.scale_ = scale;
  g.w1_ = Matrix::Zero(hidden, dim);
  g.b1_ = Vector::Zero(hidden);
  g.w2_ = Matrix::Zero(dim, hidden);
  g.b2_ = Vector::Zero(dim);
  return g;
}

Vector TrajectoryGenerator::map(const Vector& v) const {
  if (v.size() != dim_) throw ConfigError("generator input has dimension " + std::to_string(v.size()) +
                                          ", expected " + std::to_string(dim_));
  if (w1_.rows() == 0) return v + b2_;
  const Vector h = (w1_ * v + b1_).array().tanh().matrix();
  return v + w2_ * h + b2_;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Vector noise_vector(std::mt19937_64& rng, Eigen::Index dim) {
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  Vector v(dim);
  for (Eigen::Index k = 0; k < dim; ++k) v(k) = nd(rng);
  return v;
}

struct Adam {
  Matrix m, v;
  void step(Matrix& p, const Matrix& g, double lr, int t) {
    if (m.size() == 0) {
      m = Matrix::Zero(p.rows(), p.cols());
      v = Matrix::Zero(p.rows(), p.cols());
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

}  // namespace

double constraint_satisfaction(const TrajectoryGenerator& gen, double lambda, int samples, std::uint64_t seed) {
  if (samples <= 0) return 1.0;
  std::mt19937_64 rng(seed);
  int ok = 0;
  for (int s = 0; s < samples; ++s) {
    const Vector v = gen.scale() * noise_vector(rng, gen.dim());
    if (gen.apply(v).dot(v) >= lambda) ++ok;
  }
  return static_cast<double>(ok) / samples;
}

TrajectoryGenerator train_generator(const Matrix& pool, double lambda, std::uint64_t seed,
                                    const GeneratorConfig& cfg, GeneratorReport* report) {
  if (std::isnan(lambda)) throw ConfigError("train_generator: lambda is NaN");
  const Eigen::Index d = pool.cols();
  if (d < 1) throw ConfigError("train_generator: direction dimension must be >= 1");
  double scale = 1.0;
  if (pool.rows() > 0) {
    const double ms = pool.rowwise().squaredNorm().mean();
    if (ms > 0.0 && std::isfinite(ms)) scale = std::sqrt(ms);
  }
  std::mt19937_64 rng(seed);
  TrajectoryGenerator g = TrajectoryGenerator::identity(d, cfg.hidden, scale);
  {
    std::normal_distribution<double> nd(0.0, 0.1 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(d, 1))));
    for (Eigen::Index i = 0; i < g.w1_.size(); ++i) g.w1_.data()[i] = nd(rng);
    for (Eigen::Index i = 0; i < g.w2_.size(); ++i) g.w2_.data()[i] = 0.1 * nd(rng);
  }
  const double lam_std = lambda / (scale * scale);
  const double target = std::min(sigmoid(lam_std) + cfg.margin, 1.0 - 1e-6);
  Adam a_w1, a_b1, a_w2, a_b2;
  double loss = 0.0;
  const bool constrained = std::isfinite(lam_std);
  for (int epoch = 1; constrained && epoch <= cfg.epochs; ++epoch) {
    Matrix gw1 = Matrix::Zero(g.w1_.rows(), g.w1_.cols());
    Matrix gw2 = Matrix::Zero(g.w2_.rows(), g.w2_.cols());
    Vector gb1 = Vector::Zero(g.b1_.size());
    Vector gb2 = Vector::Zero(g.b2_.size());
    loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Vector v = noise_vector(rng, d);
      const Vector h = (g.w1_ * v + g.b1_).array().tanh().matrix();
      const Vector out = v + g.w2_ * h + g.b2_;
      const double s = out.dot(v);
      const double sg = sigmoid(s);
      const double r = target - sg;
      if (r <= 0.0) continue;
      loss += r * r;
      const double ds = -2.0 * r * sg * (1.0 - sg);
      const Vector go = ds * v;
      gw2 += go * h.transpose();
      gb2 += go;
      const Vector dz = (g.w2_.transpose() * go).cwiseProduct((1.0 - h.array().square()).matrix());
      gw1 += dz * v.transpose();
      gb1 += dz;
    }
    const double inv = 1.0 / cfg.batch;
    loss *= inv;
    if (!std::isfinite(loss) || !gw1.allFinite() || !gw2.allFinite()) {
      throw RuntimeFailure("generator training diverged at epoch " + std::to_string(epoch) +
                           " (seed " + std::to_string(seed) + ", lambda " + std::to_string(lambda) + ")");
    }
    Matrix gb1m = gb1 * inv, gb2m = gb2 * inv;
    Matrix b1m = g.b1_, b2m = g.b2_;
    a_w1.step(g.w1_, gw1 * inv, cfg.learning_rate, epoch);
    a_w2.step(g.w2_, gw2 * inv, cfg.learning_rate, epoch);
    a_b1.step(b1m, gb1m, cfg.learning_rate, epoch);
    a_b2.step(b2m, gb2m, cfg.learning_rate, epoch);
    g.b1_ = b1m;
    g.b2_ = b2m;
  }
  if (report) {
    report->lambda = lambda;
    report->lambda_standard = lam_std;
    report->final_loss = loss;
    report->satisfaction_rate = constraint_satisfaction(g, lambda, cfg.holdout, mix(seed, 0x5a715fULL));
  }
  return g;
}

FeasibleSet generate_feasible_fts(const TrajectoryGenerator& gen, const Matrix& inits, int varrho, int count,
                                  double lambda, std::uint64_t seed, const TrajectoryNormalizer& normalizer,
                                  const GeneratorConfig& cfg) {
  if (varrho < 2) throw ConfigError("feasible trajectories need varrho >= 2");
  if (count < 0) throw ConfigError("count must be >= 0");
  FeasibleSet out;
  if (count == 0) return out;
  if (inits.rows() == 0 || inits.cols() != gen.dim()) {
    throw ConfigError("initial directions must be nonempty with the generator's dimension");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> log_scale(std::log(cfg.init_scale_min), std::log(cfg.init_scale_max));
  const std::size_t budget = static_cast<std::size_t>(count) * static_cast<std::size_t>(cfg.attempts_per_trajectory);
  const double sigma = gen.scale();
  const Eigen::Index d = gen.dim();
  Matrix chain(varrho, d);
  while (out.chains.size() < static_cast<std::size_t>(count)) {
    if (out.attempts >= budget) {
      throw RuntimeFailure("feasible-trajectory rejection rate exceeded 99% (" + std::to_string(out.chains.size()) +
                           " of " + std::to_string(count) + " after " + std::to_string(out.attempts) +
                           " attempts); recalibrate lambda");
    }
    const auto row = static_cast<Eigen::Index>(out.attempts % static_cast<std::size_t>(inits.rows()));
    ++out.attempts;
    const double s = inits.rows() > 1 || cfg.init_scale_max > cfg.init_scale_min ? std::exp(log_scale(rng)) : 1.0;
    Vector v = s * inits.row(row).transpose();
    if (cfg.step_noise > 0.0) v += cfg.step_noise * sigma * noise_vector(rng, d);
    chain.row(0) = v.transpose();
    bool ok = true;
    for (int k = 1; k < varrho && ok; ++k) {
      Vector in = chain.row(k - 1).transpose();
      if (cfg.step_noise > 0.0) in += cfg.step_noise * sigma * noise_vector(rng, d);
      const Vector next = gen.apply(in);
      if (!next.allFinite()) throw RuntimeFailure("generator produced a non-finite direction");
      chain.row(k) = next.transpose();
      ok = chain.row(k - 1).dot(chain.row(k)) >= lambda;
    }
    if (!ok) continue;
    Matrix traj(varrho, d);
    traj.row(0) = chain.row(0);
    for (int k = 1; k < varrho; ++k) traj.row(k) = traj.row(k - 1) + chain.row(k);
    out.normalized.push_back(normalizer.apply(align_trajectory(traj)));
    out.trajectories.push_back(std::move(traj));
    out.chains.push_back(chain);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Negative selection and detection

DetectorSet produce_detectors(std::span<const NormalizedTrajectory> feasible,
                              std::span<const NormalizedTrajectory> reliable, double rho) {
  if (reliable.empty()) throw ConfigError("negative selection needs a nonempty reliable set");
  const Eigen::Index len = reliable.front().length(), dim = reliable.front().dim();
  for (const auto& r : reliable) {
    if (r.length() != len || r.dim() != dim) throw ConfigError("reliable trajectories must share shape");
  }
  DetectorSet set;
  set.rho = rho;
  set.length = len;
  set.dim = dim;
  for (const auto& f : feasible) {
    if (f.length() != len || f.dim() != dim) {
      throw ConfigError("feasible trajectory shape " + std::to_string(f.length()) + "x" + std::to_string(f.dim()) +
                        " differs from reliable " + std::to_string(len) + "x" + std::to_string(dim));
    }
    if (min_mse(f, reliable) > rho) set.detectors.push_back(f);
  }
  return set;
}

Verdict detect_abnormal(const NormalizedTrajectory& probe, const DetectorSet& detectors, DetectionRule rule) {
  Verdict v;
  if (detectors.empty()) return v;
  if (rule == DetectionRule::kMin) {
    v.score = min_mse(probe, detectors.detectors);
  } else {
    double acc = 0.0;
    for (const auto& d : detectors.detectors) acc += trajectory_mse(probe, d);
    v.score = acc / static_cast<double>(detectors.size());
  }
  v.abnormal = v.score <= detectors.rho;
  return v;
}

std::vector<EdgeVerdict> classify_inserted(const GraphData& g, std::span<const Verdict> node_verdicts,
                                           const EdgeVerdictMap& edge_verdicts) {
  if (node_verdicts.size() != static_cast<std::size_t>(g.num_nodes())) {
    throw ConfigError("classify_inserted needs one node verdict per node");
  }
  std::map<Edge, EdgeVerdict> flagged;
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    const auto& nv = node_verdicts[static_cast<std::size_t>(i)];
    if (!nv.abnormal) continue;
    for (NodeId k : g.neighbors(i)) {
      const Edge e = make_edge(i, k);
      if (g.is_reliable_edge(e)) continue;
      const auto it = edge_verdicts.find({i, k});
      if (it == edge_verdicts.end() || !it->second.abnormal) continue;
      auto [pos, fresh] = flagged.try_emplace(e);
      auto& ev = pos->second;
      if (fresh) {
        ev.edge = e;
        ev.verdict = EdgeVerdictKind::kInserted;
      }
      ev.evidence.abnormal_nodes.push_back(i);
      ev.evidence.node_score = std::min(ev.evidence.node_score, nv.score);
      ev.evidence.edge_score = std::min(ev.evidence.edge_score, it->second.score);
    }
  }
  std::vector<EdgeVerdict> out;
  out.reserve(flagged.size());
  for (auto& [e, v] : flagged) out.push_back(std::move(v));
  return out;
}

std::vector<Edge> deleted_candidates(const GraphData& g, NodeId node, int budget) {
  if (node < 0 || node >= g.num_nodes()) throw ConfigError("node id out of range");
  if (budget <= 0) return {};
  std::set<NodeId> two_hop;
  for (NodeId a : g.neighbors(node)) {
    for (NodeId b : g.neighbors(a)) {
      if (b != node && !g.has_edge(node, b) && !g.is_reliable_edge(make_edge(node, b))) two_hop.insert(b);
    }
  }
  const auto& x = g.features();
  const double nx = x.row(node).norm();
  std::vector<std::pair<double, NodeId>> ranked;
  for (NodeId b : two_hop) {
    const double denom = nx * x.row(b).norm();
    const double cos = denom > 0.0 ? x.row(node).dot(x.row(b)) / denom : 0.0;
    ranked.emplace_back(-cos, b);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<Edge> out;
  for (const auto& [negcos, b] : ranked) {
    if (static_cast<int>(out.size()) >= budget) break;
    out.push_back(make_edge(node, b));
  }
  return out;
}

std::optional<EdgeVerdict> classify_deleted(NodeId node, std::span<const Edge> candidates, int probe_budget,
                                            const ProbeFn& probe) {
  const auto n = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(std::max(probe_budget, 0)));
  for (std::size_t c = 0; c < n; ++c) {
    const auto outcome = probe(candidates[c]);
    if (!outcome.edge.abnormal && !outcome.node.abnormal) {
      EdgeVerdict v;
      v.edge = candidates[c];
      v.verdict = EdgeVerdictKind::kDeleted;
      v.evidence.abnormal_nodes = {node};
      v.evidence.node_score = outcome.node.score;
      v.evidence.edge_score = outcome.edge.score;
      return v;
    }
  }
  return std::nullopt;
}

RectifyResult rectify(const GraphData& g, std::span<const EdgeVerdict> verdicts, ModelState& state, int delta) {
  std::map<Edge, EdgeVerdictKind> plan;
  for (const auto& v : verdicts) {
    if (v.verdict == EdgeVerdictKind::kClean) continue;
    const Edge e = make_edge(v.edge.u, v.edge.v);
    const auto [it, fresh] = plan.emplace(e, v.verdict);
    if (!fresh) {
      throw ConfigError("conflicting verdicts on edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) + ")");
    }
    if (v.verdict == EdgeVerdictKind::kInserted && !g.has_edge(e)) {
      throw ConfigError("inserted verdict on missing edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) + ")");
    }
    if (v.verdict == EdgeVerdictKind::kDeleted && g.has_edge(e)) {
      throw ConfigError("deleted verdict on existing edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) + ")");
    }
  }
  RectifyResult out{g, {}, 0, 0};
  if (plan.empty()) return out;
  std::vector<Edge> edges;
  edges.reserve(g.num_edges() + plan.size());
  for (const auto& e : g.edges()) {
    const auto it = plan.find(e);
    if (it != plan.end()) {
      ++out.removed;
      continue;
    }
    edges.push_back(e);
  }
  for (const auto& [e, kind] : plan) {
    if (kind == EdgeVerdictKind::kDeleted) {
      edges.push_back(e);
      ++out.added;
    }
  }
  out.graph = g.with_edges(std::move(edges));
  out.rollback = rollback(state, delta);
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct KindData {
  std::vector<Matrix> raw;                        // reliable trajectories
  std::vector<long long> group;                   // entities sharing a group are not paired for rho
  std::vector<NormalizedTrajectory> normalized;
  TrajectoryNormalizer normalizer;
  Matrix pool;                                    // direction vectors
  std::vector<double> inner;                      // consecutive inner products
};

void finish_kind(KindData& k, Eigen::Index dim) {
  std::vector<NormalizedTrajectory> aligned;
  aligned.reserve(k.raw.size());
  std::size_t dirs = 0;
  for (const auto& r : k.raw) {
    aligned.push_back(align_trajectory(r));
    dirs += static_cast<std::size_t>(r.rows() - 1);
  }
  k.normalizer = TrajectoryNormalizer::fit(aligned);
  k.normalized.clear();
  for (auto& a : aligned) k.normalized.push_back(k.normalizer.apply(std::move(a)));
  k.pool.resize(static_cast<Eigen::Index>(dirs), dim);
  Eigen::Index row = 0;
  for (const auto& r : k.raw) {
    for (Eigen::Index t = 1; t < r.rows(); ++t) k.pool.row(row++) = r.row(t) - r.row(t - 1);
    for (Eigen::Index t = 2; t < r.rows(); ++t) {
      k.inner.push_back((r.row(t - 1) - r.row(t - 2)).dot(r.row(t) - r.row(t - 1)));
    }
  }
}

double calibrate_rho(const KindData& k, double percentile_p) {
  std::vector<double> mses;
  const std::size_t n = k.normalized.size();
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      if (k.group[a] == k.group[b]) continue;
      mses.push_back(trajectory_mse(k.normalized[a], k.normalized[b]));
    }
  }
  if (mses.empty()) throw RuntimeFailure("too few reliable trajectories to calibrate rho");
  return percentile(mses, percentile_p);
}

// Non-zero pool rows only; zero directions make useless chain seeds.
Matrix nonzero_rows(const Matrix& pool) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < pool.rows(); ++r) {
    if (pool.row(r).squaredNorm() > 0.0) keep.push_back(r);
  }
  Matrix out(static_cast<Eigen::Index>(keep.size()), pool.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = pool.row(keep[i]);
  return out;
}

struct Exogenous {
  std::optional<Propagation> prop;
  std::optional<ModelState> state;
  std::optional<TrajectoryRecorder> recorder;
};

}  // namespace

ModelState train_plain(const GraphData& g, const ModelArch& arch, const TrainConfig& train) {
  const Propagation prop(g, arch);
  ModelState state = init_model(arch, train.seed, train.snapshot_capacity);
  for (int it = 0; it < train.max_epochs; ++it) train_epoch(prop, state, train);
  return state;
}

PipelineResult run_pipeline(const GraphData& g, const ModelArch& arch, const TrainConfig& train,
                            const ImmuneConfig& immune, const PipelineInputs& inputs) {
  using Clock = std::chrono::steady_clock;
  arch.validate();
  immune.validate(arch, train);
  const int layer = immune.effective_layer(arch);
  const bool imported = inputs.node_detectors && inputs.edge_detectors;
  if (immune.checkpoints && immune.reliable_source == ReliableSource::kSubgraph && g.num_reliable_nodes() == 0) {
    throw ConfigError("subgraph reliable source needs a nonempty reliable mask");
  }
  if (immune.checkpoints && immune.reliable_source == ReliableSource::kExogenous) {
    if (!inputs.exogenous) throw ConfigError("exogenous reliable source needs an exogenous graph");
    if (inputs.exogenous->feature_dim() != g.feature_dim() || inputs.exogenous->num_classes() != g.num_classes()) {
      throw ConfigError("exogenous graph must match feature dimension and class count");
    }
  }
  const auto dim = arch.layer_dims[static_cast<std::size_t>(layer)];
  if (imported) {
    check_compatible(*inputs.node_detectors, layer, immune.varrho, dim);
    check_compatible(*inputs.edge_detectors, layer, immune.varrho, dim);
  }

  PipelineResult res{g, init_model(arch, train.seed, train.snapshot_capacity), {}, {}, {}, 0, {}, {}, 0.0, 0.0};
  auto prop = std::make_unique<Propagation>(g, arch);
  const bool record = immune.monitor || immune.checkpoints;
  const auto history = static_cast<std::size_t>(immune.varrho);
  std::optional<TrajectoryRecorder> recorder;
  if (record) recorder.emplace(*prop, layer, history);
  Exogenous exo;
  std::map<Edge, int> flips;
  const int probe_epochs = std::max(immune.checkpoint_interval, immune.varrho);

  const int budget = immune.effective_iteration_budget(train);
  for (int it = 0; it < budget && res.state.epoch < train.max_epochs; ++it) {
    EpochRecord er;
    er.iteration = it;
    er.epoch = res.state.epoch;
    auto t0 = Clock::now();
    EpochResult step = train_epoch(*prop, res.state, train);
    er.train_seconds = seconds_since(t0);
    er.loss = step.loss;
    const Matrix& probs = step.forward.probabilities();
    er.train_acc = accuracy(res.graph, probs, res.graph.train_mask());
    er.val_acc = accuracy(res.graph, probs, res.graph.val_mask());
    er.test_acc = accuracy(res.graph, probs, res.graph.test_mask());
    t0 = Clock::now();
    if (recorder) recorder->record_epoch(er.epoch, step.forward);
    er.defense_seconds = seconds_since(t0);

    // A checkpoint may roll back; it only fires while the remaining budget
    // still allows training to reach max_epochs afterwards.
    const bool affordable =
        it + 1 + (train.max_epochs - res.state.epoch) + immune.effective_delta() <= budget;
    const bool due = immune.checkpoints && affordable && (it + 1) % immune.checkpoint_interval == 0 &&
                     recorder && recorder->length() >= history;
    if (due) {
      const auto tc = Clock::now();
      CheckpointRecord cp;
      cp.iteration = it;
      cp.epoch = res.state.epoch;
      const std::uint64_t cseed = mix(immune.seed, static_cast<std::uint64_t>(it) + 1);
      try {
        // Collect reliable trajectories.
        KindData nodes, edges;
        std::vector<double> computed_inner;
        if (immune.reliable_source == ReliableSource::kSubgraph) {
          for (NodeId i = 0; i < res.graph.num_nodes(); ++i) {
            if (!res.graph.reliable_mask()[static_cast<std::size_t>(i)]) continue;
            nodes.raw.push_back(recorder->node_trajectory(i).points);
            nodes.group.push_back(i);
          }
          for (std::size_t s = 0; s < recorder->num_edge_slots(); ++s) {
            const auto ent = recorder->slot_entity(s);
            if (!res.graph.is_reliable_edge(ent.undirected())) continue;
            edges.raw.push_back(recorder->slot_trajectory(s).points);
            edges.group.push_back(static_cast<long long>(s / 2));
          }
        } else {
          if (!exo.prop) {
            exo.prop.emplace(*inputs.exogenous, arch);
            exo.state.emplace(init_model(arch, train.seed + 1, train.snapshot_capacity));
            exo.recorder.emplace(*exo.prop, layer, history);
          }
          const int epochs = exo.recorder->length() >= history ? immune.checkpoint_interval : probe_epochs;
          for (int e = 0; e < epochs; ++e) {
            const int ep = exo.state->epoch;
            auto r = train_epoch(*exo.prop, *exo.state, train);
            exo.recorder->record_epoch(ep, r.forward);
          }
          for (NodeId i = 0; i < inputs.exogenous->num_nodes(); ++i) {
            nodes.raw.push_back(exo.recorder->node_trajectory(i).points);
            nodes.group.push_back(i);
          }
          for (std::size_t s = 0; s < exo.recorder->num_edge_slots(); ++s) {
            edges.raw.push_back(exo.recorder->slot_trajectory(s).points);
            edges.group.push_back(static_cast<long long>(s / 2));
          }
        }
        if (nodes.raw.empty() || edges.raw.empty()) {
          throw RuntimeFailure("reliable region yields no node or edge trajectories");
        }
        finish_kind(nodes, dim);
        finish_kind(edges, dim);
        cp.collect_seconds = seconds_since(tc);
        auto tp = Clock::now();
        cp.reliable_nodes = nodes.raw.size();
        cp.reliable_edges = edges.raw.size();

        // Lambda diagnostics on the output layer of a GCN.
        if (arch.kind == ArchKind::kGcn) {
          const int last = arch.num_layers();
          const auto gb = gamma_bound_from_output(step.forward.outputs[static_cast<std::size_t>(last - 1)],
                                                  prop->laplacian(), step.forward.probabilities(),
                                                  res.graph.labels(), train.learning_rate);
          cp.lambda_computed = gb.lambda;
          if (!nodes.inner.empty()) {
            const auto below = std::count_if(nodes.inner.begin(), nodes.inner.end(),
                                             [&](double x) { return x < gb.lambda; });
            cp.lambda_violation_rate = static_cast<double>(below) / static_cast<double>(nodes.inner.size());
          }
        }

        DetectorSet node_set, edge_set;
        if (imported) {
          node_set = *inputs.node_detectors;
          edge_set = *inputs.edge_detectors;
          cp.rho_node = node_set.rho;
          cp.rho_edge = edge_set.rho;
        } else {
          auto produce = [&](KindData& k, EntityKind kind, std::uint64_t salt, double& rho_out,
                             double& lambda_out) {
            double rho = immune.rho > 0.0 ? immune.rho : calibrate_rho(k, immune.rho_percentile);
            rho *= immune.rho_scale;
            double lambda = 0.0;
            if (immune.lambda_mode == LambdaMode::kComputedGcn) {
              lambda = cp.lambda_computed;
            } else if (!std::isnan(immune.lambda_value)) {
              lambda = immune.lambda_value;
            } else {
              if (k.inner.empty()) throw RuntimeFailure("no reliable inner products to calibrate lambda");
              auto inner = k.inner;
              lambda = percentile(inner, immune.lambda_percentile);
            }
            rho_out = rho;
            lambda_out = lambda;
            GeneratorReport rep;
            const auto gen = train_generator(k.pool, lambda, mix(cseed, salt), immune.generator, &rep);
            cp.generator_satisfaction = std::min(cp.generator_satisfaction, rep.satisfaction_rate);
            Matrix inits = nonzero_rows(k.pool);
            if (inits.rows() == 0) inits = Matrix::Constant(1, dim, gen.scale() / std::sqrt(static_cast<double>(dim)));
            const auto feasible = generate_feasible_fts(gen, inits, immune.varrho, immune.generator_count, lambda,
                                                        mix(cseed, salt + 1), k.normalizer, immune.generator);
            auto set = produce_detectors(feasible.normalized, k.normalized, rho);
            set.kind = kind;
            set.layer = layer;
            set.provenance = {std::string(to_string(arch.kind)), train.learning_rate, inputs.tag, res.state.epoch};
            return set;
          };
          node_set = produce(nodes, EntityKind::kNode, 11, cp.rho_node, cp.lambda_node);
          edge_set = produce(edges, EntityKind::kEdge, 23, cp.rho_edge, cp.lambda_edge);
          res.node_detectors = node_set;
          res.edge_detectors = edge_set;
        }
        cp.node_detectors = node_set.size();
        cp.edge_detectors = edge_set.size();
        cp.produce_seconds = seconds_since(tp);
        tp = Clock::now();

        // Probes are normalized with the local reliable scale.
        std::vector<Verdict> node_verdicts(static_cast<std::size_t>(res.graph.num_nodes()));
        for (NodeId i = 0; i < res.graph.num_nodes(); ++i) {
          if (res.graph.reliable_mask()[static_cast<std::size_t>(i)]) continue;
          const auto p = nodes.normalizer.apply(align_trajectory(recorder->node_trajectory(i).points));
          node_verdicts[static_cast<std::size_t>(i)] = detect_abnormal(p, node_set, immune.rule);
          if (node_verdicts[static_cast<std::size_t>(i)].abnormal) ++cp.abnormal_nodes;
        }
        EdgeVerdictMap edge_verdicts;
        for (std::size_t s = 0; s < recorder->num_edge_slots(); ++s) {
          const auto ent = recorder->slot_entity(s);
          if (res.graph.is_reliable_edge(ent.undirected())) continue;
          if (!node_verdicts[static_cast<std::size_t>(ent.target)].abnormal) continue;
          const auto p = edges.normalizer.apply(align_trajectory(recorder->slot_trajectory(s).points));
          const auto v = detect_abnormal(p, edge_set, immune.rule);
          if (v.abnormal) ++cp.abnormal_edges;
          edge_verdicts[{ent.target, ent.source}] = v;
        }
        cp.verdicts = classify_inserted(res.graph, node_verdicts, edge_verdicts);
        cp.detect_seconds = seconds_since(tp);
        tp = Clock::now();

        if (immune.detect_deleted && immune.probe_budget > 0 && immune.max_probe_nodes > 0) {
          std::set<NodeId> covered;
          for (const auto& v : cp.verdicts) covered.insert(v.evidence.abnormal_nodes.begin(), v.evidence.abnormal_nodes.end());
          std::vector<std::pair<double, NodeId>> pending;
          for (NodeId i = 0; i < res.graph.num_nodes(); ++i) {
            const auto& nv = node_verdicts[static_cast<std::size_t>(i)];
            if (nv.abnormal && !covered.count(i)) pending.emplace_back(nv.score, i);
          }
          std::sort(pending.begin(), pending.end());
          if (pending.size() > static_cast<std::size_t>(immune.max_probe_nodes)) {
            pending.resize(static_cast<std::size_t>(immune.max_probe_nodes));
          }
          std::set<Edge> claimed;
          for (const auto& v : cp.verdicts) claimed.insert(v.edge);
          // Continuation on the unchanged graph, shared by every pending node.
          std::optional<TrajectoryRecorder> baseline;
          for (const auto& [score, i] : pending) {
            auto cands = deleted_candidates(res.graph, i, immune.probe_budget);
            std::erase_if(cands, [&](const Edge& e) { return claimed.count(e) > 0; });
            if (cands.empty()) continue;
            const NodeId node = i;
            // Continues training for probe_epochs on the graph plus `cand`
            // (or unchanged when cand is null) from a copy of the state.
            auto continuation = [&](const Edge* cand) {
              ++cp.probes;
              std::vector<Edge> plus = res.graph.edges();
              if (cand) plus.push_back(*cand);
              const Propagation pp(res.graph.with_edges(std::move(plus)), arch);
              ModelState trial{res.state.weights, res.state.epoch, SnapshotRing(1)};
              TrajectoryRecorder rec(pp, layer, history);
              for (int e = 0; e < probe_epochs; ++e) {
                const int ep = trial.epoch;
                auto r = train_epoch(pp, trial, train);
                rec.record_epoch(ep, r.forward);
              }
              return rec;
            };
            auto run_probe = [&](const Edge* cand) {
              auto rec = continuation(cand);
              ProbeOutcome o;
              if (cand) {
                o.edge = detect_abnormal(
                    edges.normalizer.apply(align_trajectory(rec.edge_trajectory(node, cand->other(node)).points)),
                    edge_set, immune.rule);
              }
              o.node = detect_abnormal(nodes.normalizer.apply(align_trajectory(rec.node_trajectory(node).points)),
                                       node_set, immune.rule);
              return o;
            };
            // A candidate can only render the node normal if the node stays
            // abnormal when training continues without it.
            if (!baseline) baseline.emplace(continuation(nullptr));
            const auto base = detect_abnormal(
                nodes.normalizer.apply(align_trajectory(baseline->node_trajectory(node).points)), node_set, immune.rule);
            if (!base.abnormal) continue;
            const ProbeFn probe = [&](const Edge& cand) { return run_probe(&cand); };
            if (auto v = classify_deleted(node, cands, immune.probe_budget, probe)) {
              claimed.insert(v->edge);
              cp.verdicts.push_back(std::move(*v));
            }
          }
        }

        cp.probe_seconds = seconds_since(tp);
        tp = Clock::now();
        if (!cp.verdicts.empty()) {
          auto rect = rectify(res.graph, cp.verdicts, res.state, immune.effective_delta());
          cp.rewound = rect.rollback.rewound;
          res.graph = std::move(rect.graph);
          prop = std::make_unique<Propagation>(res.graph, arch);
          recorder->rebind(*prop);
          for (const auto& v : cp.verdicts) {
            if (++flips[v.edge] > 1) ++res.repeat_flips;
            res.verdicts.push_back(v);
          }
        }
        cp.rectify_seconds = seconds_since(tp);
      } catch (const std::exception& ex) {
        cp.ok = false;
        cp.error = ex.what();
        cp.verdicts.clear();
      }
      cp.seconds = seconds_since(tc);
      er.defense_seconds += cp.seconds;
      res.checkpoints.push_back(std::move(cp));
      if (inputs.on_checkpoint) inputs.on_checkpoint(res.checkpoints.back());
    }
    res.train_seconds += er.train_seconds;
    res.defense_seconds += er.defense_seconds;
    res.epochs.push_back(er);
    if (inputs.on_epoch) inputs.on_epoch(er);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Detector transfer

void check_compatible(const DetectorSet& set, int layer, Eigen::Index length, Eigen::Index dim) {
  auto mismatch = [](const char* what, long long expected, long long found) {
    return ConfigError(std::string("detector ") + what + " mismatch: expected " + std::to_string(expected) +
                       ", found " + std::to_string(found));
  };
  if (set.dim != dim) throw mismatch("dim", dim, set.dim);
  if (set.length != length) throw mismatch("length", length, set.length);
  if (set.layer != layer) throw mismatch("layer", layer, set.layer);
}

void write_detectors(std::ostream& out, std::span<const DetectorSet> sets) {
  out << "grimm-detectors 1\n";
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& s : sets) {
    if (s.provenance.tag.find_first_of(" \t\n\r") != std::string::npos) {
      throw ConfigError("detector tag must not contain whitespace");
    }
    out << "set kind=" << (s.kind == EntityKind::kNode ? "node" : "edge") << " arch=" << s.provenance.arch
        << " layer=" << s.layer << " length=" << s.length << " dim=" << s.dim << " rho=" << s.rho
        << " eta=" << s.provenance.eta << " tag=" << s.provenance.tag << " epoch=" << s.provenance.epoch
        << " count=" << s.size() << '\n';
    for (const auto& d : s.detectors) {
      if (d.length() != s.length || d.dim() != s.dim) throw ConfigError("detector shape differs from its set");
      const char* sep = "";
      for (Eigen::Index r = 0; r < d.points.rows(); ++r) {
        for (Eigen::Index c = 0; c < d.points.cols(); ++c) {
          out << sep << d.points(r, c);
          sep = " ";
        }
      }
      out << '\n';
    }
  }
}

std::vector<DetectorSet> read_detectors(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError(source, 1, "empty detector file");
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version) || magic != "grimm-detectors") {
      throw ParseError(source, 1, "missing 'grimm-detectors <version>' header");
    }
    if (version != 1) throw ParseError(source, 1, "unsupported detector format version " + std::to_string(version));
  }
  std::vector<DetectorSet> sets;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word != "set") throw ParseError(source, lineno, "expected a 'set' record");
    std::map<std::string, std::string> kv;
    while (ls >> word) {
      const auto eq = word.find('=');
      if (eq == std::string::npos) throw ParseError(source, lineno, "malformed field '" + word + "'");
      kv[word.substr(0, eq)] = word.substr(eq + 1);
    }
    auto field = [&](const char* key) -> const std::string& {
      const auto it = kv.find(key);
      if (it == kv.end()) throw ParseError(source, lineno, std::string("missing field '") + key + "'");
      return it->second;
    };
    auto integer = [&](const char* key) {
      try {
        std::size_t pos = 0;
        const long long v = std::stoll(field(key), &pos);
        if (pos != field(key).size() || v < 0) throw std::invalid_argument(key);
        return v;
      } catch (const std::logic_error&) {
        throw ParseError(source, lineno, std::string("field '") + key + "' is not a non-negative integer");
      }
    };
    auto real = [&](const char* key) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(field(key), &pos);
        if (pos != field(key).size() || !std::isfinite(v)) throw std::invalid_argument(key);
        return v;
      } catch (const std::logic_error&) {
        throw ParseError(source, lineno, std::string("field '") + key + "' is not a finite real");
      }
    };
    DetectorSet s;
    const auto& kind = field("kind");
    if (kind == "node") {
      s.kind = EntityKind::kNode;
    } else if (kind == "edge") {
      s.kind = EntityKind::kEdge;
    } else {
      throw ParseError(source, lineno, "kind must be node or edge");
    }
    s.provenance.arch = field("arch");
    parse_arch_kind(s.provenance.arch);
    s.layer = static_cast<int>(integer("layer"));
    s.length = integer("length");
    s.dim = integer("dim");
    s.rho = real("rho");
    s.provenance.eta = real("eta");
    s.provenance.tag = field("tag");
    s.provenance.epoch = static_cast<int>(integer("epoch"));
    const long long count = integer("count");
    if (s.length < 2 || s.dim < 1) throw ParseError(source, lineno, "length must be >= 2 and dim >= 1");
    for (long long k = 0; k < count; ++k) {
      if (!std::getline(in, line)) throw ParseError(source, lineno, "truncated detector set");
      ++lineno;
      std::istringstream ds(line);
      NormalizedTrajectory d;
      d.points.resize(s.length, s.dim);
      for (Eigen::Index r = 0; r < s.length; ++r) {
        for (Eigen::Index c = 0; c < s.dim; ++c) {
          std::string tok;
          if (!(ds >> tok)) throw ParseError(source, lineno, "expected " + std::to_string(s.length * s.dim) + " values");
          try {
            std::size_t pos = 0;
            d.points(r, c) = std::stod(tok, &pos);
            if (pos != tok.size() || !std::isfinite(d.points(r, c))) throw std::invalid_argument(tok);
          } catch (const std::logic_error&) {
            throw ParseError(source, lineno, "invalid value '" + tok + "'");
          }
        }
      }
      std::string extra;
      if (ds >> extra) throw ParseError(source, lineno, "too many values in detector record");
      d.scale = 1.0;
      s.detectors.push_back(std::move(d));
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

}  // namespace grimm
