// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grimm/graph.hpp"
#include "grimm/model.hpp"
#include "grimm/trajectory.hpp"

namespace grimm {

enum class LambdaMode { kComputedGcn, kEmpirical };
enum class DetectionRule { kMin, kMean };
enum class ReliableSource { kSubgraph, kExogenous };

std::string_view to_string(LambdaMode m);
LambdaMode parse_lambda_mode(std::string_view s);
std::string_view to_string(DetectionRule r);
DetectionRule parse_detection_rule(std::string_view s);
std::string_view to_string(ReliableSource r);
ReliableSource parse_reliable_source(std::string_view s);

struct GeneratorConfig {
  int hidden = 32;
  int epochs = 200;
  int batch = 128;
  double learning_rate = 0.01;
  /// Margin added to sigmoid(lambda) in the hinge loss.
  double margin = 0.02;
  /// Std of the noise added to each chain step, in units of the pool scale.
  double step_noise = 0.5;
  /// Feasible-FT initial directions are pool samples scaled log-uniformly
  /// within [init_scale_min, init_scale_max].
  double init_scale_min = 0.25;
  double init_scale_max = 8.0;
  /// Attempts per requested trajectory before giving up.
  int attempts_per_trajectory = 100;
  int holdout = 1000;
};

struct ImmuneConfig {
  /// MSE threshold; <= 0 calibrates it per checkpoint from the reliable set.
  double rho = 0.0;
  double rho_percentile = 50.0;
  /// Multiplier applied to rho (calibrated or fixed); used by sweeps.
  double rho_scale = 1.0;
  int varrho = 10;
  /// Rollback depth; 0 means one checkpoint interval.
  int delta = 0;
  int checkpoint_interval = 10;
  /// Interface layer; 0 means the penultimate layer.
  int interface_layer = 0;
  int generator_count = 1000;
  LambdaMode lambda_mode = LambdaMode::kEmpirical;
  /// Fixed empirical constant; NaN uses lambda_percentile of the observed
  /// reliable consecutive inner products.
  double lambda_value = std::numeric_limits<double>::quiet_NaN();
  double lambda_percentile = 5.0;
  DetectionRule rule = DetectionRule::kMin;
  int probe_budget = 10;
  /// Abnormal nodes probed for deleted edges per checkpoint.
  int max_probe_nodes = 3;
  bool detect_deleted = true;
  /// Master switch for checkpoints. Trajectories are still recorded when
  /// `monitor` is set.
  bool checkpoints = true;
  bool monitor = true;
  ReliableSource reliable_source = ReliableSource::kSubgraph;
  /// Training stops once the model reaches train.max_epochs or after this
  /// many iterations (rolled-back epochs are retrained); 0 means
  /// 3 * max_epochs.
  int iteration_budget = 0;
  std::uint64_t seed = 0;
  GeneratorConfig generator;

  int effective_iteration_budget(const TrainConfig& train) const {
    return iteration_budget > 0 ? iteration_budget : 3 * train.max_epochs;
  }
  int effective_delta() const { return delta > 0 ? delta : checkpoint_interval; }
  int effective_layer(const ModelArch& arch) const {
    return interface_layer > 0 ? interface_layer : arch.penultimate_layer();
  }
  /// Throws ConfigError on out-of-range values or a snapshot ring too small
  /// for the rollback depth.
  void validate(const ModelArch& arch, const TrainConfig& train) const;
};

struct GammaBound {
  double lambda = 0.0;
  int epoch = 0;
  int layer = 0;
};

/// lambda = eta^2 max_k || (L Z Z^T L (O - Y))_k ||^2 with
/// O = softmax(L Z W) row-wise.
GammaBound gamma_bound(const Matrix& z_prev, const Matrix& w, const SparseMatrix& laplacian,
                       const Matrix& labels, double eta);
/// Same bound for a given output matrix; throws ConfigError unless O is
/// row-stochastic (entries >= 0, rows summing to 1 within 1e-9).
GammaBound gamma_bound_from_output(const Matrix& z_prev, const SparseMatrix& laplacian,
                                   const Matrix& output, const Matrix& labels, double eta);

struct GeneratorReport;

/// Residual two-layer map G(v) = v + W2 tanh(W1 v + b1) + b2 acting on
/// directions divided by a pool scale.

class TrajectoryGenerator {
 public:
  TrajectoryGenerator() = default;
  /// G(v) = v.
  static TrajectoryGenerator identity(Eigen::Index dim, int hidden = 0, double scale = 1.0);

  Eigen::Index dim() const { return dim_; }
  double scale() const { return scale_; }
  /// Standardized map.
  Vector map(const Vector& v) const;
  /// Raw-unit map: scale * G(v / scale).
  Vector apply(const Vector& v) const { return scale_ * map(v / scale_); }

 private:
  friend TrajectoryGenerator train_generator(const Matrix&, double, std::uint64_t, const GeneratorConfig&,
                                             GeneratorReport*);
  Eigen::Index dim_ = 0;
  double scale_ = 1.0;
  Matrix w1_, w2_;
  Vector b1_, b2_;
};

struct GeneratorReport {
  double lambda = 0.0;           // raw units
  double lambda_standard = 0.0;  // divided by scale^2
  double satisfaction_rate = 1.0;
  double final_loss = 0.0;
};

/// Trains G on noise drawn at the pool's scale so that G(v) . v >= lambda.
/// `pool` holds reliable direction vectors as rows; an empty pool means
/// unit-scale noise with dimension pool.cols(). Throws RuntimeFailure when
/// the loss diverges.
TrajectoryGenerator train_generator(const Matrix& pool, double lambda, std::uint64_t seed,
                                    const GeneratorConfig& cfg = {}, GeneratorReport* report = nullptr);

/// Fraction of fresh noise vectors v with G(v) . v >= lambda (raw units).
double constraint_satisfaction(const TrajectoryGenerator& gen, double lambda, int samples, std::uint64_t seed);

struct FeasibleSet {
  std::vector<Matrix> chains;        // direction chains, varrho x d
  std::vector<Matrix> trajectories;  // cumulative sums, varrho x d
  std::vector<NormalizedTrajectory> normalized;
  std::size_t attempts = 0;
};

/// Builds `count` chains [v0, G(v0), G(G(v0)), ...] of length varrho and
/// keeps those whose consecutive directions all satisfy u . w >= lambda.
/// v0 is drawn from the rows of `inits` (cycled), scaled log-uniformly and
/// jittered; step noise keeps chains distinct. Trajectories are normalized
/// with `normalizer`. Throws RuntimeFailure when more than 99% of attempts
/// are rejected.
FeasibleSet generate_feasible_fts(const TrajectoryGenerator& gen, const Matrix& inits, int varrho,
                                  int count, double lambda, std::uint64_t seed,
                                  const TrajectoryNormalizer& normalizer, const GeneratorConfig& cfg = {});

struct DetectorProvenance {
  std::string arch = "gcn";
  double eta = 0.0;
  std::string tag;
  int epoch = 0;
};

struct DetectorSet {
  EntityKind kind = EntityKind::kEdge;
  std::vector<NormalizedTrajectory> detectors;
  double rho = 0.0;
  int layer = 1;
  Eigen::Index length = 0;
  Eigen::Index dim = 0;
  DetectorProvenance provenance;

  std::size_t size() const { return detectors.size(); }
  bool empty() const { return detectors.empty(); }
};

/// Negative selection: keeps every feasible FT whose minimum MSE to the
/// reliable set exceeds rho. Throws ConfigError on an empty reliable set or
/// a shape mismatch.
DetectorSet produce_detectors(std::span<const NormalizedTrajectory> feasible,
                              std::span<const NormalizedTrajectory> reliable, double rho);

struct Verdict {
  bool abnormal = false;
  double score = std::numeric_limits<double>::infinity();
};

/// kMin: abnormal iff the closest detector is within rho (score = that MSE).
/// kMean: abnormal iff the mean MSE over detectors is within rho.
/// Empty sets give normal with score +inf.
Verdict detect_abnormal(const NormalizedTrajectory& probe, const DetectorSet& detectors,
                        DetectionRule rule = DetectionRule::kMin);

enum class EdgeVerdictKind { kInserted, kDeleted, kClean };
std::string_view to_string(EdgeVerdictKind k);

struct EdgeEvidence {
  std::vector<NodeId> abnormal_nodes;
  double node_score = std::numeric_limits<double>::infinity();
  double edge_score = std::numeric_limits<double>::infinity();
};

struct EdgeVerdict {
  Edge edge;
  EdgeVerdictKind verdict = EdgeVerdictKind::kClean;
  EdgeEvidence evidence;
};

/// Verdicts of directed edge trajectories keyed by (target, source).
using EdgeVerdictMap = std::map<std::pair<NodeId, NodeId>, Verdict>;

/// For every abnormal node i, flags each incident edge (i, k) whose
/// trajectory (i <- k) is abnormal. Edges inside the reliable region are
/// never flagged; each edge is reported once.
std::vector<EdgeVerdict> classify_inserted(const GraphData& g, std::span<const Verdict> node_verdicts,
                                           const EdgeVerdictMap& edge_verdicts);

/// Non-edges within two hops of `node`, outside the reliable region, ranked
/// by feature cosine similarity (ties by id), at most `budget`.
std::vector<Edge> deleted_candidates(const GraphData& g, NodeId node, int budget);

struct ProbeOutcome {
  Verdict edge;
  Verdict node;
};
using ProbeFn = std::function<ProbeOutcome(const Edge& candidate)>;

/// Tries candidates in order (at most probe_budget). The first whose new
/// edge trajectory and the node's trajectory both test normal is returned
/// as deleted. The probe must not mutate shared state.
std::optional<EdgeVerdict> classify_deleted(NodeId node, std::span<const Edge> candidates,
                                            int probe_budget, const ProbeFn& probe);

struct RectifyResult {
  GraphData graph;
  RollbackResult rollback;
  std::size_t removed = 0;
  std::size_t added = 0;
};

/// Removes inserted-flagged edges, adds deleted-flagged ones and rolls the
/// state back delta epochs (no rollback for an empty verdict list). Throws
/// ConfigError on contradictory or inconsistent verdicts.
RectifyResult rectify(const GraphData& g, std::span<const EdgeVerdict> verdicts, ModelState& state, int delta);

// ---------------------------------------------------------------------------
// Pipeline

struct EpochRecord {
  int iteration = 0;
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double train_seconds = 0.0;
  double defense_seconds = 0.0;
};

struct CheckpointRecord {
  int iteration = 0;
  int epoch = 0;
  bool ok = true;
  std::string error;
  std::size_t reliable_nodes = 0;
  std::size_t reliable_edges = 0;
  std::size_t node_detectors = 0;
  std::size_t edge_detectors = 0;
  double rho_node = 0.0;
  double rho_edge = 0.0;
  double lambda_node = 0.0;
  double lambda_edge = 0.0;
  /// Computed bound (GCN) and the share of observed reliable consecutive
  /// inner products below it. NaN when not computed.
  double lambda_computed = std::numeric_limits<double>::quiet_NaN();
  double lambda_violation_rate = std::numeric_limits<double>::quiet_NaN();
  double generator_satisfaction = 1.0;
  std::size_t abnormal_nodes = 0;
  std::size_t abnormal_edges = 0;
  std::size_t probes = 0;
  std::vector<EdgeVerdict> verdicts;
  int rewound = 0;
  double seconds = 0.0;
  // Wall time per phase; sums to at most `seconds`.
  double collect_seconds = 0.0;
  double produce_seconds = 0.0;
  double detect_seconds = 0.0;
  double probe_seconds = 0.0;
  double rectify_seconds = 0.0;
};

struct PipelineInputs {
  /// Exogenous reliable graph for ReliableSource::kExogenous.
  const GraphData* exogenous = nullptr;
  /// Imported detectors; when both are set no local detectors are produced.
  const DetectorSet* node_detectors = nullptr;
  const DetectorSet* edge_detectors = nullptr;
  std::string tag;
  /// Called as records are produced; a checkpoint is reported before the
  /// epoch record of the iteration it belongs to.
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const CheckpointRecord&)> on_checkpoint;
};

struct PipelineResult {
  GraphData graph;
  ModelState state;
  std::vector<EpochRecord> epochs;
  std::vector<CheckpointRecord> checkpoints;
  /// Every applied verdict, in order.
  std::vector<EdgeVerdict> verdicts;
  std::size_t repeat_flips = 0;
  std::optional<DetectorSet> node_detectors;
  std::optional<DetectorSet> edge_detectors;
  double train_seconds = 0.0;
  double defense_seconds = 0.0;
};

/// Trains until the model has taken train.max_epochs steps (bounded by the
/// iteration budget) with monitoring and a detect-and-rectify checkpoint
/// every checkpoint_interval iterations. A failing checkpoint is logged and
/// training continues.
PipelineResult run_pipeline(const GraphData& g, const ModelArch& arch, const TrainConfig& train,
                            const ImmuneConfig& immune, const PipelineInputs& inputs = {});

/// Plain training without any observer; the reference for harmlessness.
ModelState train_plain(const GraphData& g, const ModelArch& arch, const TrainConfig& train);

// ---------------------------------------------------------------------------
// Detector transfer

/// Text format, version 1:
///   grimm-detectors 1
///   set kind=<node|edge> arch=<a> layer=<l> length=<T> dim=<d> rho=<r> eta=<e> tag=<t> epoch=<n> count=<K>
///   <K lines of T*d reals, row-major>
/// repeated per set.
void write_detectors(std::ostream& out, std::span<const DetectorSet> sets);
std::vector<DetectorSet> read_detectors(std::istream& in, const std::string& source = "<stream>");

/// Throws ConfigError naming expected and found values when `set` does not
/// fit a run with the given layer, window length and dimension.
void check_compatible(const DetectorSet& set, int layer, Eigen::Index length, Eigen::Index dim);

}  // namespace grimm
