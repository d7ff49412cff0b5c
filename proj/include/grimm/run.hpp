// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grimm/attack.hpp"
#include "grimm/data_io.hpp"
#include "grimm/immune.hpp"
#include "grimm/model.hpp"

namespace grimm {

enum class DatasetSource { kSbm, kFiles };
enum class AttackKind { kNone, kRandom, kGreedy };
/// off: plain training. monitor: trajectories recorded, no checkpoints.
enum class DefenseMode { kOff, kMonitor, kFull };

std::string_view to_string(AttackKind k);
std::string_view to_string(DefenseMode m);
DefenseMode parse_defense_mode(std::string_view s);

struct DatasetConfig {
  DatasetSource source = DatasetSource::kSbm;
  SbmSpec sbm{{250, 250}, 0.02, 0.002, 4, 1.5, 0};
  std::filesystem::path edges, features, labels;
  SplitSpec split;
  double reliable_fraction = 0.1;
  std::uint64_t reliable_seed = 0;
};

struct ModelConfig {
  ArchKind kind = ArchKind::kGcn;
  /// Hidden widths; input and output widths come from the data.
  std::vector<Eigen::Index> hidden{16};
  int heads = 1;
  Activation activation = Activation::kSigmoid;
  LaplacianKind laplacian = LaplacianKind::kSymNormalizedWithSelfLoops;
  TrainConfig train;
};

struct AttackConfig {
  AttackKind kind = AttackKind::kGreedy;
  double rate = 0.2;
  double insert_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct OutputConfig {
  std::filesystem::path dir = "grimm-out";
  std::string metrics = "metrics.jsonl";
  std::string rectified_edges = "rectified_edges.txt";
  /// Empty: no detector export.
  std::string detectors;
};

struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model;
  AttackConfig attack;
  DefenseMode defense = DefenseMode::kFull;
  ImmuneConfig immune;
  /// Seed of the exogenous SBM used with ReliableSource::kExogenous.
  std::uint64_t exogenous_seed = 1;
  /// Detector file to import; empty produces detectors locally.
  std::filesystem::path import_detectors;
  OutputConfig output;

  /// Replaces every seed in the config.
  void override_seed(std::uint64_t seed);
  /// Immune config with the defense mode applied.
  ImmuneConfig effective_immune() const;
  /// Cross-section checks that need no data. Throws ConfigError.
  void validate() const;
};

/// INI text: sections dataset, model, attack, immune, generator, output.
/// Unknown sections or keys, malformed values and failed validation throw
/// ConfigError.
RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key with its current value; parse_run_config reads it back.
void write_run_config(std::ostream& out, const RunConfig& cfg);

/// Data and attack, before any training.
struct PreparedRun {
  GraphData clean;
  GraphData attacked;
  PerturbationSet perturbations;
  ModelArch arch;
  std::optional<GraphData> exogenous;
};

PreparedRun prepare_run(const RunConfig& cfg);

/// Defense quality against ground truth. Precision is NaN with no flags,
/// recall NaN with no perturbations of that kind.
struct DefenseScore {
  std::size_t flagged_inserted = 0;
  std::size_t true_inserted = 0;
  std::size_t flagged_deleted = 0;
  std::size_t true_deleted = 0;
  std::size_t planted_inserted = 0;
  std::size_t planted_deleted = 0;

  double precision_inserted() const;
  double recall_inserted() const;
  double precision_deleted() const;
  double recall_deleted() const;
  double precision() const;
  double recall() const;
};

DefenseScore score_defense(std::span<const EdgeVerdict> verdicts, const PerturbationSet& truth);

struct RunOutcome {
  PipelineResult pipeline;
  DefenseScore score;
  double final_test_acc = 0.0;
  double wall_seconds = 0.0;
};

/// Line-delimited JSON records, flushed one by one. Wall-time fields are
/// named "*seconds".
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& out) : out_(&out) {}
  void write(const std::string& json_line);

 private:
  std::ostream* out_;
};

/// Trains on the attacked graph under the configured defense and writes
/// metrics records. `imported` overrides cfg.import_detectors when set.
RunOutcome execute_run(const RunConfig& cfg, const PreparedRun& prepared, MetricsWriter* metrics,
                       const std::vector<DetectorSet>* imported = nullptr);

/// Wall time of paired runs with identical seeds.
struct BenchReport {
  struct Entry {
    DefenseMode mode;
    double wall_seconds = 0.0;
    double train_seconds = 0.0;
    double record_seconds = 0.0;
    double collect_seconds = 0.0;
    double produce_seconds = 0.0;
    double detect_seconds = 0.0;
    double probe_seconds = 0.0;
    double rectify_seconds = 0.0;
    double overhead = 0.0;  // relative to the off entry
  };
  std::vector<Entry> entries;
};

/// Runs off, monitor and full; each mode keeps its fastest of `repeat`.
BenchReport run_bench(const RunConfig& cfg, const PreparedRun& prepared, int repeat = 1);
/// "+5%" style percentage in brackets.
std::string bracket_overhead(double overhead);
void print_bench(std::ostream& out, const BenchReport& report);

}  // namespace grimm
