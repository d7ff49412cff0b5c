// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/run.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

namespace grimm {
namespace {

namespace pt = boost::property_tree;
using json = nlohmann::json;

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(num) / static_cast<double>(den);
}

// JSON has no infinities or NaN; they become null.
json real(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

// Shortest text that reads back to the same double.
std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string join_dims(const std::vector<Eigen::Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Reads typed values out of an INI tree and remembers which keys were used,
// so leftovers can be reported.
class IniReader {
 public:
  IniReader(pt::ptree tree, std::string source) : tree_(std::move(tree)), source_(std::move(source)) {}

  template <class T, class Parse>
  void get(const std::string& section, const std::string& key, T& out, Parse parse) {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return;
    const auto val = sec->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!val) return;
    used_.insert(section + "." + key);
    try {
      out = parse(trim(*val));
    } catch (const ConfigError& e) {
      throw ConfigError(where(section, key) + e.what());
    } catch (const std::exception&) {
      throw ConfigError(where(section, key) + "invalid value '" + *val + "'");
    }
  }

  void real(const std::string& s, const std::string& k, double& out) {
    get(s, k, out, [](const std::string& v) {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    });
  }
  template <class Int>
  void integer(const std::string& s, const std::string& k, Int& out) {
    get(s, k, out, [](const std::string& v) {
      std::size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      if (std::is_unsigned_v<Int> && x < 0) throw ConfigError("must be non-negative");
      return static_cast<Int>(x);
    });
  }
  void boolean(const std::string& s, const std::string& k, bool& out) {
    get(s, k, out, [](const std::string& v) {
      if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "off" || v == "no") return false;
      throw std::invalid_argument(v);
    });
  }
  void text(const std::string& s, const std::string& k, std::string& out) {
    get(s, k, out, [](const std::string& v) { return v; });
  }
  void path(const std::string& s, const std::string& k, std::filesystem::path& out) {
    get(s, k, out, [](const std::string& v) { return std::filesystem::path(v); });
  }
  void dims(const std::string& s, const std::string& k, std::vector<Eigen::Index>& out) {
    get(s, k, out, [](const std::string& v) {
      std::vector<Eigen::Index> r;
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        std::size_t pos = 0;
        const long long x = std::stoll(item, &pos);
        if (pos != item.size() || x <= 0) throw ConfigError("expected a comma list of positive integers");
        r.push_back(static_cast<Eigen::Index>(x));
      }
      return r;
    });
  }

  void check_all_used() const {
    for (const auto& [section, sec] : tree_) {
      if (sec.empty() && !sec.data().empty()) {
        throw ConfigError(source_ + ": key '" + section + "' outside any section");
      }
      for (const auto& [key, val] : sec) {
        if (!used_.count(section + "." + key)) {
          throw ConfigError(source_ + ": unknown key '" + key + "' in section [" + section + "]");
        }
      }
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  std::string where(const std::string& s, const std::string& k) const {
    return source_ + ": [" + s + "] " + k + ": ";
  }

  pt::ptree tree_;
  std::string source_;
  std::set<std::string> used_;
};

ModelArch make_arch(const ModelConfig& m, Eigen::Index input, Eigen::Index classes) {
  ModelArch a;
  a.kind = m.kind;
  a.layer_dims.push_back(input);
  a.layer_dims.insert(a.layer_dims.end(), m.hidden.begin(), m.hidden.end());
  a.layer_dims.push_back(classes);
  a.num_heads = m.heads;
  a.hidden_activations.assign(m.hidden.size(), m.activation);
  a.laplacian = m.laplacian;
  return a;
}

std::string_view to_string(DatasetSource s) { return s == DatasetSource::kSbm ? "sbm" : "files"; }

DatasetSource parse_dataset_source(std::string_view s) {
  if (s == "sbm") return DatasetSource::kSbm;
  if (s == "files") return DatasetSource::kFiles;
  throw ConfigError("unknown dataset source '" + std::string(s) + "' (expected sbm or files)");
}

AttackKind parse_attack_kind(std::string_view s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "random") return AttackKind::kRandom;
  if (s == "greedy") return AttackKind::kGreedy;
  throw ConfigError("unknown attack kind '" + std::string(s) + "' (expected none, random or greedy)");
}

json edge_json(const Edge& e) { return json::array({e.u, e.v}); }

std::string truth_of(const Edge& e, const std::set<Edge>& ins, const std::set<Edge>& del) {
  if (ins.count(e)) return "inserted";
  if (del.count(e)) return "deleted";
  return "none";
}

}  // namespace

std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kNone: return "none";
    case AttackKind::kRandom: return "random";
    case AttackKind::kGreedy: return "greedy";
  }
  return "?";
}

std::string_view to_string(DefenseMode m) {
  switch (m) {
    case DefenseMode::kOff: return "off";
    case DefenseMode::kMonitor: return "monitor";
    case DefenseMode::kFull: return "full";
  }
  return "?";
}

DefenseMode parse_defense_mode(std::string_view s) {
  if (s == "off") return DefenseMode::kOff;
  if (s == "monitor") return DefenseMode::kMonitor;
  if (s == "full") return DefenseMode::kFull;
  throw ConfigError("unknown defense mode '" + std::string(s) + "' (expected off, monitor or full)");
}

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::override_seed(std::uint64_t seed) {
  dataset.sbm.seed = seed;
  dataset.split.seed = seed;
  dataset.reliable_seed = seed;
  model.train.seed = seed;
  attack.seed = seed;
  immune.seed = seed;
  exogenous_seed = seed + 1;
}

ImmuneConfig RunConfig::effective_immune() const {
  ImmuneConfig c = immune;
  c.monitor = defense != DefenseMode::kOff;
  c.checkpoints = defense == DefenseMode::kFull;
  return c;
}

void RunConfig::validate() const {
  if (dataset.source == DatasetSource::kSbm) {
    dataset.sbm.validate();
  } else if (dataset.edges.empty() || dataset.features.empty() || dataset.labels.empty()) {
    throw ConfigError("files dataset needs edges, features and labels paths");
  }
  dataset.split.validate();
  if (!(dataset.reliable_fraction > 0.0 && dataset.reliable_fraction < 1.0)) {
    throw ConfigError("reliable_fraction must lie in (0, 1)");
  }
  if (model.hidden.empty()) throw ConfigError("model needs at least one hidden layer");
  if (!(model.train.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (model.train.max_epochs <= 0) throw ConfigError("max_epochs must be positive");
  if (model.train.snapshot_capacity == 0) throw ConfigError("snapshot_capacity must be positive");
  if (!(attack.rate >= 0.0 && attack.rate <= 1.0)) throw ConfigError("attack rate must lie in [0, 1]");
  if (!(attack.insert_fraction >= 0.0 && attack.insert_fraction <= 1.0)) {
    throw ConfigError("insert_fraction must lie in [0, 1]");
  }
  if (output.metrics.empty()) throw ConfigError("metrics file name must not be empty");
  // Widths at the ends do not matter for the remaining checks.
  const auto arch = make_arch(model, 1, 2);
  arch.validate();
  const auto im = effective_immune();
  im.validate(arch, model.train);
  if (defense == DefenseMode::kFull && im.reliable_source == ReliableSource::kExogenous &&
      dataset.source != DatasetSource::kSbm) {
    throw ConfigError("the exogenous reliable source needs an sbm dataset");
  }
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(source, e.line(), e.message());
  }
  for (const auto& [name, sec] : tree) {
    static const std::set<std::string> known{"dataset", "model", "attack", "immune", "generator", "output"};
    if (!sec.empty() && !known.count(name)) throw ConfigError(source + ": unknown section [" + name + "]");
  }
  IniReader r(std::move(tree), source);
  RunConfig c;

  auto& d = c.dataset;
  r.get("dataset", "source", d.source, parse_dataset_source);
  r.get("dataset", "blocks", d.sbm.blocks, [&](const std::string& v) {
    std::stringstream ss(v);
    std::string item;
    std::vector<NodeId> out;
    while (std::getline(ss, item, ',')) {
      std::size_t pos = 0;
      const long long x = std::stoll(item, &pos);
      if (item.find_first_not_of(" \t", pos) != std::string::npos || x <= 0) {
        throw ConfigError("expected a comma list of positive block sizes");
      }
      out.push_back(static_cast<NodeId>(x));
    }
    return out;
  });
  r.real("dataset", "p_in", d.sbm.p_in);
  r.real("dataset", "p_out", d.sbm.p_out);
  r.integer("dataset", "feature_dim", d.sbm.feature_dim);
  r.real("dataset", "feature_noise", d.sbm.feature_noise);
  r.integer("dataset", "seed", d.sbm.seed);
  r.path("dataset", "edges", d.edges);
  r.path("dataset", "features", d.features);
  r.path("dataset", "labels", d.labels);
  r.real("dataset", "train_fraction", d.split.train_fraction);
  r.real("dataset", "val_fraction", d.split.val_fraction);
  r.integer("dataset", "split_seed", d.split.seed);
  r.real("dataset", "reliable_fraction", d.reliable_fraction);
  r.integer("dataset", "reliable_seed", d.reliable_seed);

  auto& m = c.model;
  r.get("model", "arch", m.kind, parse_arch_kind);
  r.dims("model", "hidden", m.hidden);
  r.integer("model", "heads", m.heads);
  r.get("model", "activation", m.activation, parse_activation);
  r.get("model", "laplacian", m.laplacian, parse_laplacian_kind);
  r.real("model", "learning_rate", m.train.learning_rate);
  r.integer("model", "max_epochs", m.train.max_epochs);
  r.integer("model", "seed", m.train.seed);
  r.integer("model", "snapshot_capacity", m.train.snapshot_capacity);

  r.get("attack", "kind", c.attack.kind, parse_attack_kind);
  r.real("attack", "rate", c.attack.rate);
  r.real("attack", "insert_fraction", c.attack.insert_fraction);
  r.integer("attack", "seed", c.attack.seed);

  auto& im = c.immune;
  r.get("immune", "mode", c.defense, parse_defense_mode);
  r.real("immune", "rho", im.rho);
  r.real("immune", "rho_percentile", im.rho_percentile);
  r.real("immune", "rho_scale", im.rho_scale);
  r.integer("immune", "varrho", im.varrho);
  r.integer("immune", "delta", im.delta);
  r.integer("immune", "checkpoint_interval", im.checkpoint_interval);
  r.integer("immune", "interface_layer", im.interface_layer);
  r.integer("immune", "generator_count", im.generator_count);
  r.get("immune", "lambda_mode", im.lambda_mode, parse_lambda_mode);
  r.real("immune", "lambda_value", im.lambda_value);
  r.real("immune", "lambda_percentile", im.lambda_percentile);
  r.get("immune", "rule", im.rule, parse_detection_rule);
  r.integer("immune", "probe_budget", im.probe_budget);
  r.integer("immune", "max_probe_nodes", im.max_probe_nodes);
  r.boolean("immune", "detect_deleted", im.detect_deleted);
  r.get("immune", "reliable_source", im.reliable_source, parse_reliable_source);
  r.integer("immune", "iteration_budget", im.iteration_budget);
  r.integer("immune", "seed", im.seed);
  r.integer("immune", "exogenous_seed", c.exogenous_seed);
  r.path("immune", "import_detectors", c.import_detectors);

  auto& gcfg = im.generator;
  r.integer("generator", "hidden", gcfg.hidden);
  r.integer("generator", "epochs", gcfg.epochs);
  r.integer("generator", "batch", gcfg.batch);
  r.real("generator", "learning_rate", gcfg.learning_rate);
  r.real("generator", "margin", gcfg.margin);
  r.real("generator", "step_noise", gcfg.step_noise);
  r.real("generator", "init_scale_min", gcfg.init_scale_min);
  r.real("generator", "init_scale_max", gcfg.init_scale_max);
  r.integer("generator", "attempts_per_trajectory", gcfg.attempts_per_trajectory);
  r.integer("generator", "holdout", gcfg.holdout);

  r.path("output", "dir", c.output.dir);
  r.text("output", "metrics", c.output.metrics);
  r.text("output", "rectified_edges", c.output.rectified_edges);
  r.text("output", "detectors", c.output.detectors);

  r.check_all_used();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_run_config(in, path.string());
}

void write_run_config(std::ostream& out, const RunConfig& c) {
  std::ostringstream os;
  const auto& d = c.dataset;
  std::string blocks;
  for (std::size_t i = 0; i < d.sbm.blocks.size(); ++i) blocks += (i ? "," : "") + std::to_string(d.sbm.blocks[i]);
  os << "[dataset]\n"
     << "source = " << to_string(d.source) << '\n'
     << "blocks = " << blocks << '\n'
     << "p_in = " << num(d.sbm.p_in) << '\n'
     << "p_out = " << num(d.sbm.p_out) << '\n'
     << "feature_dim = " << d.sbm.feature_dim << '\n'
     << "feature_noise = " << num(d.sbm.feature_noise) << '\n'
     << "seed = " << d.sbm.seed << '\n'
     << "edges = " << d.edges.string() << '\n'
     << "features = " << d.features.string() << '\n'
     << "labels = " << d.labels.string() << '\n'
     << "train_fraction = " << num(d.split.train_fraction) << '\n'
     << "val_fraction = " << num(d.split.val_fraction) << '\n'
     << "split_seed = " << d.split.seed << '\n'
     << "reliable_fraction = " << num(d.reliable_fraction) << '\n'
     << "reliable_seed = " << d.reliable_seed << "\n\n";
  const auto& m = c.model;
  os << "[model]\n"
     << "arch = " << to_string(m.kind) << '\n'
     << "hidden = " << join_dims(m.hidden) << '\n'
     << "heads = " << m.heads << '\n'
     << "activation = " << to_string(m.activation) << '\n'
     << "laplacian = " << to_string(m.laplacian) << '\n'
     << "learning_rate = " << num(m.train.learning_rate) << '\n'
     << "max_epochs = " << m.train.max_epochs << '\n'
     << "seed = " << m.train.seed << '\n'
     << "snapshot_capacity = " << m.train.snapshot_capacity << "\n\n";
  os << "[attack]\n"
     << "kind = " << to_string(c.attack.kind) << '\n'
     << "rate = " << num(c.attack.rate) << '\n'
     << "insert_fraction = " << num(c.attack.insert_fraction) << '\n'
     << "seed = " << c.attack.seed << "\n\n";
  const auto& im = c.immune;
  os << "[immune]\n"
     << "mode = " << to_string(c.defense) << '\n'
     << "rho = " << num(im.rho) << '\n'
     << "rho_percentile = " << num(im.rho_percentile) << '\n'
     << "rho_scale = " << num(im.rho_scale) << '\n'
     << "varrho = " << im.varrho << '\n'
     << "delta = " << im.delta << '\n'
     << "checkpoint_interval = " << im.checkpoint_interval << '\n'
     << "interface_layer = " << im.interface_layer << '\n'
     << "generator_count = " << im.generator_count << '\n'
     << "lambda_mode = " << to_string(im.lambda_mode) << '\n';
  if (!std::isnan(im.lambda_value)) os << "lambda_value = " << num(im.lambda_value) << '\n';
  os << "lambda_percentile = " << num(im.lambda_percentile) << '\n'
     << "rule = " << to_string(im.rule) << '\n'
     << "probe_budget = " << im.probe_budget << '\n'
     << "max_probe_nodes = " << im.max_probe_nodes << '\n'
     << "detect_deleted = " << (im.detect_deleted ? "true" : "false") << '\n'
     << "reliable_source = " << to_string(im.reliable_source) << '\n'
     << "iteration_budget = " << im.iteration_budget << '\n'
     << "seed = " << im.seed << '\n'
     << "exogenous_seed = " << c.exogenous_seed << '\n'
     << "import_detectors = " << c.import_detectors.string() << "\n\n";
  const auto& g = im.generator;
  os << "[generator]\n"
     << "hidden = " << g.hidden << '\n'
     << "epochs = " << g.epochs << '\n'
     << "batch = " << g.batch << '\n'
     << "learning_rate = " << num(g.learning_rate) << '\n'
     << "margin = " << num(g.margin) << '\n'
     << "step_noise = " << num(g.step_noise) << '\n'
     << "init_scale_min = " << num(g.init_scale_min) << '\n'
     << "init_scale_max = " << num(g.init_scale_max) << '\n'
     << "attempts_per_trajectory = " << g.attempts_per_trajectory << '\n'
     << "holdout = " << g.holdout << "\n\n";
  os << "[output]\n"
     << "dir = " << c.output.dir.string() << '\n'
     << "metrics = " << c.output.metrics << '\n'
     << "rectified_edges = " << c.output.rectified_edges << '\n'
     << "detectors = " << c.output.detectors << '\n';
  out << os.str();
}

// ---------------------------------------------------------------------------
// Data and attack

PreparedRun prepare_run(const RunConfig& cfg) {
  cfg.validate();
  const auto& d = cfg.dataset;
  GraphData g = d.source == DatasetSource::kSbm ? split_masks(sbm_generate(d.sbm), d.split)
                                                : load_graph(d.edges, d.features, d.labels, d.split);
  GraphData clean = split_reliable(g, d.reliable_fraction, d.reliable_seed);
  ModelArch arch = make_arch(cfg.model, clean.feature_dim(), clean.num_classes());
  arch.validate();
  auto attacked = [&]() -> std::pair<GraphData, PerturbationSet> {
    switch (cfg.attack.kind) {
      case AttackKind::kRandom:
        return random_perturb(clean, cfg.attack.rate, cfg.attack.insert_fraction, cfg.attack.seed);
      case AttackKind::kGreedy:
        return greedy_poison(clean, perturbation_budget(clean, cfg.attack.rate), cfg.attack.seed);
      case AttackKind::kNone:
        break;
    }
    return {clean, PerturbationSet{}};
  }();
  std::optional<GraphData> exogenous;
  if (cfg.defense == DefenseMode::kFull && cfg.immune.reliable_source == ReliableSource::kExogenous) {
    auto spec = d.sbm;
    spec.seed = cfg.exogenous_seed;
    auto split = d.split;
    split.seed = cfg.exogenous_seed;
    exogenous = split_masks(sbm_generate(spec), split);
  }
  return PreparedRun{std::move(clean), std::move(attacked.first), std::move(attacked.second), std::move(arch),
                     std::move(exogenous)};
}

// ---------------------------------------------------------------------------
// Scoring

double DefenseScore::precision_inserted() const { return ratio(true_inserted, flagged_inserted); }
double DefenseScore::recall_inserted() const { return ratio(true_inserted, planted_inserted); }
double DefenseScore::precision_deleted() const { return ratio(true_deleted, flagged_deleted); }
double DefenseScore::recall_deleted() const { return ratio(true_deleted, planted_deleted); }
double DefenseScore::precision() const {
  return ratio(true_inserted + true_deleted, flagged_inserted + flagged_deleted);
}
double DefenseScore::recall() const {
  return ratio(true_inserted + true_deleted, planted_inserted + planted_deleted);
}

DefenseScore score_defense(std::span<const EdgeVerdict> verdicts, const PerturbationSet& truth) {
  const std::set<Edge> ins(truth.inserted.begin(), truth.inserted.end());
  const std::set<Edge> del(truth.deleted.begin(), truth.deleted.end());
  std::set<Edge> flagged_ins, flagged_del;
  for (const auto& v : verdicts) {
    if (v.verdict == EdgeVerdictKind::kInserted) flagged_ins.insert(v.edge);
    if (v.verdict == EdgeVerdictKind::kDeleted) flagged_del.insert(v.edge);
  }
  DefenseScore s;
  s.planted_inserted = ins.size();
  s.planted_deleted = del.size();
  s.flagged_inserted = flagged_ins.size();
  s.flagged_deleted = flagged_del.size();
  for (const auto& e : flagged_ins) s.true_inserted += ins.count(e);
  for (const auto& e : flagged_del) s.true_deleted += del.count(e);
  return s;
}

// ---------------------------------------------------------------------------
// Execution

void MetricsWriter::write(const std::string& line) {
  *out_ << line << '\n';
  out_->flush();
}

RunOutcome execute_run(const RunConfig& cfg, const PreparedRun& prepared, MetricsWriter* metrics,
                       const std::vector<DetectorSet>* imported) {
  const auto immune = cfg.effective_immune();
  std::vector<DetectorSet> loaded;
  if (!imported && !cfg.import_detectors.empty()) {
    std::ifstream in(cfg.import_detectors);
    if (!in) throw ConfigError("cannot open detectors " + cfg.import_detectors.string());
    loaded = read_detectors(in, cfg.import_detectors.string());
    imported = &loaded;
  }
  PipelineInputs inputs;
  if (imported) {
    for (const auto& s : *imported) {
      auto& slot = s.kind == EntityKind::kNode ? inputs.node_detectors : inputs.edge_detectors;
      if (!slot) slot = &s;
    }
    if (!inputs.node_detectors || !inputs.edge_detectors) {
      throw ConfigError("imported detectors need one node set and one edge set");
    }
  }
  if (prepared.exogenous) inputs.exogenous = &*prepared.exogenous;
  inputs.tag = cfg.dataset.source == DatasetSource::kSbm ? "sbm-" + std::to_string(cfg.dataset.sbm.seed)
                                                        : cfg.dataset.edges.stem().string();

  const auto& truth = prepared.perturbations;
  const std::set<Edge> ins(truth.inserted.begin(), truth.inserted.end());
  const std::set<Edge> del(truth.deleted.begin(), truth.deleted.end());
  const bool defended = cfg.defense != DefenseMode::kOff;
  auto emit = [&](const json& j) {
    if (metrics) metrics->write(j.dump());
  };
  if (!truth.empty()) {
    emit({{"type", "attack"},
          {"kind", to_string(cfg.attack.kind)},
          {"rate", truth.rate},
          {"seed", truth.seed},
          {"inserted", truth.inserted.size()},
          {"deleted", truth.deleted.size()}});
  }
  if (metrics) {
    inputs.on_epoch = [&](const EpochRecord& e) {
      json j{{"type", "epoch"},      {"iteration", e.iteration}, {"epoch", e.epoch},
             {"loss", real(e.loss)}, {"train_acc", e.train_acc}, {"val_acc", e.val_acc},
             {"test_acc", e.test_acc}, {"train_seconds", e.train_seconds}};
      if (defended) j["defense_seconds"] = e.defense_seconds;
      emit(j);
    };
    inputs.on_checkpoint = [&](const CheckpointRecord& c) {
      emit({{"type", "checkpoint"},
            {"iteration", c.iteration},
            {"epoch", c.epoch},
            {"ok", c.ok},
            {"error", c.error},
            {"reliable_nodes", c.reliable_nodes},
            {"reliable_edges", c.reliable_edges},
            {"node_detectors", c.node_detectors},
            {"edge_detectors", c.edge_detectors},
            {"rho_node", real(c.rho_node)},
            {"rho_edge", real(c.rho_edge)},
            {"lambda_node", real(c.lambda_node)},
            {"lambda_edge", real(c.lambda_edge)},
            {"lambda_computed", real(c.lambda_computed)},
            {"lambda_violation_rate", real(c.lambda_violation_rate)},
            {"generator_satisfaction", real(c.generator_satisfaction)},
            {"abnormal_nodes", c.abnormal_nodes},
            {"abnormal_edges", c.abnormal_edges},
            {"probes", c.probes},
            {"flags", c.verdicts.size()},
            {"rewound", c.rewound},
            {"seconds", c.seconds},
            {"collect_seconds", c.collect_seconds},
            {"produce_seconds", c.produce_seconds},
            {"detect_seconds", c.detect_seconds},
            {"probe_seconds", c.probe_seconds},
            {"rectify_seconds", c.rectify_seconds}});
      for (const auto& v : c.verdicts) {
        emit({{"type", "flag"},
              {"iteration", c.iteration},
              {"edge", edge_json(v.edge)},
              {"verdict", to_string(v.verdict)},
              {"truth", truth_of(v.edge, ins, del)},
              {"abnormal_nodes", v.evidence.abnormal_nodes},
              {"node_score", real(v.evidence.node_score)},
              {"edge_score", real(v.evidence.edge_score)}});
      }
    };
  }

  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome out{run_pipeline(prepared.attacked, prepared.arch, cfg.model.train, immune, inputs), {}, 0.0, 0.0};
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.score = score_defense(out.pipeline.verdicts, truth);
  const auto fwd = forward(out.pipeline.graph, out.pipeline.state, prepared.arch);
  out.final_test_acc = accuracy(out.pipeline.graph, fwd.probabilities(), out.pipeline.graph.test_mask());

  if (immune.checkpoints) {
    const auto& s = out.score;
    emit({{"type", "defense"},
          {"flagged_inserted", s.flagged_inserted},
          {"true_inserted", s.true_inserted},
          {"planted_inserted", s.planted_inserted},
          {"flagged_deleted", s.flagged_deleted},
          {"true_deleted", s.true_deleted},
          {"planted_deleted", s.planted_deleted},
          {"precision_inserted", real(s.precision_inserted())},
          {"recall_inserted", real(s.recall_inserted())},
          {"precision_deleted", real(s.precision_deleted())},
          {"recall_deleted", real(s.recall_deleted())},
          {"precision", real(s.precision())},
          {"recall", real(s.recall())},
          {"repeat_flips", out.pipeline.repeat_flips},
          {"checkpoints", out.pipeline.checkpoints.size()},
          {"failed_checkpoints", std::count_if(out.pipeline.checkpoints.begin(), out.pipeline.checkpoints.end(),
                                               [](const CheckpointRecord& c) { return !c.ok; })}});
  }
  emit({{"type", "final"},
        {"epoch", out.pipeline.state.epoch},
        {"iterations", out.pipeline.epochs.size()},
        {"test_acc", out.final_test_acc},
        {"edges", out.pipeline.graph.num_edges()},
        {"train_seconds", out.pipeline.train_seconds},
        {"defense_seconds", out.pipeline.defense_seconds},
        {"wall_seconds", out.wall_seconds}});
  return out;
}

// ---------------------------------------------------------------------------
// Bench

BenchReport run_bench(const RunConfig& cfg, const PreparedRun& prepared, int repeat) {
  if (repeat < 1) throw ConfigError("bench repeat must be at least 1");
  BenchReport rep;
  for (const auto mode : {DefenseMode::kOff, DefenseMode::kMonitor, DefenseMode::kFull}) {
    RunConfig c = cfg;
    c.defense = mode;
    BenchReport::Entry best{mode};
    best.wall_seconds = std::numeric_limits<double>::infinity();
    for (int r = 0; r < repeat; ++r) {
      const auto o = execute_run(c, prepared, nullptr);
      if (o.wall_seconds >= best.wall_seconds) continue;
      BenchReport::Entry e{mode};
      e.wall_seconds = o.wall_seconds;
      double cp_total = 0.0;
      for (const auto& cp : o.pipeline.checkpoints) {
        cp_total += cp.seconds;
        e.collect_seconds += cp.collect_seconds;
        e.produce_seconds += cp.produce_seconds;
        e.detect_seconds += cp.detect_seconds;
        e.probe_seconds += cp.probe_seconds;
        e.rectify_seconds += cp.rectify_seconds;
      }
      e.train_seconds = o.pipeline.train_seconds;
      e.record_seconds = o.pipeline.defense_seconds - cp_total;
      best = e;
    }
    rep.entries.push_back(best);
  }
  const double base = rep.entries.front().wall_seconds;
  for (auto& e : rep.entries) e.overhead = base > 0.0 ? e.wall_seconds / base - 1.0 : 0.0;
  return rep;
}

std::string bracket_overhead(double overhead) {
  std::ostringstream os;
  const double pct = overhead * 100.0;
  os << '[' << (pct >= 0.0 ? "+" : "-") << std::fixed << std::setprecision(std::abs(pct) < 10.0 ? 1 : 0)
     << std::abs(pct) << "%]";
  return os.str();
}

void print_bench(std::ostream& out, const BenchReport& report) {
  out << std::fixed << std::setprecision(3);
  for (const auto& e : report.entries) {
    out << std::left << std::setw(8) << to_string(e.mode) << std::right << std::setw(9) << e.wall_seconds << " s "
        << bracket_overhead(e.overhead) << '\n';
    out << "  train " << e.train_seconds << "  record " << e.record_seconds;
    if (e.mode == DefenseMode::kFull) {
      out << "  collect " << e.collect_seconds << "  produce " << e.produce_seconds << "  detect "
          << e.detect_seconds << "  probe " << e.probe_seconds << "  rectify " << e.rectify_seconds;
    }
    out << '\n';
  }
}

}  // namespace grimm
