// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver: run, bench, export-detectors, import-detectors and
// gen-data. Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "grimm/run.hpp"

namespace fs = std::filesystem;
using namespace grimm;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.override_seed(*c.seed);
  if (!c.out_dir.empty()) cfg.output.dir = c.out_dir;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  return out;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "INI config file (defaults apply when omitted)");
  cmd->add_option("-s,--seed", c.seed, "replace every seed in the config");
  cmd->add_option("-o,--out", c.out_dir, "output directory");
}

void write_detector_file(const fs::path& path, const PipelineResult& res) {
  if (!res.node_detectors || !res.edge_detectors) {
    throw RuntimeFailure("no detectors were produced (no successful checkpoint)");
  }
  auto out = open_out(path);
  const DetectorSet sets[] = {*res.node_detectors, *res.edge_detectors};
  write_detectors(out, sets);
}

// Full run with metrics and artifacts in cfg.output.dir.
RunOutcome do_run(const RunConfig& cfg, const std::vector<DetectorSet>* imported) {
  const auto prepared = prepare_run(cfg);
  const fs::path dir = cfg.output.dir;
  fs::create_directories(dir);
  auto metrics_file = open_out(dir / cfg.output.metrics);
  MetricsWriter metrics(metrics_file);
  if (!prepared.perturbations.empty()) {
    auto p = open_out(dir / "perturbations.txt");
    write_perturbations(p, prepared.perturbations);
  }
  try {
    auto outcome = execute_run(cfg, prepared, &metrics, imported);
    auto edges = open_out(dir / cfg.output.rectified_edges);
    write_edge_list(edges, outcome.pipeline.graph.edges());
    if (!cfg.output.detectors.empty() && outcome.pipeline.node_detectors) {
      write_detector_file(dir / cfg.output.detectors, outcome.pipeline);
    }
    return outcome;
  } catch (const std::exception& e) {
    metrics.write(nlohmann::json{{"type", "error"}, {"message", e.what()}}.dump());
    throw;
  }
}

void summarize(const RunOutcome& o) {
  std::cout << "test_acc " << o.final_test_acc << "  epochs " << o.pipeline.state.epoch << "  iterations "
            << o.pipeline.epochs.size() << "  checkpoints " << o.pipeline.checkpoints.size() << '\n';
  const auto& s = o.score;
  if (s.flagged_inserted + s.flagged_deleted > 0 || s.planted_inserted + s.planted_deleted > 0) {
    std::cout << "flagged inserted " << s.flagged_inserted << " (true " << s.true_inserted << " of "
              << s.planted_inserted << ")  flagged deleted " << s.flagged_deleted << " (true " << s.true_deleted
              << " of " << s.planted_deleted << ")\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grimm: immune-style defense against structure poisoning of graph neural networks"};
  app.require_subcommand(1);

  Common run_opts;
  bool dry_run = false;
  auto* run = app.add_subcommand("run", "attack, train with the defense and write metrics");
  add_common(run, run_opts);
  run->add_flag("--dry-run", dry_run, "validate and print the resolved config");

  Common bench_opts;
  int repeat = 1;
  auto* bench = app.add_subcommand("bench", "wall time of off, monitor and full defense with identical seeds");
  add_common(bench, bench_opts);
  bench->add_option("-r,--repeat", repeat, "runs per mode; the fastest is kept")->check(CLI::PositiveNumber);

  Common export_opts;
  std::string export_path;
  auto* exp = app.add_subcommand("export-detectors", "run with the full defense and save its detectors");
  add_common(exp, export_opts);
  exp->add_option("detectors", export_path, "detector file to write")->required();

  Common import_opts;
  std::string import_path;
  auto* imp = app.add_subcommand("import-detectors", "run with detectors loaded from a file");
  add_common(imp, import_opts);
  imp->add_option("detectors", import_path, "detector file to read")->required()->check(CLI::ExistingFile);

  Common gen_opts;
  auto* gen = app.add_subcommand("gen-data", "write the clean and attacked graphs of a config");
  add_common(gen, gen_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*run) {
      const auto cfg = resolve(run_opts);
      if (dry_run) {
        write_run_config(std::cout, cfg);
        return kOk;
      }
      summarize(do_run(cfg, nullptr));
    } else if (*bench) {
      auto cfg = resolve(bench_opts);
      const auto prepared = prepare_run(cfg);
      print_bench(std::cout, run_bench(cfg, prepared, repeat));
    } else if (*exp) {
      auto cfg = resolve(export_opts);
      cfg.defense = DefenseMode::kFull;
      cfg.import_detectors.clear();
      const auto outcome = do_run(cfg, nullptr);
      write_detector_file(export_path, outcome.pipeline);
      summarize(outcome);
      std::cout << "detectors written to " << export_path << '\n';
    } else if (*imp) {
      auto cfg = resolve(import_opts);
      cfg.defense = DefenseMode::kFull;
      std::ifstream in(import_path);
      const auto sets = read_detectors(in, import_path);
      summarize(do_run(cfg, &sets));
    } else if (*gen) {
      const auto cfg = resolve(gen_opts);
      const auto prepared = prepare_run(cfg);
      const fs::path dir = cfg.output.dir;
      save_graph(prepared.clean, dir / "clean");
      save_graph(prepared.attacked, dir / "attacked");
      auto p = open_out(dir / "perturbations.txt");
      write_perturbations(p, prepared.perturbations);
      auto r = open_out(dir / "reliable_nodes.txt");
      for (NodeId i = 0; i < prepared.clean.num_nodes(); ++i) {
        if (prepared.clean.reliable_mask()[static_cast<std::size_t>(i)]) r << i << '\n';
      }
      std::cout << "wrote " << dir.string() << " (" << prepared.clean.num_nodes() << " nodes, "
                << prepared.perturbations.size() << " flips)\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << nlohmann::json{{"type", "error"}, {"code", kValidation}, {"message", e.what()}}.dump() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"type", "error"}, {"code", kRuntime}, {"message", e.what()}}.dump() << '\n';
    return kRuntime;
  }
  return kOk;
}
