// Command-line front end for the distillation pipeline.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtdistill/experiment.hpp"
#include "mtdistill/report.hpp"

namespace {

using namespace mtdistill;

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config, "experiment config (JSON)")->required();
  cmd->add_option("--set", c.overrides, "override a leaf key, e.g. --set train.learning_rate=1e-3")->take_all();
  cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

RunOptions run_options(const Common& c) {
  RunOptions o;
  if (!c.quiet) o.progress = [](const std::string& msg) { std::cerr << "[mtdistill] " << msg << "\n"; };
  return o;
}

void print_run(const RunResult& r) {
  for (const auto& d : r.datasets) {
    std::cout << d.dataset << ": train_items=" << d.train_items;
    if (d.harvested) {
      std::size_t pairs = d.harvest.total_cache_hits() + d.harvest.total_new_records();
      std::cout << " harvest_cache_hits=" << d.harvest.total_cache_hits() << "/" << pairs;
    }
    if (d.corpus_size) std::cout << " corpus=" << d.corpus_size << (d.built ? " (built)" : " (reused)");
    if (!d.checkpoint.empty()) std::cout << " steps=" << d.steps << (d.trained ? " (trained)" : " (reused)");
    if (d.score)
      std::cout << " accuracy=" << format_fixed(d.score->accuracy, 4) << " failures=" << d.score->extraction_failures
                << (d.evaluated ? "" : " (reused)");
    std::cout << "\n";
  }
  if (!r.report.datasets.empty()) std::cout << "overall=" << format_fixed(r.report.overall, 4) << "\n";
  std::cout << "run_dir=" << r.run_dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-teacher rationale distillation pipeline"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<std::string, Stage>> stage_cmds{
      {"harvest", Stage::harvest}, {"build", Stage::build}, {"train", Stage::train}, {"eval", Stage::eval}};
  std::map<std::string, CLI::App*> cmds;
  for (const auto& [name, stage] : stage_cmds) {
    cmds[name] = app.add_subcommand(name, "run only the " + name + " stage (earlier stages must be complete)");
    add_common(cmds[name], common);
  }
  cmds["run"] = app.add_subcommand("run", "run every stage, reusing completed ones; dispatches on config kind");
  cmds["ablate"] = app.add_subcommand("ablate", "full run plus ablation variants");
  cmds["sweep"] = app.add_subcommand("sweep", "one run per alpha grid point");
  cmds["reduce"] = app.add_subcommand("reduce", "one run per training-set ratio plus the full fine-tuning reference");
  for (const char* name : {"run", "ablate", "sweep", "reduce"}) add_common(cmds[name], common);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "aggregate a run directory into text, CSV and SVG");
  report->add_option("run_dir", report_dir, "run directory")->required();

  std::string table_path;
  auto* table = app.add_subcommand("table", "print the shipped baseline table with recomputed deltas");
  table->add_option("path", table_path, "baseline table JSON")->required();

  std::string syn_dir, syn_root = "runs", syn_run = "synthetic";
  SyntheticTaskConfig syn;
  auto* make_syn = app.add_subcommand("make-synthetic", "write the synthetic task and a config for it");
  make_syn->add_option("dir", syn_dir, "output directory for data and config")->required();
  make_syn->add_option("--output-root", syn_root, "output_root written into the config");
  make_syn->add_option("--run-id", syn_run, "run_id written into the config");
  make_syn->add_option("--train-items", syn.train_items);
  make_syn->add_option("--test-items", syn.test_items);
  make_syn->add_option("--keys", syn.keys);
  make_syn->add_option("--seed", syn.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (report->parsed()) {
      auto out = write_report(report_dir);
      std::cout << out.text;
      for (const auto& w : out.written) std::cerr << "wrote " << w << "\n";
      return 0;
    }
    if (table->parsed()) {
      std::cout << render_baseline_table(BaselineTable::load(table_path));
      return 0;
    }
    if (make_syn->parsed()) {
      auto config = synthetic_experiment(syn_dir, syn_root, syn_run, syn);
      auto path = std::filesystem::path(syn_dir) / "config.json";
      util::write_json(path, to_json(config));
      std::cout << path.string() << "\n";
      return 0;
    }

    auto config = load_experiment_config(common.config, common.overrides);
    auto opts = run_options(common);
    for (const auto& [name, stage] : stage_cmds)
      if (cmds[name]->parsed()) {
        opts.first = opts.last = stage;
        print_run(run_single(config, opts));
        return 0;
      }
    if (cmds["run"]->parsed()) {
      if (config.kind == ExperimentKind::single) {
        print_run(run_single(config, opts));
      } else {
        std::cout << run_experiment(config, opts).dump(2) << "\n";
      }
      return 0;
    }
    if (cmds["ablate"]->parsed()) {
      std::cout << run_ablation(config, opts).summary.dump(2) << "\n";
      return 0;
    }
    if (cmds["sweep"]->parsed()) {
      std::cout << run_alpha_sweep(config, opts).summary.dump(2) << "\n";
      return 0;
    }
    if (cmds["reduce"]->parsed()) {
      std::cout << run_reduction(config, opts).summary.dump(2) << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return 0;
}
