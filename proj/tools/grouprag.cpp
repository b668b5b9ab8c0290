// grouprag: index a corpus, run the staged pipeline, evaluate traces,
// run ablations and train the selection policy.

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <optional>

#include "grouprag/harness.hpp"

namespace fs = std::filesystem;
using namespace grouprag;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config, "Run config (JSON)");
  if (needs_config) opt->required();
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--jobs", c.jobs, "Questions processed in parallel")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "Output path");
  cmd->add_flag("--force", c.force, "Overwrite existing outputs");
}

config::RunConfig load_config(const Common& c) {
  auto cfg = config::RunConfig::load(c.config);
  if (c.seed) cfg.seed = c.seed;
  if (c.jobs) cfg.jobs = *c.jobs;
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

fs::path output_dir(const config::RunConfig& cfg) {
  if (cfg.output_dir.empty()) throw InputError("no output directory: set output_dir or pass --out");
  return cfg.output_dir;
}

pipeline::AblationSet plain_switches(const config::RunConfig& cfg) {
  if (cfg.ablation.protocol != config::AblationProtocol::none) return {};
  return {cfg.ablation.switches.begin(), cfg.ablation.switches.end()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grouped retrieval-augmented reasoning pipeline"};
  app.require_subcommand(1);

  Common common;

  auto* index = app.add_subcommand("index", "Chunk a corpus and build a BM25 index");
  std::string corpus;
  retrieval::ChunkingConfig chunking;
  add_common(index, common, false);
  index->add_option("--corpus", corpus, "Corpus directory (.txt / .jsonl)")->required();
  index->add_option("--max-tokens", chunking.max_tokens, "Chunk size in tokens");
  index->add_option("--overlap", chunking.overlap_tokens, "Token overlap between chunks");

  auto* run = app.add_subcommand("run", "Run every dataset question through the pipeline");
  add_common(run, common, true);

  auto* eval_cmd = app.add_subcommand("eval", "Recompute the stage report from persisted traces");
  std::string traces;
  std::string dataset;
  add_common(eval_cmd, common, true);
  eval_cmd->add_option("--traces", traces, "Run directory or trace directory")->required();
  eval_cmd->add_option("--dataset", dataset, "Dataset override");

  auto* ablate = app.add_subcommand("ablate", "Leave-one-out or progressive ablation");
  std::string protocol;
  add_common(ablate, common, true);
  ablate->add_option("--protocol", protocol, "leave_one_out | progressive (overrides config)");

  auto* train = app.add_subcommand("train-policy", "Train the conclusion selection policy");
  std::string instances;
  harness::TrainPolicyOptions topts;
  add_common(train, common, false);
  train->add_option("--instances", instances, "Instance JSONL")->required();
  train->add_option("--epochs", topts.train.epochs, "Passes over the instances");
  train->add_option("--lr", topts.train.learning_rate, "Learning rate");
  train->add_option("--rollouts", topts.train.rollouts, "Rollouts per instance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (index->parsed()) {
      if (common.out.empty()) throw InputError("index needs --out");
      harness::cmd_index(corpus, common.out, chunking, common.force, std::cerr);
    } else if (run->parsed()) {
      auto cfg = load_config(common);
      auto out = harness::cmd_run(cfg, plain_switches(cfg), output_dir(cfg), std::cerr);
      std::cout << eval::render_table({{"GroupRAG", out.report}});
      // Traces are still written, but a run where nothing succeeded is a failure.
      const bool all_failed = !out.traces.empty() && std::all_of(out.traces.begin(), out.traces.end(),
                                                                 [](const auto& t) { return t.failed(); });
      if (all_failed) {
        std::cerr << "failure: every question failed; see traces for the stage errors\n";
        return 2;
      }
    } else if (eval_cmd->parsed()) {
      auto cfg = load_config(common);
      auto report = harness::cmd_eval(cfg, traces, dataset, std::cerr);
      auto body = eval::report_to_json(report).dump(2) + "\n";
      if (!common.out.empty()) harness::write_file(common.out, body);
      std::cout << body;
    } else if (ablate->parsed()) {
      auto cfg = load_config(common);
      if (!protocol.empty()) cfg.ablation.protocol = config::protocol_from_string(protocol);
      std::cout << harness::cmd_ablate(cfg, output_dir(cfg), std::cerr).table;
    } else if (train->parsed()) {
      if (common.out.empty()) throw InputError("train-policy needs --out");
      topts.train.seed = common.seed.value_or(0);
      topts.force = common.force;
      harness::cmd_train_policy(instances, common.out, topts, std::cerr);
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
