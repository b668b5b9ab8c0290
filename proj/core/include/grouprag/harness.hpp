#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "grouprag/config.hpp"
#include "grouprag/evaluation.hpp"
#include "grouprag/pipeline.hpp"
#include "grouprag/retrieval.hpp"
#include "grouprag/wif_policy.hpp"

namespace grouprag::harness {

/// Raised by the commands for failures that are not the user's fault.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

struct IndexSummary {
  std::size_t chunks = 0;
  std::size_t vocabulary = 0;
  std::size_t skipped_documents = 0;
};

/// ingest + build + save. Refuses to overwrite `out` unless `force`.
IndexSummary cmd_index(const std::filesystem::path& corpus, const std::filesystem::path& out,
                       const retrieval::ChunkingConfig& chunking, bool force, std::ostream& log);

struct RunOutput {
  std::vector<pipeline::PipelineTrace> traces;
  eval::StageMetrics report;
  std::string fingerprint;
};

/// Runs every dataset question through the pipeline with `switches` applied,
/// writes traces/<qid>.json, manifest.json, report.json and report.txt under
/// `out_dir`.
RunOutput cmd_run(const config::RunConfig& config, const pipeline::AblationSet& switches,
                  const std::filesystem::path& out_dir, std::ostream& log);

/// Recomputes the stage report from persisted traces.
eval::StageMetrics cmd_eval(const config::RunConfig& config, const std::filesystem::path& trace_dir,
                            const std::filesystem::path& dataset_path, std::ostream& log);

struct AblationRow {
  std::string name;  // "GroupRAG", "w/o Ext.Train", ...
  pipeline::AblationSet switches;
  std::string fingerprint;
  eval::StageMetrics report;
  std::optional<double> delta;  // progressive: accuracy change vs previous row, in points
};

struct AblationOutput {
  std::vector<AblationRow> rows;
  std::string table;
};

AblationOutput cmd_ablate(const config::RunConfig& config, const std::filesystem::path& out_dir,
                          std::ostream& log);

struct TrainPolicyOptions {
  policy::TrainConfig train;
  bool force = false;
};

/// Writes policy.json and history.csv under `out_dir`.
policy::TrainResult cmd_train_policy(const std::filesystem::path& instances,
                                     const std::filesystem::path& out_dir,
                                     const TrainPolicyOptions& options, std::ostream& log);

// Shared helpers ----------------------------------------------------------------

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& content);

/// Loads every traces/*.json (or *.json directly in `dir`).
std::vector<pipeline::PipelineTrace> load_traces(const std::filesystem::path& dir);

}  // namespace grouprag::harness
