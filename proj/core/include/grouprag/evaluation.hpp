#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouprag/gateway.hpp"
#include "grouprag/pipeline.hpp"
#include "grouprag/wif_policy.hpp"

namespace grouprag::eval {

struct PrfScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  static PrfScores from(double precision, double recall);
  friend bool operator==(const PrfScores&, const PrfScores&) = default;
};

/// Greedy one-to-one keypoint matching: candidate pairs with token F1 at or
/// above `threshold` are taken in descending F1 order (ties: lower predicted
/// index, then lower gold index). Returns (pred index, gold index) pairs.
std::vector<std::pair<int, int>> match_keypoints(const std::vector<std::string>& predicted,
                                                 const std::vector<std::string>& gold,
                                                 double threshold = 0.6);

/// Both empty: all 1. Exactly one empty: all 0.
PrfScores extraction_prf(const std::vector<std::string>& predicted, const std::vector<std::string>& gold,
                         double threshold = 0.6);

/// item id -> cluster id
using Partition = std::map<std::string, std::string>;

/// BCubed precision / recall averaged over items; F1 is the harmonic mean of
/// the two averages. Throws InputError when the item universes differ.
PrfScores bcubed(const Partition& predicted, const Partition& gold);

/// Mean over items of the per-item BCubed F1 (alternative aggregation).
double bcubed_item_f1(const Partition& predicted, const Partition& gold);

struct JudgeVerdict {
  bool correct = false;
  bool flagged = false;  // verdict token not found
};

/// nullopt when the judge backend failed; the item is then skipped.
std::optional<JudgeVerdict> judge_local(const pipeline::LocalConclusion& conclusion,
                                        const pipeline::Question& question,
                                        const retrieval::Index* index, const pipeline::StageContext& ctx);

/// First CORRECT / INCORRECT token in the text. nullopt when neither appears.
std::optional<bool> parse_verdict(std::string_view text);

/// Throws InputError for an empty list or a qid without gold.
double answer_accuracy(const std::vector<pipeline::PipelineTrace>& traces,
                       const std::map<std::string, std::string>& golds);

/// Role labels for a trace's conclusions from the question's role patterns,
/// falling back to the judge for conclusions no pattern covers. nullopt when a
/// role cannot be established.
std::optional<policy::RoleLabels> resolve_roles(const pipeline::PipelineTrace& trace,
                                                const pipeline::Question& question,
                                                const pipeline::StageContext* judge, bool* flagged);

template <typename T>
struct Metric {
  std::optional<T> value;  // nullopt renders as "n/a"
  int n = 0;               // questions contributing
};

struct StageMetrics {
  Metric<PrfScores> extract;
  Metric<PrfScores> group;
  Metric<double> local_accuracy;  // fraction in [0, 1]
  Metric<double> global_wif;
  Metric<double> answer_accuracy;
  int n_questions = 0;
  int failed_traces = 0;
  int judge_flagged = 0;
  int judge_skipped = 0;
  std::vector<std::string> missing;  // dataset qids without a trace
  std::vector<std::string> orphans;  // traces without a dataset entry
};

struct ReportOptions {
  const pipeline::StageContext* judge = nullptr;  // nullptr disables judge-backed metrics
  const retrieval::Index* index = nullptr;         // for evidence text in judge prompts
  policy::WifParams wif;
  double match_threshold = 0.6;
};

StageMetrics stage_report(const std::vector<pipeline::PipelineTrace>& traces,
                          const std::vector<pipeline::Question>& questions, const ReportOptions& options);

nlohmann::json report_to_json(const StageMetrics& metrics);

/// Header plus one row per entry, columns
/// Extract F1 | Group F1 | Local Acc (%) | Global WIF | Answer Acc (%).
/// `delta` adds the Acc. Delta (%) column when provided.
std::string render_table(const std::vector<std::pair<std::string, StageMetrics>>& rows,
                         const std::vector<std::optional<double>>* delta = nullptr);

}  // namespace grouprag::eval
