#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouprag/error.hpp"
#include "grouprag/gateway.hpp"
#include "grouprag/retrieval.hpp"
#include "grouprag/wif_policy.hpp"

namespace grouprag::pipeline {

using retrieval::RankedHits;

/// The five stages in execution order.
enum class Stage { extract, group, local, global, align };

std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view name);
inline constexpr int kStageCount = 5;

class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& what) : Error(what), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

// ---------------------------------------------------------------------------
// Domain types

/// A conclusion whose text contains `pattern` (case-insensitive) gets `role`.
struct RolePattern {
  std::string pattern;
  policy::Role role = policy::Role::noise;
  friend bool operator==(const RolePattern&, const RolePattern&) = default;
};

struct GoldAnnotations {
  std::optional<std::vector<std::string>> keypoints;
  /// Partition of gold keypoint indices.
  std::optional<std::vector<std::vector<int>>> grouping;
  std::optional<std::vector<RolePattern>> roles;
  friend bool operator==(const GoldAnnotations&, const GoldAnnotations&) = default;
};

struct Question {
  std::string id;
  std::string stem;
  std::map<std::string, std::string> options;  // letter -> text
  std::optional<std::string> gold_option;
  GoldAnnotations annotations;

  void validate() const;  // throws InputError
  friend bool operator==(const Question&, const Question&) = default;
};

struct Keypoint {
  int index = 0;
  std::string text;
  std::optional<std::pair<int, int>> source_span;  // [start, end) in stem
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct KeypointGroup {
  int group_id = 0;
  std::vector<int> keypoint_indices;  // ascending
  std::string label;
  RankedHits evidence;  // group-level retrieval
  friend bool operator==(const KeypointGroup&, const KeypointGroup&) = default;
};

struct LocalConclusion {
  int group_id = 0;
  std::string text;
  std::vector<std::string> cited_chunk_ids;
  std::optional<policy::Role> role_label;
  RankedHits evidence;  // what the reasoning step was shown
  bool degraded = false;
  int dropped_citations = 0;
  friend bool operator==(const LocalConclusion&, const LocalConclusion&) = default;
};

struct GlobalChain {
  std::vector<int> selected_conclusion_ids;  // ascending
  std::string chain_text;
  friend bool operator==(const GlobalChain&, const GlobalChain&) = default;
};

struct AlignedAnswer {
  std::string chosen_option;
  std::map<std::string, std::string> per_option_analysis;
  std::string rationale;
  std::map<std::string, RankedHits> option_evidence;
  bool regex_fallback = false;
  friend bool operator==(const AlignedAnswer&, const AlignedAnswer&) = default;
};

enum class GroupingMode { llm, deterministic };
enum class SelectorMode { policy, llm, all };

std::string_view to_string(GroupingMode mode);
std::string_view to_string(SelectorMode mode);
GroupingMode grouping_mode_from_string(std::string_view name);
SelectorMode selector_mode_from_string(std::string_view name);

struct GroupingOutput {
  GroupingMode mode = GroupingMode::deterministic;
  bool fallback = false;  // llm mode fell back to the deterministic algorithm
  std::vector<RankedHits> keypoint_hits;
  std::vector<KeypointGroup> groups;
  friend bool operator==(const GroupingOutput&, const GroupingOutput&) = default;
};

struct SelectionOutput {
  SelectorMode selector = SelectorMode::policy;
  policy::FeatureMatrix features;
  std::vector<double> probs;
  std::vector<int> selected;  // ascending
  bool rescued = false;       // empty decision replaced by the argmax
  bool fallback = false;      // llm selector response unusable
  /// Exploration draws from the policy probabilities; diagnostics only, the
  /// decision above never depends on them.
  std::vector<policy::Selection> rollouts;
  std::vector<double> rollout_log_probs;
  friend bool operator==(const SelectionOutput&, const SelectionOutput&) = default;
};

struct PipelineTrace {
  std::string question_id;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::optional<Stage> failed_at;
  std::string error;

  std::vector<Keypoint> keypoints;
  std::optional<GroupingOutput> grouping;
  std::vector<LocalConclusion> conclusions;  // conclusion id == position == group id
  std::optional<SelectionOutput> selection;
  std::optional<GlobalChain> global_chain;
  std::optional<AlignedAnswer> aligned_answer;
  std::vector<std::string> warnings;

  /// Wall-clock milliseconds per stage. Kept out of the trace JSON so traces
  /// stay byte-identical across runs; the run manifest records them.
  std::map<std::string, double> stage_timings_ms;

  bool failed() const noexcept { return failed_at.has_value(); }
  friend bool operator==(const PipelineTrace&, const PipelineTrace&) = default;
};

// ---------------------------------------------------------------------------
// Ablation switches

enum class Switch { ext_train, gro_train, gro_rag, loc_train, loc_rag, glo_train, ans_train, ans_rag };

/// Fixed pipeline order: Ext.Train, Gro.Train, Gro.RAG, Loc.Train, Loc.RAG,
/// Glo.Train, Ans.Train, Ans.RAG.
const std::vector<Switch>& all_switches();
std::string_view to_string(Switch s);
Switch switch_from_string(std::string_view name);
Stage stage_of(Switch s);

using AblationSet = std::set<Switch>;

// ---------------------------------------------------------------------------
// Stage operations

struct RetrievalSettings {
  int k_keypoint = 5;
  int k_group = 8;
  int k_option = 3;
  double overlap_threshold = 0.4;
  int chain_terms = 8;
};

/// Everything a stage needs to talk to a model.
struct StageContext {
  const llm::Gateway& gateway;
  const llm::PromptLibrary& prompts;
  std::uint64_t seed = 0;
  std::vector<std::string>* warnings = nullptr;
};

std::vector<Keypoint> extract_keypoints(const Question& question, const StageContext& ctx);

/// Validates that `groups` partitions 0..n-1 (disjoint, complete, non-empty).
bool is_partition(const std::vector<std::vector<int>>& groups, std::size_t n);

/// Connected components of the graph linking keypoints whose hit overlap is
/// at least `threshold`. Components are ordered by their smallest index.
std::vector<std::vector<int>> overlap_components(const std::vector<RankedHits>& hits, double threshold);

/// Parses an llm grouping response into a partition of n keypoints plus
/// labels; nullopt when the JSON is unusable or not a valid partition.
std::optional<std::vector<std::pair<std::string, std::vector<int>>>>
parse_partition_response(std::string_view response, std::size_t n);

struct GroupingOptions {
  GroupingMode mode = GroupingMode::deterministic;
  bool use_retrieval = true;  // keypoint-level hits
  RetrievalSettings retrieval;
};

GroupingOutput group_keypoints(const std::vector<Keypoint>& keypoints, const Question& question,
                               const retrieval::Index& index, const StageContext& ctx,
                               const GroupingOptions& options);

LocalConclusion local_reason(const KeypointGroup& group, const std::vector<Keypoint>& keypoints,
                             const Question& question, const retrieval::Index& index,
                             const StageContext& ctx);

/// Eight per-conclusion features: group size, mean and max evidence score,
/// log conclusion length, overlap with the stem, max overlap with the other
/// conclusions, citation count, degraded flag.
inline constexpr std::size_t kFeatureDim = 8;
policy::FeatureMatrix conclusion_features(const std::vector<LocalConclusion>& conclusions,
                                          const std::vector<KeypointGroup>& groups,
                                          const Question& question);

struct SelectionOptions {
  SelectorMode mode = SelectorMode::policy;
  policy::PolicyParams policy = policy::PolicyParams::zeros(kFeatureDim);
  int diagnostic_rollouts = 8;
};

SelectionOutput select_conclusions(const std::vector<LocalConclusion>& conclusions,
                                   const std::vector<KeypointGroup>& groups, const Question& question,
                                   const StageContext& ctx, const SelectionOptions& options);

GlobalChain synthesize_global(const std::vector<LocalConclusion>& conclusions,
                              const std::vector<int>& selected, const Question& question,
                              const StageContext& ctx);

/// Finds a standalone option letter in free text, or nullopt when none or
/// several distinct letters qualify.
std::optional<std::string> scan_option_letter(std::string_view text, const Question& question);

AlignedAnswer align_answer(const GlobalChain& chain, const Question& question,
                           const retrieval::Index& index, const StageContext& ctx,
                           int k_option = 3, int chain_terms = 8, bool use_retrieval = true);

struct PipelineDeps {
  const retrieval::Index& index;
  const llm::Gateway& trained;
  const llm::Gateway& base;
  const llm::PromptLibrary& prompts;
  GroupingMode grouping_mode = GroupingMode::deterministic;
  SelectionOptions selection;
  RetrievalSettings retrieval;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
};

/// Runs the five stages in order. A stage failure is recorded in the trace
/// with every upstream output preserved; it never throws StageError.
PipelineTrace run_pipeline(const Question& question, const PipelineDeps& deps,
                           const AblationSet& ablation = {});

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json question_to_json(const Question& question);
Question question_from_json(const nlohmann::json& doc);

/// Throws InputError naming the line on malformed records or duplicate ids.
std::vector<Question> load_dataset(const std::filesystem::path& path);

nlohmann::json trace_to_json(const PipelineTrace& trace);
PipelineTrace trace_from_json(const nlohmann::json& doc);
std::string serialize_trace(const PipelineTrace& trace);  // stable, pretty-printed

}  // namespace grouprag::pipeline
