#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "grouprag/gateway.hpp"
#include "grouprag/pipeline.hpp"
#include "grouprag/wif_policy.hpp"

namespace grouprag::config {

enum class AblationProtocol { none, leave_one_out, progressive };

std::string_view to_string(AblationProtocol protocol);
AblationProtocol protocol_from_string(std::string_view name);

struct AblationSpec {
  AblationProtocol protocol = AblationProtocol::none;
  /// Switches applied to a plain run, or the switches an ablation protocol
  /// iterates over (defaults to all eight in pipeline order).
  std::vector<pipeline::Switch> switches;
};

/// The single declarative run document. Relative paths resolve against the
/// directory of the config file.
struct RunConfig {
  std::filesystem::path dataset_path;
  std::filesystem::path corpus_path;  // either corpus or index
  std::filesystem::path index_path;
  retrieval::ChunkingConfig chunking;

  llm::BackendConfig backend;                               // trained models
  std::optional<llm::BackendConfig> base_backend;           // base models, for Train ablations
  std::optional<llm::BackendConfig> judge_backend;          // evaluation judge
  std::map<llm::StageTag, llm::BackendConfig> stage_backends;  // per-stage trained overrides
  std::filesystem::path templates_dir;

  pipeline::GroupingMode grouping_mode = pipeline::GroupingMode::deterministic;
  pipeline::SelectorMode selector = pipeline::SelectorMode::policy;
  std::filesystem::path policy_path;  // empty: zero-initialized head
  pipeline::RetrievalSettings retrieval;
  int diagnostic_rollouts = 8;

  policy::WifParams wif;
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir;
  int jobs = 1;
  AblationSpec ablation;

  std::filesystem::path base_dir;  // directory of the config file

  static RunConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);

  /// Throws InputError for missing paths, missing seed or bad values.
  void validate() const;

  /// Canonical JSON of every setting that can influence pipeline outputs
  /// except the seed and output directory, with `switches` as the active
  /// ablation set.
  nlohmann::json canonical(const pipeline::AblationSet& switches) const;
  std::string fingerprint(const pipeline::AblationSet& switches) const;
};

}  // namespace grouprag::config
