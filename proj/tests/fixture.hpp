#pragma once

#include <fstream>
#include <memory>

#include <nlohmann/json.hpp>

#include "grouprag/gateway.hpp"
#include "grouprag/pipeline.hpp"
#include "grouprag/retrieval.hpp"
#include "support.hpp"

namespace testing {

/// The five-question medical fixture under fixtures/medqa_mini, wired up the
/// way the harness does it.
struct MiniFixture {
  std::filesystem::path dir = kFixtures / "medqa_mini";
  grouprag::retrieval::Index index;
  grouprag::llm::PromptLibrary prompts = grouprag::llm::PromptLibrary::builtin();
  grouprag::llm::Gateway trained{std::make_shared<grouprag::llm::MockBackend>(
      grouprag::llm::MockScript::load(dir / "trained.jsonl"), "trained")};
  grouprag::llm::Gateway base{std::make_shared<grouprag::llm::MockBackend>(
      grouprag::llm::MockScript::load(dir / "base.jsonl"), "base")};
  std::vector<grouprag::pipeline::Question> questions = grouprag::pipeline::load_dataset(dir / "dataset.jsonl");

  MiniFixture() {
    index = grouprag::retrieval::build_index(
        grouprag::retrieval::ingest_corpus(dir / "corpus", grouprag::retrieval::ChunkingConfig{}));
  }

  grouprag::pipeline::PipelineDeps deps(std::uint64_t seed = 42) const {
    grouprag::pipeline::SelectionOptions selection;
    selection.mode = grouprag::pipeline::SelectorMode::llm;
    grouprag::pipeline::RetrievalSettings retrieval;
    retrieval.k_keypoint = 3;
    retrieval.k_group = 4;
    retrieval.k_option = 2;
    return {index, trained, base, prompts, grouprag::pipeline::GroupingMode::llm, selection, retrieval, seed, "test"};
  }
};

/// Gateway over a single in-memory mock script.
inline grouprag::llm::Gateway script_gateway(const std::string& jsonl) {
  return grouprag::llm::Gateway(
      std::make_shared<grouprag::llm::MockBackend>(grouprag::llm::MockScript::parse_jsonl(jsonl), "inline"));
}


/// Report keys (report_to_json) of the metrics computed strictly before the
/// stage a switch acts on.
inline std::vector<std::string> upstream_metric_keys(grouprag::pipeline::Switch s) {
  static const std::vector<std::string> by_stage = {"extract", "group", "local_accuracy", "global_wif",
                                                    "answer_accuracy"};
  const auto stage = static_cast<std::size_t>(grouprag::pipeline::stage_of(s));
  return {by_stage.begin(), by_stage.begin() + static_cast<std::ptrdiff_t>(stage)};
}

/// The fixture config with absolute paths, optionally restricted to the first
/// `questions` dataset lines; written into `dir`.
inline std::filesystem::path write_fixture_config(const std::filesystem::path& dir, int questions = 5,
                                                  const nlohmann::json& overrides = nlohmann::json::object()) {
  const auto src = kFixtures / "medqa_mini";
  auto doc = nlohmann::json::parse(read_text(src / "config.json"));
  std::filesystem::create_directories(dir);
  std::ifstream in(src / "dataset.jsonl");
  std::ofstream out(dir / "dataset.jsonl");
  std::string line;
  for (int i = 0; i < questions && std::getline(in, line); ++i) out << line << "\n";
  out.close();
  doc["dataset"] = (dir / "dataset.jsonl").string();
  doc["corpus"] = (src / "corpus").string();
  doc["backend"]["script"] = (src / "trained.jsonl").string();
  doc["base_backend"]["script"] = (src / "base.jsonl").string();
  doc["judge_backend"]["script"] = (src / "judge.jsonl").string();
  doc.merge_patch(overrides);
  std::ofstream(dir / "config.json") << doc.dump(2);
  return dir / "config.json";
}

}  // namespace testing
