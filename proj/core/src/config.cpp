#include "grouprag/config.hpp"

#include <fstream>
#include <sstream>

#include "grouprag/error.hpp"
#include "grouprag/text.hpp"

namespace grouprag::config {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(AblationProtocol protocol) {
  switch (protocol) {
    case AblationProtocol::none: return "none";
    case AblationProtocol::leave_one_out: return "leave_one_out";
    case AblationProtocol::progressive: return "progressive";
  }
  return "none";
}

AblationProtocol protocol_from_string(std::string_view name) {
  if (name == "none") return AblationProtocol::none;
  if (name == "leave_one_out") return AblationProtocol::leave_one_out;
  if (name == "progressive") return AblationProtocol::progressive;
  throw InputError("ablation protocol must be none, leave_one_out or progressive");
}

namespace {

fs::path resolve(const fs::path& base, const std::string& value) {
  fs::path p(value);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

std::string portable(const fs::path& p, const fs::path& base) {
  if (p.empty()) return "";
  auto rel = p.lexically_relative(base);
  return (rel.empty() ? p : rel).generic_string();
}

}  // namespace

RunConfig RunConfig::from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw InputError("config must be a JSON object");
  RunConfig cfg;
  cfg.base_dir = base_dir;
  try {
    auto path_of = [&](const char* key) { return doc.contains(key) ? resolve(base_dir, doc[key].get<std::string>()) : fs::path(); };
    cfg.dataset_path = path_of("dataset");
    cfg.corpus_path = path_of("corpus");
    cfg.index_path = path_of("index");
    cfg.templates_dir = path_of("templates_dir");
    cfg.policy_path = path_of("policy");
    cfg.output_dir = path_of("output_dir");

    if (doc.contains("chunking")) {
      cfg.chunking.max_tokens = doc["chunking"].value("max_tokens", cfg.chunking.max_tokens);
      cfg.chunking.overlap_tokens = doc["chunking"].value("overlap_tokens", cfg.chunking.overlap_tokens);
    }
    if (!doc.contains("backend")) throw InputError("config needs a 'backend' section");
    cfg.backend = llm::BackendConfig::from_json(doc["backend"], base_dir);
    if (doc.contains("base_backend")) cfg.base_backend = llm::BackendConfig::from_json(doc["base_backend"], base_dir);
    if (doc.contains("judge_backend")) cfg.judge_backend = llm::BackendConfig::from_json(doc["judge_backend"], base_dir);
    if (doc.contains("stage_backends")) {
      for (const auto& [stage, backend] : doc["stage_backends"].items()) {
        cfg.stage_backends[llm::stage_tag_from_string(stage)] = llm::BackendConfig::from_json(backend, base_dir);
      }
    }

    if (doc.contains("grouping_mode")) cfg.grouping_mode = pipeline::grouping_mode_from_string(doc["grouping_mode"].get<std::string>());
    if (doc.contains("selector")) cfg.selector = pipeline::selector_mode_from_string(doc["selector"].get<std::string>());
    if (doc.contains("retrieval")) {
      const auto& r = doc["retrieval"];
      cfg.retrieval.k_keypoint = r.value("k_keypoint", cfg.retrieval.k_keypoint);
      cfg.retrieval.k_group = r.value("k_group", cfg.retrieval.k_group);
      cfg.retrieval.k_option = r.value("k_option", cfg.retrieval.k_option);
      cfg.retrieval.overlap_threshold = r.value("overlap_threshold", cfg.retrieval.overlap_threshold);
      cfg.retrieval.chain_terms = r.value("chain_terms", cfg.retrieval.chain_terms);
    }
    cfg.diagnostic_rollouts = doc.value("diagnostic_rollouts", cfg.diagnostic_rollouts);
    if (doc.contains("wif")) cfg.wif = policy::wif_params_from_json(doc["wif"]);
    if (doc.contains("seed") && !doc["seed"].is_null()) cfg.seed = doc["seed"].get<std::uint64_t>();
    cfg.jobs = doc.value("jobs", cfg.jobs);
    if (doc.contains("ablation")) {
      const auto& a = doc["ablation"];
      cfg.ablation.protocol = protocol_from_string(a.value("protocol", std::string("none")));
      for (const auto& s : a.value("switches", std::vector<std::string>{})) {
        cfg.ablation.switches.push_back(pipeline::switch_from_string(s));
      }
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  auto base = fs::absolute(path).parent_path();
  return from_json(doc, base);
}

void RunConfig::validate() const {
  auto must_exist = [](const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw InputError(std::string(what) + " does not exist: " + p.string());
  };
  if (dataset_path.empty()) throw InputError("config: 'dataset' is required");
  must_exist(dataset_path, "dataset");
  if (corpus_path.empty() == index_path.empty()) throw InputError("config: set exactly one of 'corpus' or 'index'");
  if (!corpus_path.empty()) must_exist(corpus_path, "corpus");
  if (!index_path.empty()) must_exist(index_path, "index");
  if (!seed) throw InputError("config: 'seed' is required");
  if (!policy_path.empty()) must_exist(policy_path, "policy");
  if (!templates_dir.empty()) must_exist(templates_dir, "templates_dir");

  auto check_backend = [&](const llm::BackendConfig& b) {
    if (b.kind == "mock") must_exist(b.script, "mock script");
  };
  check_backend(backend);
  if (base_backend) check_backend(*base_backend);
  if (judge_backend) check_backend(*judge_backend);
  for (const auto& [_, b] : stage_backends) check_backend(b);

  chunking.validate();
  wif.validate();
  if (retrieval.k_keypoint < 1 || retrieval.k_group < 1 || retrieval.k_option < 1) {
    throw InputError("config: retrieval k values must be >= 1");
  }
  if (retrieval.overlap_threshold < 0.0 || retrieval.overlap_threshold > 1.0) {
    throw InputError("config: retrieval.overlap_threshold must lie in [0, 1]");
  }
  if (retrieval.chain_terms < 0) throw InputError("config: retrieval.chain_terms must be >= 0");
  if (diagnostic_rollouts < 0) throw InputError("config: diagnostic_rollouts must be >= 0");
  if (jobs < 1) throw InputError("config: jobs must be >= 1");
}

json RunConfig::canonical(const pipeline::AblationSet& switches) const {
  json stage = json::object();
  for (const auto& [tag, b] : stage_backends) stage[std::string(llm::to_string(tag))] = b.to_json();
  json active = json::array();
  for (auto s : pipeline::all_switches()) {
    if (switches.contains(s)) active.push_back(pipeline::to_string(s));
  }
  return {
      {"dataset", portable(dataset_path, base_dir)},
      {"corpus", portable(corpus_path, base_dir)},
      {"index", portable(index_path, base_dir)},
      {"chunking", {{"max_tokens", chunking.max_tokens}, {"overlap_tokens", chunking.overlap_tokens}}},
      {"backend", backend.to_json()},
      {"base_backend", base_backend ? base_backend->to_json() : json(nullptr)},
      {"judge_backend", judge_backend ? judge_backend->to_json() : json(nullptr)},
      {"stage_backends", std::move(stage)},
      {"templates_dir", portable(templates_dir, base_dir)},
      {"grouping_mode", pipeline::to_string(grouping_mode)},
      {"selector", pipeline::to_string(selector)},
      {"policy", portable(policy_path, base_dir)},
      {"retrieval",
       {{"k_keypoint", retrieval.k_keypoint},
        {"k_group", retrieval.k_group},
        {"k_option", retrieval.k_option},
        {"overlap_threshold", retrieval.overlap_threshold},
        {"chain_terms", retrieval.chain_terms}}},
      {"diagnostic_rollouts", diagnostic_rollouts},
      {"wif", policy::wif_params_to_json(wif)},
      {"switches", std::move(active)},
  };
}

std::string RunConfig::fingerprint(const pipeline::AblationSet& switches) const {
  return text::hex64(text::fnv1a64(canonical(switches).dump()));
}

}  // namespace grouprag::config
