#include <fstream>
#include <set>

#include "grouprag/pipeline.hpp"
#include "grouprag/text.hpp"

namespace grouprag::pipeline {

using nlohmann::json;
using retrieval::hits_from_json;
using retrieval::hits_to_json;

// Questions ------------------------------------------------------------------------

json question_to_json(const Question& q) {
  json doc = {{"id", q.id}, {"stem", q.stem}, {"options", q.options}};
  if (q.gold_option) doc["gold"] = *q.gold_option;
  json ann = json::object();
  if (q.annotations.keypoints) ann["keypoints"] = *q.annotations.keypoints;
  if (q.annotations.grouping) ann["grouping"] = *q.annotations.grouping;
  if (q.annotations.roles) {
    json roles = json::array();
    for (const auto& r : *q.annotations.roles) roles.push_back({{"pattern", r.pattern}, {"role", policy::to_string(r.role)}});
    ann["roles"] = std::move(roles);
  }
  if (!ann.empty()) doc["annotations"] = std::move(ann);
  return doc;
}

Question question_from_json(const json& doc) {
  if (!doc.is_object()) throw InputError("question record must be an object");
  Question q;
  try {
    q.id = doc.at("id").is_string() ? doc.at("id").get<std::string>() : doc.at("id").dump();
    q.stem = doc.at("stem").get<std::string>();
    q.options = doc.at("options").get<std::map<std::string, std::string>>();
    if (doc.contains("gold") && !doc["gold"].is_null()) q.gold_option = doc["gold"].get<std::string>();
    if (doc.contains("annotations") && doc["annotations"].is_object()) {
      const auto& ann = doc["annotations"];
      if (ann.contains("keypoints")) q.annotations.keypoints = ann["keypoints"].get<std::vector<std::string>>();
      if (ann.contains("grouping")) q.annotations.grouping = ann["grouping"].get<std::vector<std::vector<int>>>();
      if (ann.contains("roles")) {
        std::vector<RolePattern> roles;
        for (const auto& r : ann["roles"]) {
          roles.push_back({r.at("pattern").get<std::string>(), policy::role_from_string(r.at("role").get<std::string>())});
        }
        q.annotations.roles = std::move(roles);
      }
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed question: ") + e.what());
  }
  q.validate();
  return q;
}

std::vector<Question> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read dataset " + path.string());
  std::vector<Question> out;
  std::map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    Question q;
    try {
      q = question_from_json(json::parse(line));
    } catch (const json::parse_error& e) {
      throw InputError(where + "malformed JSON: " + e.what());
    } catch (const InputError& e) {
      throw InputError(where + e.what());
    }
    auto [it, fresh] = seen.emplace(q.id, line_no);
    if (!fresh) {
      throw InputError(where + "duplicate question id '" + q.id + "' (first seen on line " +
                       std::to_string(it->second) + ")");
    }
    out.push_back(std::move(q));
  }
  return out;
}

// Traces ------------------------------------------------------------------------------

namespace {

template <typename T, typename F>
json optional_json(const std::optional<T>& value, F&& convert) {
  return value ? convert(*value) : json(nullptr);
}

std::string bits(const policy::Selection& s) {
  std::string out;
  for (auto b : s) out.push_back(b ? '1' : '0');
  return out;
}

policy::Selection from_bits(const std::string& s) {
  policy::Selection out;
  for (char c : s) {
    if (c != '0' && c != '1') throw InputError("rollout bit string contains '" + std::string(1, c) + "'");
    out.push_back(c == '1' ? 1 : 0);
  }
  return out;
}

json grouping_to_json(const GroupingOutput& g) {
  json hits = json::array();
  for (const auto& h : g.keypoint_hits) hits.push_back(hits_to_json(h));
  json groups = json::array();
  for (const auto& grp : g.groups) {
    groups.push_back({{"group_id", grp.group_id},
                      {"keypoint_indices", grp.keypoint_indices},
                      {"label", grp.label},
                      {"evidence", hits_to_json(grp.evidence)}});
  }
  return {{"mode", to_string(g.mode)}, {"fallback", g.fallback}, {"keypoint_hits", std::move(hits)},
          {"groups", std::move(groups)}};
}

GroupingOutput grouping_from_json(const json& doc) {
  GroupingOutput g;
  g.mode = grouping_mode_from_string(doc.at("mode").get<std::string>());
  g.fallback = doc.at("fallback").get<bool>();
  for (const auto& h : doc.at("keypoint_hits")) g.keypoint_hits.push_back(hits_from_json(h));
  for (const auto& grp : doc.at("groups")) {
    g.groups.push_back({grp.at("group_id").get<int>(), grp.at("keypoint_indices").get<std::vector<int>>(),
                        grp.at("label").get<std::string>(), hits_from_json(grp.at("evidence"))});
  }
  return g;
}

json conclusion_to_json(const LocalConclusion& c) {
  return {{"group_id", c.group_id},
          {"text", c.text},
          {"cited", c.cited_chunk_ids},
          {"role_label", c.role_label ? json(policy::to_string(*c.role_label)) : json(nullptr)},
          {"evidence", hits_to_json(c.evidence)},
          {"degraded", c.degraded},
          {"dropped_citations", c.dropped_citations}};
}

LocalConclusion conclusion_from_json(const json& doc) {
  LocalConclusion c;
  c.group_id = doc.at("group_id").get<int>();
  c.text = doc.at("text").get<std::string>();
  c.cited_chunk_ids = doc.at("cited").get<std::vector<std::string>>();
  if (!doc.at("role_label").is_null()) c.role_label = policy::role_from_string(doc["role_label"].get<std::string>());
  c.evidence = hits_from_json(doc.at("evidence"));
  c.degraded = doc.at("degraded").get<bool>();
  c.dropped_citations = doc.at("dropped_citations").get<int>();
  return c;
}

json selection_to_json(const SelectionOutput& s) {
  json rollouts = json::array();
  for (const auto& r : s.rollouts) rollouts.push_back(bits(r));
  return {{"selector", to_string(s.selector)},
          {"features", s.features},
          {"probs", s.probs},
          {"selected", s.selected},
          {"rescued", s.rescued},
          {"fallback", s.fallback},
          {"rollouts", std::move(rollouts)},
          {"rollout_log_probs", s.rollout_log_probs}};
}

SelectionOutput selection_from_json(const json& doc) {
  SelectionOutput s;
  s.selector = selector_mode_from_string(doc.at("selector").get<std::string>());
  s.features = doc.at("features").get<policy::FeatureMatrix>();
  s.probs = doc.at("probs").get<std::vector<double>>();
  s.selected = doc.at("selected").get<std::vector<int>>();
  s.rescued = doc.at("rescued").get<bool>();
  s.fallback = doc.at("fallback").get<bool>();
  for (const auto& r : doc.at("rollouts")) s.rollouts.push_back(from_bits(r.get<std::string>()));
  s.rollout_log_probs = doc.at("rollout_log_probs").get<std::vector<double>>();
  return s;
}

json answer_to_json(const AlignedAnswer& a) {
  json evidence = json::object();
  for (const auto& [letter, hits] : a.option_evidence) evidence[letter] = hits_to_json(hits);
  return {{"chosen_option", a.chosen_option},
          {"per_option_analysis", a.per_option_analysis},
          {"rationale", a.rationale},
          {"option_evidence", std::move(evidence)},
          {"regex_fallback", a.regex_fallback}};
}

AlignedAnswer answer_from_json(const json& doc) {
  AlignedAnswer a;
  a.chosen_option = doc.at("chosen_option").get<std::string>();
  a.per_option_analysis = doc.at("per_option_analysis").get<std::map<std::string, std::string>>();
  a.rationale = doc.at("rationale").get<std::string>();
  for (const auto& [letter, hits] : doc.at("option_evidence").items()) a.option_evidence[letter] = hits_from_json(hits);
  a.regex_fallback = doc.at("regex_fallback").get<bool>();
  return a;
}

}  // namespace

json trace_to_json(const PipelineTrace& t) {
  json keypoints = json::array();
  for (const auto& kp : t.keypoints) {
    keypoints.push_back({{"index", kp.index},
                         {"text", kp.text},
                         {"source_span", kp.source_span ? json::array({kp.source_span->first, kp.source_span->second})
                                                        : json(nullptr)}});
  }
  json conclusions = json::array();
  for (const auto& c : t.conclusions) conclusions.push_back(conclusion_to_json(c));

  return {
      {"question_id", t.question_id},
      {"seed", t.seed},
      {"config_fingerprint", t.config_fingerprint},
      {"failed", t.failed()},
      {"failed_at", t.failed_at ? json(to_string(*t.failed_at)) : json(nullptr)},
      {"error", t.error},
      {"keypoints", std::move(keypoints)},
      {"grouping", optional_json(t.grouping, grouping_to_json)},
      {"conclusions", std::move(conclusions)},
      {"selection", optional_json(t.selection, selection_to_json)},
      {"global_chain", optional_json(t.global_chain,
                                     [](const GlobalChain& g) {
                                       return json{{"selected_conclusion_ids", g.selected_conclusion_ids},
                                                   {"chain_text", g.chain_text}};
                                     })},
      {"aligned_answer", optional_json(t.aligned_answer, answer_to_json)},
      {"warnings", t.warnings},
  };
}

PipelineTrace trace_from_json(const json& doc) {
  try {
    PipelineTrace t;
    t.question_id = doc.at("question_id").get<std::string>();
    t.seed = doc.at("seed").get<std::uint64_t>();
    t.config_fingerprint = doc.at("config_fingerprint").get<std::string>();
    if (!doc.at("failed_at").is_null()) t.failed_at = stage_from_string(doc["failed_at"].get<std::string>());
    t.error = doc.at("error").get<std::string>();
    for (const auto& kp : doc.at("keypoints")) {
      Keypoint k;
      k.index = kp.at("index").get<int>();
      k.text = kp.at("text").get<std::string>();
      if (!kp.at("source_span").is_null()) k.source_span = std::pair{kp["source_span"][0].get<int>(), kp["source_span"][1].get<int>()};
      t.keypoints.push_back(std::move(k));
    }
    if (!doc.at("grouping").is_null()) t.grouping = grouping_from_json(doc["grouping"]);
    for (const auto& c : doc.at("conclusions")) t.conclusions.push_back(conclusion_from_json(c));
    if (!doc.at("selection").is_null()) t.selection = selection_from_json(doc["selection"]);
    if (!doc.at("global_chain").is_null()) {
      const auto& g = doc["global_chain"];
      t.global_chain = GlobalChain{g.at("selected_conclusion_ids").get<std::vector<int>>(),
                                   g.at("chain_text").get<std::string>()};
    }
    if (!doc.at("aligned_answer").is_null()) t.aligned_answer = answer_from_json(doc["aligned_answer"]);
    t.warnings = doc.at("warnings").get<std::vector<std::string>>();
    return t;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed trace: ") + e.what());
  }
}

std::string serialize_trace(const PipelineTrace& trace) {
  return trace_to_json(trace).dump(2) + "\n";
}

}  // namespace grouprag::pipeline
