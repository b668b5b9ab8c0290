#include "grouprag/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <regex>
#include <set>

#include "grouprag/text.hpp"

namespace grouprag::pipeline {

using nlohmann::json;
using retrieval::Index;

// Enum names ---------------------------------------------------------------------

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::extract: return "extract";
    case Stage::group: return "group";
    case Stage::local: return "local";
    case Stage::global: return "global";
    case Stage::align: return "align";
  }
  return "unknown";
}

Stage stage_from_string(std::string_view name) {
  for (auto s : {Stage::extract, Stage::group, Stage::local, Stage::global, Stage::align}) {
    if (to_string(s) == name) return s;
  }
  throw InputError("unknown stage: " + std::string(name));
}

std::string_view to_string(GroupingMode mode) {
  return mode == GroupingMode::llm ? "llm" : "deterministic";
}

std::string_view to_string(SelectorMode mode) {
  switch (mode) {
    case SelectorMode::policy: return "policy";
    case SelectorMode::llm: return "llm";
    case SelectorMode::all: return "all";
  }
  return "policy";
}

GroupingMode grouping_mode_from_string(std::string_view name) {
  if (name == "llm") return GroupingMode::llm;
  if (name == "deterministic") return GroupingMode::deterministic;
  throw InputError("grouping mode must be 'llm' or 'deterministic'");
}

SelectorMode selector_mode_from_string(std::string_view name) {
  if (name == "policy") return SelectorMode::policy;
  if (name == "llm") return SelectorMode::llm;
  if (name == "all") return SelectorMode::all;
  throw InputError("selector must be 'policy', 'llm' or 'all'");
}

const std::vector<Switch>& all_switches() {
  static const std::vector<Switch> order = {Switch::ext_train, Switch::gro_train, Switch::gro_rag,
                                            Switch::loc_train, Switch::loc_rag,   Switch::glo_train,
                                            Switch::ans_train, Switch::ans_rag};
  return order;
}

std::string_view to_string(Switch s) {
  switch (s) {
    case Switch::ext_train: return "Ext.Train";
    case Switch::gro_train: return "Gro.Train";
    case Switch::gro_rag: return "Gro.RAG";
    case Switch::loc_train: return "Loc.Train";
    case Switch::loc_rag: return "Loc.RAG";
    case Switch::glo_train: return "Glo.Train";
    case Switch::ans_train: return "Ans.Train";
    case Switch::ans_rag: return "Ans.RAG";
  }
  return "?";
}

Switch switch_from_string(std::string_view name) {
  for (auto s : all_switches()) {
    if (to_string(s) == name) return s;
  }
  throw InputError("unknown ablation switch: " + std::string(name));
}

Stage stage_of(Switch s) {
  switch (s) {
    case Switch::ext_train: return Stage::extract;
    case Switch::gro_train:
    case Switch::gro_rag: return Stage::group;
    case Switch::loc_train:
    case Switch::loc_rag: return Stage::local;
    case Switch::glo_train: return Stage::global;
    case Switch::ans_train:
    case Switch::ans_rag: return Stage::align;
  }
  return Stage::extract;
}

void Question::validate() const {
  if (id.empty()) throw InputError("question id must be non-empty");
  if (options.size() < 2) throw InputError("question " + id + " needs at least two options");
  for (const auto& [letter, _] : options) {
    if (letter.empty()) throw InputError("question " + id + " has an empty option letter");
  }
  if (gold_option && !options.contains(*gold_option)) {
    throw InputError("question " + id + ": gold option " + *gold_option + " is not among the options");
  }
  if (annotations.grouping) {
    if (!annotations.keypoints) throw InputError("question " + id + ": gold grouping requires gold keypoints");
    if (!is_partition(*annotations.grouping, annotations.keypoints->size())) {
      throw InputError("question " + id + ": gold grouping is not a partition of the gold keypoints");
    }
  }
}

// Shared helpers -----------------------------------------------------------------

namespace {

constexpr std::string_view kReprompt = "\n\nYour previous reply could not be parsed. Reply with valid JSON only.";
constexpr std::size_t kSnippetChars = 400;

std::optional<json> parse_json_payload(std::string_view raw) {
  auto attempt = [](std::string_view s) -> std::optional<json> {
    auto parsed = json::parse(s, nullptr, false);
    if (parsed.is_discarded()) return std::nullopt;
    return parsed;
  };
  auto body = text::trim(raw);
  if (body.empty()) return std::nullopt;
  if (auto j = attempt(body)) return j;

  // ```json ... ``` fences
  auto fence = body.find("```");
  if (fence != std::string::npos) {
    auto start = body.find('\n', fence);
    auto end = body.find("```", fence + 3);
    if (start != std::string::npos && end != std::string::npos && end > start) {
      if (auto j = attempt(body.substr(start + 1, end - start - 1))) return j;
    }
  }
  for (auto [open, close] : {std::pair{'{', '}'}, std::pair{'[', ']'}}) {
    auto first = body.find(open);
    auto last = body.rfind(close);
    if (first != std::string::npos && last != std::string::npos && last > first) {
      if (auto j = attempt(std::string_view(body).substr(first, last - first + 1))) return j;
    }
  }
  return std::nullopt;
}

void warn(const StageContext& ctx, std::string message) {
  if (ctx.warnings) ctx.warnings->push_back(std::move(message));
}

std::string snippet(const Index& index, const std::string& chunk_id) {
  const auto* chunk = index.find(chunk_id);
  if (!chunk) return "";
  if (chunk->text.size() <= kSnippetChars) return chunk->text;
  return chunk->text.substr(0, kSnippetChars) + " ...";
}

std::string format_evidence(const Index& index, const RankedHits& hits) {
  if (hits.entries.empty()) return "(no evidence)";
  std::string out;
  for (const auto& h : hits.entries) out += "[" + h.chunk_id + "] " + snippet(index, h.chunk_id) + "\n";
  out.pop_back();
  return out;
}

std::string format_options(const Question& q) {
  std::string out;
  for (const auto& [letter, body] : q.options) out += letter + ". " + body + "\n";
  if (!out.empty()) out.pop_back();
  return out;
}

RankedHits empty_hits(std::string query, int k) {
  RankedHits hits;
  hits.query = std::move(query);
  hits.k = k;
  return hits;
}

// Retrieval for free text that may normalize to nothing (e.g. "--").
RankedHits safe_retrieve(const Index& index, const std::string& query, int k) {
  try {
    return index.retrieve(query, k);
  } catch (const InputError&) {
    return empty_hits(query, k);
  }
}

class Caller {
 public:
  Caller(const StageContext& ctx, llm::StageTag tag, const std::string& template_name, double temperature)
      : ctx_(ctx), tag_(tag), tmpl_(ctx.prompts.get(template_name)), temperature_(temperature) {}

  std::string call(const std::map<std::string, std::string>& vars, bool reprompt = false) const {
    llm::CompletionRequest req;
    req.stage_tag = tag_;
    req.system_prompt = tmpl_.system;
    req.user_prompt = llm::PromptLibrary::render(tmpl_.user, vars);
    if (reprompt) req.user_prompt += kReprompt;
    req.temperature = temperature_;
    req.seed = ctx_.seed;
    return ctx_.gateway.complete(req).text;
  }

 private:
  const StageContext& ctx_;
  llm::StageTag tag_;
  const llm::PromptTemplate& tmpl_;
  double temperature_;
};

// Calls once, and once more with a reprompt suffix when `parse` rejects the
// first reply. Returns the parsed value or nullopt plus the last raw reply.
template <typename Parse>
auto call_with_reprompt(const Caller& caller, const std::map<std::string, std::string>& vars, Parse parse,
                        std::string* last_raw = nullptr) -> decltype(parse(std::string())) {
  for (bool reprompt : {false, true}) {
    auto raw = caller.call(vars, reprompt);
    if (last_raw) *last_raw = raw;
    if (auto parsed = parse(raw)) return parsed;
  }
  return std::nullopt;
}

std::optional<std::vector<std::string>> parse_string_list(const std::string& raw) {
  auto doc = parse_json_payload(raw);
  if (!doc) return std::nullopt;
  const json* arr = &*doc;
  if (doc->is_object() && doc->contains("keypoints")) arr = &(*doc)["keypoints"];
  if (!arr->is_array()) return std::nullopt;
  std::vector<std::string> out;
  for (const auto& item : *arr) {
    if (!item.is_string()) return std::nullopt;
    out.push_back(item.get<std::string>());
  }
  return out;
}

std::optional<std::vector<int>> parse_id_list(const std::string& raw) {
  auto doc = parse_json_payload(raw);
  if (!doc) return std::nullopt;
  const json* arr = &*doc;
  if (doc->is_object() && doc->contains("selected")) arr = &(*doc)["selected"];
  if (!arr->is_array()) return std::nullopt;
  std::vector<int> out;
  for (const auto& item : *arr) {
    if (!item.is_number_integer()) return std::nullopt;
    auto v = item.get<long long>();
    if (v < 0 || v > 1'000'000) return std::nullopt;
    out.push_back(static_cast<int>(v));
  }
  return out;
}

std::uint64_t stage_seed(std::uint64_t base, Stage stage) {
  return text::mix_seed(base, static_cast<std::uint64_t>(stage));
}

}  // namespace

// Stage 1: keypoint extraction -----------------------------------------------------

std::vector<Keypoint> extract_keypoints(const Question& question, const StageContext& ctx) {
  if (text::trim(question.stem).empty()) throw StageError(Stage::extract, "question stem is empty");
  Caller caller(ctx, llm::StageTag::extract, "extract", 0.0);
  auto items = call_with_reprompt(caller, {{"question", question.stem}, {"options", format_options(question)}},
                                  parse_string_list);
  if (!items) throw StageError(Stage::extract, "keypoint response is not a JSON array of strings");

  std::vector<Keypoint> keypoints;
  std::set<std::string> seen;
  const auto stem_lower = text::to_lower(question.stem);
  for (const auto& item : *items) {
    auto body = text::trim(item);
    if (body.empty()) continue;
    auto key = text::to_lower(body);
    if (!seen.insert(key).second) continue;
    Keypoint kp;
    kp.index = static_cast<int>(keypoints.size());
    kp.text = body;
    if (auto pos = stem_lower.find(key); pos != std::string::npos) {
      kp.source_span = std::pair{static_cast<int>(pos), static_cast<int>(pos + key.size())};
    }
    keypoints.push_back(std::move(kp));
  }
  if (keypoints.empty()) throw StageError(Stage::extract, "no keypoints extracted");
  return keypoints;
}

// Stage 2: knowledge-driven grouping -------------------------------------------------

bool is_partition(const std::vector<std::vector<int>>& groups, std::size_t n) {
  std::vector<char> seen(n, 0);
  std::size_t count = 0;
  for (const auto& g : groups) {
    if (g.empty()) return false;
    for (int i : g) {
      if (i < 0 || static_cast<std::size_t>(i) >= n || seen[static_cast<std::size_t>(i)]) return false;
      seen[static_cast<std::size_t>(i)] = 1;
      ++count;
    }
  }
  return count == n;
}

std::vector<std::vector<int>> overlap_components(const std::vector<RankedHits>& hits, double threshold) {
  const std::size_t n = hits.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (retrieval::retrieval_overlap(hits[i], hits[j]) >= threshold) {
        auto a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::map<std::size_t, std::vector<int>> by_root;
  for (std::size_t i = 0; i < n; ++i) by_root[find(i)].push_back(static_cast<int>(i));
  std::vector<std::vector<int>> out;
  for (auto& [_, members] : by_root) out.push_back(std::move(members));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

std::optional<std::vector<std::pair<std::string, std::vector<int>>>>
parse_partition_response(std::string_view response, std::size_t n) {
  auto doc = parse_json_payload(response);
  if (!doc) return std::nullopt;
  const json* groups = &*doc;
  if (doc->is_object()) {
    if (!doc->contains("groups")) return std::nullopt;
    groups = &(*doc)["groups"];
  }
  if (!groups->is_array()) return std::nullopt;

  std::vector<std::pair<std::string, std::vector<int>>> out;
  std::vector<std::vector<int>> members;
  for (const auto& g : *groups) {
    const json* ids = &g;
    std::string label;
    if (g.is_object()) {
      if (!g.contains("keypoints")) return std::nullopt;
      ids = &g["keypoints"];
      if (g.contains("label")) {
        if (!g["label"].is_string()) return std::nullopt;
        label = text::trim(g["label"].get<std::string>());
      }
    }
    if (!ids->is_array()) return std::nullopt;
    std::vector<int> idx;
    for (const auto& v : *ids) {
      if (!v.is_number_integer()) return std::nullopt;
      auto value = v.get<long long>();
      if (value < 0 || static_cast<unsigned long long>(value) >= n) return std::nullopt;
      idx.push_back(static_cast<int>(value));
    }
    std::sort(idx.begin(), idx.end());
    members.push_back(idx);
    out.emplace_back(std::move(label), std::move(idx));
  }
  if (!is_partition(members, n)) return std::nullopt;
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second.front() < b.second.front(); });
  return out;
}

namespace {

// Doc id of the chunk with the highest total score among chunks retrieved by
// at least two members (any retrieved chunk for a singleton).
std::string derive_label(const std::vector<int>& members, const std::vector<RankedHits>& hits,
                         const std::vector<Keypoint>& keypoints, const Index& index) {
  std::map<std::string, std::pair<double, int>> totals;  // chunk -> (score sum, member count)
  for (int m : members) {
    for (const auto& h : hits[static_cast<std::size_t>(m)].entries) {
      auto& slot = totals[h.chunk_id];
      slot.first += h.score;
      slot.second += 1;
    }
  }
  const int need = members.size() > 1 ? 2 : 1;
  const std::string* best = nullptr;
  double best_score = -1.0;
  for (const auto& [chunk_id, stats] : totals) {
    if (stats.second >= need && stats.first > best_score) {
      best = &chunk_id;
      best_score = stats.first;
    }
  }
  if (best) {
    if (const auto* chunk = index.find(*best)) return chunk->doc_id;
  }
  return keypoints[static_cast<std::size_t>(members.front())].text;
}

}  // namespace

GroupingOutput group_keypoints(const std::vector<Keypoint>& keypoints, const Question& question,
                               const Index& index, const StageContext& ctx, const GroupingOptions& options) {
  if (keypoints.empty()) throw StageError(Stage::group, "grouping needs at least one keypoint");
  const auto& rs = options.retrieval;

  GroupingOutput out;
  out.mode = options.mode;
  for (const auto& kp : keypoints) {
    out.keypoint_hits.push_back(options.use_retrieval ? safe_retrieve(index, kp.text, rs.k_keypoint)
                                                      : empty_hits(kp.text, rs.k_keypoint));
  }

  std::vector<std::pair<std::string, std::vector<int>>> partition;
  if (keypoints.size() == 1) {
    partition.emplace_back("", std::vector<int>{0});
  } else if (options.mode == GroupingMode::llm) {
    std::string kp_block, evidence_block;
    std::set<std::string> listed;
    for (const auto& kp : keypoints) {
      const auto& hits = out.keypoint_hits[static_cast<std::size_t>(kp.index)];
      std::vector<std::string> ids;
      for (const auto& h : hits.entries) {
        ids.push_back(h.chunk_id);
        if (listed.insert(h.chunk_id).second) {
          evidence_block += "[" + h.chunk_id + "] " + snippet(index, h.chunk_id) + "\n";
        }
      }
      kp_block += std::to_string(kp.index) + ": " + kp.text;
      kp_block += ids.empty() ? " (no retrieved knowledge)" : " (retrieved: " + text::join(ids, ", ") + ")";
      kp_block += "\n";
    }
    if (evidence_block.empty()) evidence_block = "(no evidence)\n";
    kp_block.pop_back();
    evidence_block.pop_back();

    Caller caller(ctx, llm::StageTag::group, "group", 0.0);
    auto parsed = call_with_reprompt(
        caller, {{"question", question.stem}, {"keypoints", kp_block}, {"evidence", evidence_block}},
        [&](const std::string& raw) { return parse_partition_response(raw, keypoints.size()); });
    if (parsed) {
      partition = std::move(*parsed);
    } else {
      out.fallback = true;
      warn(ctx, "grouping: llm response is not a valid partition; used overlap components");
    }
  }
  if (partition.empty()) {
    for (auto& members : overlap_components(out.keypoint_hits, rs.overlap_threshold)) {
      partition.emplace_back("", std::move(members));
    }
  }

  for (std::size_t g = 0; g < partition.size(); ++g) {
    auto& [label, members] = partition[g];
    KeypointGroup group;
    group.group_id = static_cast<int>(g);
    group.keypoint_indices = members;
    group.label = label.empty() ? derive_label(members, out.keypoint_hits, keypoints, index) : label;
    std::vector<std::string> texts;
    for (int m : members) texts.push_back(keypoints[static_cast<std::size_t>(m)].text);
    group.evidence = safe_retrieve(index, text::join(texts, " "), rs.k_group);
    out.groups.push_back(std::move(group));
  }
  return out;
}

// Stage 3: local reasoning --------------------------------------------------------------

LocalConclusion local_reason(const KeypointGroup& group, const std::vector<Keypoint>& keypoints,
                             const Question& question, const Index& index, const StageContext& ctx) {
  std::string group_block;
  for (int m : group.keypoint_indices) {
    if (m < 0 || static_cast<std::size_t>(m) >= keypoints.size()) {
      throw StageError(Stage::local, "group references unknown keypoint " + std::to_string(m));
    }
    group_block += "- " + keypoints[static_cast<std::size_t>(m)].text + "\n";
  }
  if (!group_block.empty()) group_block.pop_back();

  struct Parsed {
    std::string conclusion;
    std::vector<std::string> cited;
  };
  auto parse = [](const std::string& raw) -> std::optional<Parsed> {
    auto doc = parse_json_payload(raw);
    if (!doc || !doc->is_object() || !doc->contains("conclusion") || !(*doc)["conclusion"].is_string()) {
      return std::nullopt;
    }
    Parsed p;
    p.conclusion = text::trim((*doc)["conclusion"].get<std::string>());
    if (p.conclusion.empty()) return std::nullopt;
    if (doc->contains("cited")) {
      const auto& cited = (*doc)["cited"];
      if (!cited.is_array()) return std::nullopt;
      for (const auto& c : cited) {
        if (c.is_string()) p.cited.push_back(c.get<std::string>());
      }
    }
    return p;
  };

  Caller caller(ctx, llm::StageTag::local, "local", 0.3);
  std::string raw;
  auto parsed = call_with_reprompt(caller,
                                   {{"question", question.stem},
                                    {"group", group_block},
                                    {"evidence", format_evidence(index, group.evidence)}},
                                   parse, &raw);

  LocalConclusion out;
  out.group_id = group.group_id;
  out.evidence = group.evidence;
  if (!parsed) {
    out.text = text::trim(raw);
    out.degraded = true;
    warn(ctx, "local: group " + std::to_string(group.group_id) + " response unparseable; kept raw text");
    return out;
  }
  out.text = parsed->conclusion;
  std::set<std::string> allowed;
  for (const auto& h : group.evidence.entries) allowed.insert(h.chunk_id);
  std::set<std::string> kept;
  for (const auto& id : parsed->cited) {
    if (allowed.contains(id)) {
      if (kept.insert(id).second) out.cited_chunk_ids.push_back(id);
    } else {
      ++out.dropped_citations;
    }
  }
  if (out.dropped_citations > 0) {
    warn(ctx, "local: group " + std::to_string(group.group_id) + " dropped " +
                  std::to_string(out.dropped_citations) + " citation(s) outside its evidence");
  }
  return out;
}

// Stage 4: selection + synthesis ------------------------------------------------------------

policy::FeatureMatrix conclusion_features(const std::vector<LocalConclusion>& conclusions,
                                          const std::vector<KeypointGroup>& groups, const Question& question) {
  policy::FeatureMatrix features;
  const auto stem_tokens = text::tokenize(question.stem);
  const std::set<std::string> stem_set(stem_tokens.begin(), stem_tokens.end());
  for (std::size_t i = 0; i < conclusions.size(); ++i) {
    const auto& c = conclusions[i];
    std::vector<double> row(kFeatureDim, 0.0);

    auto group = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.group_id == c.group_id; });
    row[0] = group == groups.end() ? 0.0 : static_cast<double>(group->keypoint_indices.size());

    if (!c.evidence.entries.empty()) {
      double sum = 0.0, best = 0.0;
      for (const auto& h : c.evidence.entries) {
        sum += h.score;
        best = std::max(best, h.score);
      }
      row[1] = sum / static_cast<double>(c.evidence.entries.size());
      row[2] = best;
    }

    auto tokens = text::tokenize(c.text);
    row[3] = std::log1p(static_cast<double>(tokens.size()));
    std::set<std::string> token_set(tokens.begin(), tokens.end());
    if (!token_set.empty()) {
      std::size_t shared = 0;
      for (const auto& t : token_set) shared += stem_set.count(t);
      row[4] = static_cast<double>(shared) / static_cast<double>(token_set.size());
    }
    for (std::size_t j = 0; j < conclusions.size(); ++j) {
      if (j != i) row[5] = std::max(row[5], text::token_jaccard(c.text, conclusions[j].text));
    }
    row[6] = static_cast<double>(c.cited_chunk_ids.size());
    row[7] = c.degraded ? 1.0 : 0.0;
    features.push_back(std::move(row));
  }
  return features;
}

SelectionOutput select_conclusions(const std::vector<LocalConclusion>& conclusions,
                                   const std::vector<KeypointGroup>& groups, const Question& question,
                                   const StageContext& ctx, const SelectionOptions& options) {
  if (conclusions.empty()) throw StageError(Stage::global, "selection needs at least one conclusion");
  SelectionOutput out;
  out.selector = options.mode;
  out.features = conclusion_features(conclusions, groups, question);
  out.probs = policy::selection_probs(options.policy, out.features);
  if (options.diagnostic_rollouts > 0) {
    out.rollouts = policy::sample_rollouts(out.probs, options.diagnostic_rollouts, ctx.seed);
    for (const auto& r : out.rollouts) out.rollout_log_probs.push_back(policy::log_prob(out.probs, r));
  }

  auto policy_decision = [&] {
    bool any = std::any_of(out.probs.begin(), out.probs.end(), [](double p) { return p >= 0.5; });
    out.rescued = !any;
    auto ids = policy::threshold_select(out.probs);
    return std::vector<int>(ids.begin(), ids.end());
  };

  switch (options.mode) {
    case SelectorMode::all:
      out.selected.resize(conclusions.size());
      std::iota(out.selected.begin(), out.selected.end(), 0);
      break;
    case SelectorMode::policy:
      out.selected = policy_decision();
      break;
    case SelectorMode::llm: {
      std::string block;
      for (std::size_t i = 0; i < conclusions.size(); ++i) block += std::to_string(i) + ": " + conclusions[i].text + "\n";
      block.pop_back();
      Caller caller(ctx, llm::StageTag::select, "select", 0.0);
      auto ids = call_with_reprompt(caller, {{"question", question.stem}, {"conclusions", block}}, parse_id_list);
      if (!ids) {
        out.fallback = true;
        warn(ctx, "select: llm response unparseable; used policy decision");
        out.selected = policy_decision();
        break;
      }
      std::set<int> valid;
      for (int id : *ids) {
        if (static_cast<std::size_t>(id) < conclusions.size()) valid.insert(id);
      }
      if (valid.empty()) {
        out.rescued = true;
        auto best = std::max_element(out.probs.begin(), out.probs.end());
        valid.insert(static_cast<int>(best - out.probs.begin()));
      }
      out.selected.assign(valid.begin(), valid.end());
      break;
    }
  }
  return out;
}

GlobalChain synthesize_global(const std::vector<LocalConclusion>& conclusions, const std::vector<int>& selected,
                              const Question& question, const StageContext& ctx) {
  if (selected.empty()) throw StageError(Stage::global, "synthesis needs a non-empty selection");
  std::string block;
  for (int id : selected) {
    if (id < 0 || static_cast<std::size_t>(id) >= conclusions.size()) {
      throw StageError(Stage::global, "selection references unknown conclusion " + std::to_string(id));
    }
    block += "[" + std::to_string(id) + "] " + conclusions[static_cast<std::size_t>(id)].text + "\n";
  }
  block.pop_back();
  Caller caller(ctx, llm::StageTag::synthesize, "synthesize", 0.0);
  auto chain = call_with_reprompt(caller, {{"question", question.stem}, {"conclusions", block}},
                                  [](const std::string& raw) -> std::optional<std::string> {
                                    auto body = text::trim(raw);
                                    if (body.empty()) return std::nullopt;
                                    return body;
                                  });
  if (!chain) throw StageError(Stage::global, "synthesis returned an empty chain");
  GlobalChain out;
  out.selected_conclusion_ids = selected;
  std::sort(out.selected_conclusion_ids.begin(), out.selected_conclusion_ids.end());
  out.chain_text = *chain;
  return out;
}

// Stage 5: answer alignment -------------------------------------------------------------------

std::optional<std::string> scan_option_letter(std::string_view body, const Question& question) {
  const std::string s(body);
  auto valid = [&](const std::string& letter) { return question.options.contains(letter); };

  static const std::regex answer_is(R"([Aa]nswer\s*(?:is|:)?\s*(?:[Oo]ption\s*)?\(?([A-Z])\)?(?![A-Za-z]))");
  std::smatch m;
  if (std::regex_search(s, m, answer_is) && valid(m[1].str())) return m[1].str();

  auto unique_match = [&](const std::regex& re) -> std::optional<std::string> {
    std::set<std::string> found;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
      auto letter = (*it)[1].str();
      if (valid(letter)) found.insert(letter);
    }
    if (found.size() == 1) return *found.begin();
    return std::nullopt;
  };
  static const std::regex parenthesized(R"(\(([A-Z])\))");
  if (auto l = unique_match(parenthesized)) return l;
  static const std::regex standalone(R"((?:^|[^A-Za-z0-9])([A-Z])(?![A-Za-z0-9]))");
  return unique_match(standalone);
}

AlignedAnswer align_answer(const GlobalChain& chain, const Question& question, const Index& index,
                           const StageContext& ctx, int k_option, int chain_terms, bool use_retrieval) {
  if (question.options.size() < 2) throw StageError(Stage::align, "question needs at least two options");
  AlignedAnswer out;
  const auto terms = text::join(text::top_terms(chain.chain_text, static_cast<std::size_t>(chain_terms)), " ");
  std::string block;
  for (const auto& [letter, body] : question.options) {
    auto query = terms.empty() ? body : body + " " + terms;
    auto hits = use_retrieval ? safe_retrieve(index, query, k_option) : empty_hits(query, k_option);
    block += letter + ". " + body + "\n";
    for (const auto& h : hits.entries) block += "   [" + h.chunk_id + "] " + snippet(index, h.chunk_id) + "\n";
    if (hits.entries.empty()) block += "   (no evidence)\n";
    out.option_evidence.emplace(letter, std::move(hits));
  }
  block.pop_back();

  auto parse = [&](const std::string& raw) -> std::optional<AlignedAnswer> {
    AlignedAnswer a;
    auto doc = parse_json_payload(raw);
    if (doc && doc->is_object() && doc->contains("choice") && (*doc)["choice"].is_string()) {
      auto choice = text::trim((*doc)["choice"].get<std::string>());
      if (question.options.contains(choice)) {
        a.chosen_option = choice;
        if (doc->contains("analysis") && (*doc)["analysis"].is_object()) {
          for (const auto& [k, v] : (*doc)["analysis"].items()) {
            if (v.is_string() && question.options.contains(k)) a.per_option_analysis[k] = v.get<std::string>();
          }
        }
        if (doc->contains("rationale") && (*doc)["rationale"].is_string()) {
          a.rationale = (*doc)["rationale"].get<std::string>();
        }
        return a;
      }
    }
    if (auto letter = scan_option_letter(raw, question)) {
      a.chosen_option = *letter;
      a.rationale = text::trim(raw);
      a.regex_fallback = true;
      return a;
    }
    return std::nullopt;
  };

  Caller caller(ctx, llm::StageTag::align, "align", 0.0);
  auto parsed = call_with_reprompt(caller, {{"question", question.stem}, {"chain", chain.chain_text}, {"options", block}},
                                   parse);
  if (!parsed) throw StageError(Stage::align, "no valid option letter in alignment response");
  parsed->option_evidence = std::move(out.option_evidence);
  return std::move(*parsed);
}

// Orchestration --------------------------------------------------------------------------------

PipelineTrace run_pipeline(const Question& question, const PipelineDeps& deps, const AblationSet& ablation) {
  PipelineTrace trace;
  trace.question_id = question.id;
  trace.seed = deps.seed;
  trace.config_fingerprint = deps.config_fingerprint;

  const std::uint64_t question_seed = text::mix_seed(deps.seed, text::fnv1a64(question.id));
  auto off = [&](Switch s) { return ablation.contains(s); };
  auto context = [&](Stage stage, Switch train) {
    return StageContext{off(train) ? deps.base : deps.trained, deps.prompts, stage_seed(question_seed, stage),
                        &trace.warnings};
  };

  Stage current = Stage::extract;
  auto timed = [&](Stage stage, auto&& body) {
    current = stage;
    auto started = std::chrono::steady_clock::now();
    body();
    trace.stage_timings_ms[std::string(to_string(stage))] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };

  try {
    timed(Stage::extract, [&] { trace.keypoints = extract_keypoints(question, context(Stage::extract, Switch::ext_train)); });

    timed(Stage::group, [&] {
      GroupingOptions options{deps.grouping_mode, !off(Switch::gro_rag), deps.retrieval};
      trace.grouping =
          group_keypoints(trace.keypoints, question, deps.index, context(Stage::group, Switch::gro_train), options);
    });

    timed(Stage::local, [&] {
      auto ctx = context(Stage::local, Switch::loc_train);
      for (const auto& group : trace.grouping->groups) {
        if (off(Switch::loc_rag)) {
          auto stripped = group;
          stripped.evidence = empty_hits(group.evidence.query, group.evidence.k);
          trace.conclusions.push_back(local_reason(stripped, trace.keypoints, question, deps.index, ctx));
        } else {
          trace.conclusions.push_back(local_reason(group, trace.keypoints, question, deps.index, ctx));
        }
      }
    });

    timed(Stage::global, [&] {
      auto ctx = context(Stage::global, Switch::glo_train);
      auto options = deps.selection;
      if (off(Switch::glo_train)) options.policy = policy::PolicyParams::zeros(options.policy.dim());
      trace.selection = select_conclusions(trace.conclusions, trace.grouping->groups, question, ctx, options);
      trace.global_chain = synthesize_global(trace.conclusions, trace.selection->selected, question, ctx);
    });

    timed(Stage::align, [&] {
      trace.aligned_answer = align_answer(*trace.global_chain, question, deps.index,
                                          context(Stage::align, Switch::ans_train), deps.retrieval.k_option,
                                          deps.retrieval.chain_terms, !off(Switch::ans_rag));
    });
  } catch (const StageError& e) {
    trace.failed_at = e.stage();
    trace.error = e.what();
  } catch (const Error& e) {
    trace.failed_at = current;
    trace.error = e.what();
  }
  if (trace.failed_at) {
    // A failed stage leaves no partial output behind.
    switch (*trace.failed_at) {
      case Stage::extract: trace.keypoints.clear(); break;
      case Stage::group: trace.grouping.reset(); break;
      case Stage::local: trace.conclusions.clear(); break;
      case Stage::global:
        trace.selection.reset();
        trace.global_chain.reset();
        break;
      case Stage::align: trace.aligned_answer.reset(); break;
    }
  }
  return trace;
}

}  // namespace grouprag::pipeline
