#include "grouprag/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>

#include "grouprag/text.hpp"

namespace grouprag::eval {

using nlohmann::json;
using pipeline::PipelineTrace;
using pipeline::Question;

PrfScores PrfScores::from(double precision, double recall) {
  double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return {precision, recall, f1};
}

std::vector<std::pair<int, int>> match_keypoints(const std::vector<std::string>& predicted,
                                                 const std::vector<std::string>& gold, double threshold) {
  struct Candidate {
    double f1;
    int pred;
    int gold;
  };
  std::vector<Candidate> candidates;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    for (std::size_t j = 0; j < gold.size(); ++j) {
      double f1 = text::token_f1(predicted[i], gold[j]);
      if (f1 >= threshold) candidates.push_back({f1, static_cast<int>(i), static_cast<int>(j)});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.f1 != b.f1) return a.f1 > b.f1;
    if (a.pred != b.pred) return a.pred < b.pred;
    return a.gold < b.gold;
  });
  std::vector<char> pred_used(predicted.size(), 0), gold_used(gold.size(), 0);
  std::vector<std::pair<int, int>> matches;
  for (const auto& c : candidates) {
    if (pred_used[static_cast<std::size_t>(c.pred)] || gold_used[static_cast<std::size_t>(c.gold)]) continue;
    pred_used[static_cast<std::size_t>(c.pred)] = gold_used[static_cast<std::size_t>(c.gold)] = 1;
    matches.emplace_back(c.pred, c.gold);
  }
  std::sort(matches.begin(), matches.end());
  return matches;
}

PrfScores extraction_prf(const std::vector<std::string>& predicted, const std::vector<std::string>& gold,
                         double threshold) {
  if (predicted.empty() && gold.empty()) return {1.0, 1.0, 1.0};
  if (predicted.empty() || gold.empty()) return {0.0, 0.0, 0.0};
  const double m = static_cast<double>(match_keypoints(predicted, gold, threshold).size());
  return PrfScores::from(m / static_cast<double>(predicted.size()), m / static_cast<double>(gold.size()));
}

PrfScores bcubed(const Partition& predicted, const Partition& gold) {
  if (predicted.size() != gold.size() ||
      !std::equal(predicted.begin(), predicted.end(), gold.begin(),
                  [](const auto& a, const auto& b) { return a.first == b.first; })) {
    throw InputError("bcubed: predicted and gold partitions cover different items");
  }
  if (predicted.empty()) return {1.0, 1.0, 1.0};

  std::map<std::string, int> pred_size, gold_size;
  std::map<std::pair<std::string, std::string>, int> joint;
  for (const auto& [item, cluster] : predicted) ++pred_size[cluster];
  for (const auto& [item, cluster] : gold) ++gold_size[cluster];
  for (const auto& [item, cluster] : predicted) ++joint[{cluster, gold.at(item)}];

  double p_sum = 0.0, r_sum = 0.0;
  for (const auto& [item, pc] : predicted) {
    const auto& gc = gold.at(item);
    const double both = joint.at({pc, gc});
    p_sum += both / pred_size.at(pc);
    r_sum += both / gold_size.at(gc);
  }
  const double n = static_cast<double>(predicted.size());
  return PrfScores::from(p_sum / n, r_sum / n);
}

double bcubed_item_f1(const Partition& predicted, const Partition& gold) {
  if (predicted.size() != gold.size()) throw InputError("bcubed: partitions cover different items");
  if (predicted.empty()) return 1.0;
  double total = 0.0;
  for (const auto& [item, pc] : predicted) {
    const auto& gc = gold.at(item);
    int both = 0, in_pred = 0, in_gold = 0;
    for (const auto& [other, opc] : predicted) {
      bool same_pred = opc == pc;
      bool same_gold = gold.at(other) == gc;
      in_pred += same_pred;
      in_gold += same_gold;
      both += same_pred && same_gold;
    }
    total += PrfScores::from(double(both) / in_pred, double(both) / in_gold).f1;
  }
  return total / static_cast<double>(predicted.size());
}

std::optional<bool> parse_verdict(std::string_view body) {
  // Only upper-case verdict words count; "not correct" style prose is ambiguous.
  std::string word;
  auto check = [&]() -> std::optional<bool> {
    if (word == "CORRECT") return true;
    if (word == "INCORRECT") return false;
    return std::nullopt;
  };
  for (char c : body) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word.push_back(c);
      continue;
    }
    if (auto v = check()) return v;
    word.clear();
  }
  return check();
}

namespace {

std::string evidence_block(const retrieval::RankedHits& hits, const retrieval::Index* index) {
  if (hits.entries.empty()) return "(no evidence)";
  std::string out;
  for (const auto& h : hits.entries) {
    out += "[" + h.chunk_id + "]";
    if (index) {
      if (const auto* chunk = index->find(h.chunk_id)) out += " " + chunk->text.substr(0, 400);
    }
    out += "\n";
  }
  out.pop_back();
  return out;
}

std::string options_block(const Question& q) {
  std::string out;
  for (const auto& [letter, body] : q.options) out += letter + ". " + body + "\n";
  if (!out.empty()) out.pop_back();
  return out;
}

std::string call_judge(const pipeline::StageContext& ctx, const std::string& template_name,
                       const std::map<std::string, std::string>& vars) {
  const auto& tmpl = ctx.prompts.get(template_name);
  llm::CompletionRequest req;
  req.stage_tag = llm::StageTag::judge;
  req.system_prompt = tmpl.system;
  req.user_prompt = llm::PromptLibrary::render(tmpl.user, vars);
  req.temperature = 0.0;
  req.seed = ctx.seed;
  return ctx.gateway.complete(req).text;
}

}  // namespace

std::optional<JudgeVerdict> judge_local(const pipeline::LocalConclusion& conclusion, const Question& question,
                                        const retrieval::Index* index, const pipeline::StageContext& ctx) {
  std::string reply;
  try {
    reply = call_judge(ctx, "judge",
                       {{"question", question.stem},
                        {"evidence", evidence_block(conclusion.evidence, index)},
                        {"conclusions", conclusion.text}});
  } catch (const Error&) {
    return std::nullopt;
  }
  auto verdict = parse_verdict(reply);
  if (!verdict) return JudgeVerdict{false, true};
  return JudgeVerdict{*verdict, false};
}

double answer_accuracy(const std::vector<PipelineTrace>& traces, const std::map<std::string, std::string>& golds) {
  if (traces.empty()) throw InputError("answer accuracy is undefined for an empty trace list");
  std::size_t correct = 0;
  for (const auto& t : traces) {
    auto it = golds.find(t.question_id);
    if (it == golds.end()) throw InputError("no gold answer for question " + t.question_id);
    if (!t.failed() && t.aligned_answer && t.aligned_answer->chosen_option == it->second) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(traces.size());
}

std::optional<policy::RoleLabels> resolve_roles(const PipelineTrace& trace, const Question& question,
                                                const pipeline::StageContext* judge, bool* flagged) {
  policy::RoleLabels labels;
  for (std::size_t i = 0; i < trace.conclusions.size(); ++i) {
    const auto& c = trace.conclusions[i];
    std::optional<policy::Role> role = c.role_label;
    if (!role && question.annotations.roles) {
      const auto lower = text::to_lower(c.text);
      for (const auto& pattern : *question.annotations.roles) {
        if (lower.find(text::to_lower(pattern.pattern)) != std::string::npos) {
          role = pattern.role;
          break;
        }
      }
    }
    if (!role && judge) {
      std::string reply;
      try {
        reply = call_judge(*judge, "judge_role",
                           {{"question", question.stem}, {"options", options_block(question)}, {"conclusions", c.text}});
      } catch (const Error&) {
        return std::nullopt;
      }
      std::string word;
      for (char ch : reply + " ") {
        if (std::isalpha(static_cast<unsigned char>(ch))) {
          word.push_back(ch);
          continue;
        }
        if (word == "CORE" || word == "SUPPORT" || word == "NOISE") break;
        word.clear();
      }
      if (word.empty()) {
        if (flagged) *flagged = true;
        role = policy::Role::noise;
      } else {
        role = policy::role_from_string(word);
      }
    }
    if (!role) return std::nullopt;
    int id = static_cast<int>(i);
    switch (*role) {
      case policy::Role::core: labels.core.insert(id); break;
      case policy::Role::support: labels.support.insert(id); break;
      case policy::Role::noise: labels.noise.insert(id); break;
    }
  }
  return labels;
}

StageMetrics stage_report(const std::vector<PipelineTrace>& traces, const std::vector<Question>& questions,
                          const ReportOptions& options) {
  StageMetrics m;
  std::map<std::string, const Question*> by_id;
  for (const auto& q : questions) by_id[q.id] = &q;

  std::vector<const PipelineTrace*> ordered;
  std::set<std::string> traced;
  for (const auto& t : traces) {
    traced.insert(t.question_id);
    if (by_id.contains(t.question_id)) {
      ordered.push_back(&t);
    } else {
      m.orphans.push_back(t.question_id);
    }
  }
  for (const auto& q : questions) {
    if (!traced.contains(q.id)) m.missing.push_back(q.id);
  }
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->question_id < b->question_id; });
  std::sort(m.orphans.begin(), m.orphans.end());
  m.n_questions = static_cast<int>(ordered.size());

  PrfScores ext_sum, grp_sum;
  double local_sum = 0.0, wif_sum = 0.0;
  std::vector<PipelineTrace> answered;
  std::map<std::string, std::string> golds;

  for (const auto* t : ordered) {
    const Question& q = *by_id.at(t->question_id);
    if (t->failed()) ++m.failed_traces;

    std::vector<std::string> predicted;
    for (const auto& kp : t->keypoints) predicted.push_back(kp.text);

    if (q.annotations.keypoints) {
      auto s = extraction_prf(predicted, *q.annotations.keypoints, options.match_threshold);
      ext_sum.precision += s.precision;
      ext_sum.recall += s.recall;
      ext_sum.f1 += s.f1;
      ++m.extract.n;
    }

    if (q.annotations.keypoints && q.annotations.grouping && t->grouping) {
      auto matches = match_keypoints(predicted, *q.annotations.keypoints, options.match_threshold);
      if (!matches.empty()) {
        std::map<int, int> pred_cluster, gold_cluster;
        for (const auto& g : t->grouping->groups) {
          for (int k : g.keypoint_indices) pred_cluster[k] = g.group_id;
        }
        for (std::size_t g = 0; g < q.annotations.grouping->size(); ++g) {
          for (int k : (*q.annotations.grouping)[g]) gold_cluster[k] = static_cast<int>(g);
        }
        Partition pred, gold;
        for (const auto& [pi, gi] : matches) {
          auto item = std::to_string(pi);
          pred[item] = std::to_string(pred_cluster.at(pi));
          gold[item] = std::to_string(gold_cluster.at(gi));
        }
        auto s = bcubed(pred, gold);
        grp_sum.precision += s.precision;
        grp_sum.recall += s.recall;
        grp_sum.f1 += s.f1;
        ++m.group.n;
      }
    }

    if (options.judge && !t->conclusions.empty()) {
      int judged = 0, correct = 0;
      for (const auto& c : t->conclusions) {
        auto verdict = judge_local(c, q, options.index, *options.judge);
        if (!verdict) {
          ++m.judge_skipped;
          continue;
        }
        ++judged;
        correct += verdict->correct;
        m.judge_flagged += verdict->flagged;
      }
      if (judged > 0) {
        local_sum += static_cast<double>(correct) / judged;
        ++m.local_accuracy.n;
      }
    }

    if (t->selection && !t->conclusions.empty()) {
      bool flagged = false;
      auto roles = resolve_roles(*t, q, options.judge, &flagged);
      m.judge_flagged += flagged;
      if (roles) {
        std::set<int> selected(t->selection->selected.begin(), t->selection->selected.end());
        wif_sum += policy::wif_score(selected, *roles, options.wif);
        ++m.global_wif.n;
      }
    }

    if (q.gold_option) {
      answered.push_back(*t);
      golds[q.id] = *q.gold_option;
    }
  }

  auto mean_prf = [](const PrfScores& sum, int n) {
    return PrfScores{sum.precision / n, sum.recall / n, sum.f1 / n};
  };
  if (m.extract.n > 0) m.extract.value = mean_prf(ext_sum, m.extract.n);
  if (m.group.n > 0) m.group.value = mean_prf(grp_sum, m.group.n);
  if (m.local_accuracy.n > 0) m.local_accuracy.value = local_sum / m.local_accuracy.n;
  if (m.global_wif.n > 0) m.global_wif.value = wif_sum / m.global_wif.n;
  if (!answered.empty()) {
    m.answer_accuracy.value = answer_accuracy(answered, golds);
    m.answer_accuracy.n = static_cast<int>(answered.size());
  }
  return m;
}

namespace {

json prf_json(const PrfScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

template <typename T, typename F>
json metric_json(const Metric<T>& metric, F&& convert) {
  return {{"value", metric.value ? convert(*metric.value) : json("n/a")}, {"n", metric.n}};
}

std::string cell(const char* fmt, std::optional<double> v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, fmt, *v);
  return buf;
}

}  // namespace

json report_to_json(const StageMetrics& m) {
  auto identity = [](double v) { return json(v); };
  return {{"n_questions", m.n_questions},
          {"failed_traces", m.failed_traces},
          {"judge_flagged", m.judge_flagged},
          {"judge_skipped", m.judge_skipped},
          {"missing", m.missing},
          {"orphans", m.orphans},
          {"extract", metric_json(m.extract, prf_json)},
          {"group", metric_json(m.group, prf_json)},
          {"local_accuracy", metric_json(m.local_accuracy, identity)},
          {"global_wif", metric_json(m.global_wif, identity)},
          {"answer_accuracy", metric_json(m.answer_accuracy, identity)}};
}

std::string render_table(const std::vector<std::pair<std::string, StageMetrics>>& rows,
                         const std::vector<std::optional<double>>* delta) {
  std::size_t name_width = 6;
  for (const auto& [name, _] : rows) name_width = std::max(name_width, name.size());

  std::vector<std::string> headers = {"Extract F1", "Group F1", "Local Acc (%)", "Global WIF", "Answer Acc (%)"};
  if (delta) headers.push_back("Acc. Delta (%)");

  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
  std::string out = pad("Method", name_width);
  for (const auto& h : headers) out += " | " + h;
  out += "\n" + std::string(out.size() - 1, '-') + "\n";

  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& [name, m] = rows[r];
    auto pct = [](const std::optional<double>& v) { return v ? std::optional<double>(*v * 100.0) : std::nullopt; };
    std::vector<std::string> cells = {
        cell("%.3f", m.extract.value ? std::optional<double>(m.extract.value->f1) : std::nullopt),
        cell("%.3f", m.group.value ? std::optional<double>(m.group.value->f1) : std::nullopt),
        cell("%.2f", pct(m.local_accuracy.value)),
        cell("%.2f", m.global_wif.value),
        cell("%.2f", pct(m.answer_accuracy.value)),
    };
    if (delta) cells.push_back(r < delta->size() ? cell("%+.2f", (*delta)[r]) : "n/a");
    out += pad(name, name_width);
    for (std::size_t c = 0; c < cells.size(); ++c) out += " | " + pad(cells[c], headers[c].size());
    out += "\n";
  }
  return out;
}

}  // namespace grouprag::eval
