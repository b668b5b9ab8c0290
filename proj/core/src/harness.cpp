#include "grouprag/harness.hpp"

#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "grouprag/text.hpp"

namespace grouprag::harness {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << content;
  if (!out) throw RuntimeFailure("write failed for " + path.string());
}

namespace {

std::string trace_file_name(const std::string& qid) {
  std::string safe;
  for (char c : qid) {
    bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    safe.push_back(ok ? c : '_');
  }
  if (safe.empty() || safe != qid || safe.front() == '.') {
    safe += "-" + text::hex64(text::fnv1a64(qid)).substr(0, 8);
  }
  return safe + ".json";
}

std::string utc_timestamp() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

std::string switch_names(const pipeline::AblationSet& switches) {
  std::vector<std::string> names;
  for (auto s : pipeline::all_switches()) {
    if (switches.contains(s)) names.emplace_back(pipeline::to_string(s));
  }
  return names.empty() ? "none" : text::join(names, ",");
}

/// Everything built once from a config and shared by every question.
struct Runtime {
  retrieval::Index index;
  llm::PromptLibrary prompts;
  std::unique_ptr<llm::Gateway> trained;
  std::unique_ptr<llm::Gateway> base;
  std::unique_ptr<llm::Gateway> judge;
  policy::PolicyParams policy = policy::PolicyParams::zeros(pipeline::kFeatureDim);
};

Runtime build_runtime(const config::RunConfig& cfg, std::ostream& log) {
  Runtime rt;
  if (!cfg.index_path.empty()) {
    rt.index = retrieval::load_index(cfg.index_path);
  } else {
    auto corpus = retrieval::ingest_corpus(cfg.corpus_path, cfg.chunking);
    for (const auto& w : corpus.warnings) log << "warning: " << w << "\n";
    rt.index = retrieval::build_index(corpus);
  }
  rt.prompts = llm::PromptLibrary::with_overrides(cfg.templates_dir);

  rt.trained = std::make_unique<llm::Gateway>(llm::make_backend(cfg.backend), cfg.backend.max_in_flight);
  for (const auto& [tag, b] : cfg.stage_backends) rt.trained->route(tag, llm::make_backend(b));
  if (cfg.base_backend) {
    rt.base = std::make_unique<llm::Gateway>(llm::make_backend(*cfg.base_backend), cfg.base_backend->max_in_flight);
  } else {
    rt.base = std::make_unique<llm::Gateway>(llm::make_backend(cfg.backend), cfg.backend.max_in_flight);
    for (const auto& [tag, b] : cfg.stage_backends) rt.base->route(tag, llm::make_backend(b));
  }
  if (cfg.judge_backend) {
    rt.judge = std::make_unique<llm::Gateway>(llm::make_backend(*cfg.judge_backend), cfg.judge_backend->max_in_flight);
  }
  if (!cfg.policy_path.empty()) {
    rt.policy = policy::load_policy(cfg.policy_path);
    if (rt.policy.dim() != pipeline::kFeatureDim) {
      throw InputError("policy dimension " + std::to_string(rt.policy.dim()) + " does not match the " +
                       std::to_string(pipeline::kFeatureDim) + " conclusion features");
    }
  }
  return rt;
}

eval::StageMetrics report_for(const std::vector<pipeline::PipelineTrace>& traces,
                              const std::vector<pipeline::Question>& questions, const Runtime& rt,
                              const config::RunConfig& cfg) {
  std::optional<pipeline::StageContext> judge;
  if (rt.judge) judge.emplace(pipeline::StageContext{*rt.judge, rt.prompts, *cfg.seed, nullptr});
  eval::ReportOptions options;
  options.judge = judge ? &*judge : nullptr;
  options.index = &rt.index;
  options.wif = cfg.wif;
  return eval::stage_report(traces, questions, options);
}

std::vector<pipeline::PipelineTrace> run_all(const std::vector<pipeline::Question>& questions, const Runtime& rt,
                                             const config::RunConfig& cfg, const pipeline::AblationSet& switches,
                                             const std::string& fingerprint) {
  pipeline::SelectionOptions selection;
  selection.mode = cfg.selector;
  selection.policy = rt.policy;
  selection.diagnostic_rollouts = cfg.diagnostic_rollouts;
  const pipeline::PipelineDeps deps{rt.index,         *rt.trained,   *rt.base, rt.prompts, cfg.grouping_mode,
                                    std::move(selection), cfg.retrieval, *cfg.seed, fingerprint};

  std::vector<pipeline::PipelineTrace> traces(questions.size());
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.jobs), questions.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < questions.size(); ++i) traces[i] = pipeline::run_pipeline(questions[i], deps, switches);
    return traces;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      try {
        for (std::size_t i = next++; i < questions.size(); i = next++) {
          traces[i] = pipeline::run_pipeline(questions[i], deps, switches);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return traces;
}

RunOutput run_and_write(const config::RunConfig& cfg, const Runtime& rt, const std::vector<pipeline::Question>& questions,
                        const pipeline::AblationSet& switches, const fs::path& out_dir, std::ostream& log) {
  RunOutput out;
  out.fingerprint = cfg.fingerprint(switches);
  out.traces = run_all(questions, rt, cfg, switches, out.fingerprint);

  const auto trace_dir = out_dir / "traces";
  fs::remove_all(trace_dir);
  fs::create_directories(trace_dir);
  json timings = json::object();
  int failed = 0;
  for (const auto& t : out.traces) {
    write_file(trace_dir / trace_file_name(t.question_id), pipeline::serialize_trace(t));
    timings[t.question_id] = t.stage_timings_ms;
    if (t.failed()) {
      ++failed;
      log << "question " << t.question_id << " failed at " << pipeline::to_string(*t.failed_at) << ": " << t.error
          << "\n";
    }
  }

  out.report = report_for(out.traces, questions, rt, cfg);
  json manifest = {
      {"config_fingerprint", out.fingerprint},
      {"seed", *cfg.seed},
      {"switches", switch_names(switches)},
      {"counts", {{"questions", questions.size()}, {"traces", out.traces.size()}, {"failed", failed}}},
      {"created_at", utc_timestamp()},
      {"stage_timings_ms", std::move(timings)},
  };
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(out_dir / "report.json", eval::report_to_json(out.report).dump(2) + "\n");
  write_file(out_dir / "report.txt", eval::render_table({{"GroupRAG", out.report}}));
  return out;
}

}  // namespace

IndexSummary cmd_index(const fs::path& corpus_path, const fs::path& out, const retrieval::ChunkingConfig& chunking,
                       bool force, std::ostream& log) {
  if (fs::exists(out) && !force) {
    throw InputError("refusing to overwrite existing " + out.string() + " (pass --force)");
  }
  auto corpus = retrieval::ingest_corpus(corpus_path, chunking);
  for (const auto& w : corpus.warnings) log << "warning: " << w << "\n";
  auto index = retrieval::build_index(corpus);
  retrieval::save_index(index, out);
  IndexSummary summary{index.size(), index.vocabulary_size(), corpus.skipped_documents};
  log << "indexed " << summary.chunks << " chunks, vocabulary " << summary.vocabulary << ", skipped "
      << summary.skipped_documents << " empty documents -> " << out.string() << "\n";
  return summary;
}

RunOutput cmd_run(const config::RunConfig& cfg, const pipeline::AblationSet& switches, const fs::path& out_dir,
                  std::ostream& log) {
  cfg.validate();
  auto questions = pipeline::load_dataset(cfg.dataset_path);
  auto rt = build_runtime(cfg, log);
  auto out = run_and_write(cfg, rt, questions, switches, out_dir, log);
  log << "run " << out.fingerprint << ": " << out.traces.size() << " traces -> " << out_dir.string() << "\n";
  return out;
}

std::vector<pipeline::PipelineTrace> load_traces(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("trace directory does not exist: " + dir.string());
  auto source = fs::is_directory(dir / "traces") ? dir / "traces" : dir;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(source)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<pipeline::PipelineTrace> traces;
  for (const auto& f : files) {
    try {
      traces.push_back(pipeline::trace_from_json(json::parse(read_file(f))));
    } catch (const json::parse_error& e) {
      throw InputError(f.string() + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(f.string() + ": " + e.what());
    }
  }
  return traces;
}

eval::StageMetrics cmd_eval(const config::RunConfig& config, const fs::path& trace_dir, const fs::path& dataset_path,
                            std::ostream& log) {
  auto cfg = config;
  if (!dataset_path.empty()) cfg.dataset_path = dataset_path;
  cfg.validate();
  auto questions = pipeline::load_dataset(cfg.dataset_path);
  auto traces = load_traces(trace_dir);

  std::set<std::string> dataset_ids;
  for (const auto& q : questions) dataset_ids.insert(q.id);
  std::vector<std::string> unmatched;
  for (const auto& t : traces) {
    if (!dataset_ids.contains(t.question_id)) unmatched.push_back(t.question_id);
  }
  if (!traces.empty() && unmatched.size() == traces.size()) {
    throw InputError("no trace matches the dataset; unmatched qids: " + text::join(unmatched, ", "));
  }

  auto rt = build_runtime(cfg, log);
  auto report = report_for(traces, questions, rt, cfg);
  for (const auto& qid : report.orphans) log << "warning: orphan trace " << qid << " (not in dataset)\n";
  if (!report.missing.empty()) {
    log << report.missing.size() << " missing trace(s): " << text::join(report.missing, ", ") << "\n";
  }
  return report;
}

AblationOutput cmd_ablate(const config::RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  if (cfg.ablation.protocol == config::AblationProtocol::none) {
    throw InputError("ablate needs ablation.protocol leave_one_out or progressive");
  }
  cfg.validate();
  auto switches = cfg.ablation.switches.empty() ? pipeline::all_switches() : cfg.ablation.switches;
  if (cfg.ablation.protocol == config::AblationProtocol::progressive) {
    // Cumulative removal always follows pipeline order.
    std::vector<pipeline::Switch> ordered;
    for (auto s : pipeline::all_switches()) {
      if (std::find(switches.begin(), switches.end(), s) != switches.end()) ordered.push_back(s);
    }
    switches = std::move(ordered);
  }

  auto questions = pipeline::load_dataset(cfg.dataset_path);
  auto rt = build_runtime(cfg, log);

  AblationOutput out;
  out.rows.push_back({"GroupRAG", {}, "", {}, std::nullopt});
  pipeline::AblationSet cumulative;
  for (auto s : switches) {
    const auto name = std::string(pipeline::to_string(s));
    if (cfg.ablation.protocol == config::AblationProtocol::leave_one_out) {
      out.rows.push_back({"w/o " + name, {s}, "", {}, std::nullopt});
    } else {
      cumulative.insert(s);
      out.rows.push_back({"-" + name, cumulative, "", {}, std::nullopt});
    }
  }

  json summary = json::array();
  std::vector<std::pair<std::string, eval::StageMetrics>> table_rows;
  std::vector<std::optional<double>> deltas;
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    auto& row = out.rows[i];
    auto slug = i == 0 ? std::string("00_full") : (i < 10 ? "0" : "") + std::to_string(i) + "_" + switch_names(row.switches);
    for (auto& c : slug) {
      if (c == ',' || c == '.') c = '_';
    }
    auto result = run_and_write(cfg, rt, questions, row.switches, out_dir / slug, log);
    row.fingerprint = result.fingerprint;
    row.report = std::move(result.report);
    if (cfg.ablation.protocol == config::AblationProtocol::progressive && i > 0) {
      const auto& prev = out.rows[i - 1].report.answer_accuracy.value;
      const auto& cur = row.report.answer_accuracy.value;
      if (prev && cur) row.delta = (*cur - *prev) * 100.0;
    }
    log << row.name << ": " << row.fingerprint << "\n";
    table_rows.emplace_back(row.name, row.report);
    deltas.push_back(row.delta);
    summary.push_back({{"name", row.name},
                       {"switches", switch_names(row.switches)},
                       {"fingerprint", row.fingerprint},
                       {"dir", slug},
                       {"delta", row.delta ? json(*row.delta) : json(nullptr)},
                       {"report", eval::report_to_json(row.report)}});
  }
  const bool progressive = cfg.ablation.protocol == config::AblationProtocol::progressive;
  out.table = eval::render_table(table_rows, progressive ? &deltas : nullptr);
  write_file(out_dir / "comparison.json",
             json{{"protocol", config::to_string(cfg.ablation.protocol)}, {"rows", std::move(summary)}}.dump(2) + "\n");
  write_file(out_dir / "comparison.txt", out.table);
  return out;
}

policy::TrainResult cmd_train_policy(const fs::path& instances, const fs::path& out_dir,
                                     const TrainPolicyOptions& options, std::ostream& log) {
  auto dataset = policy::load_instances(instances);
  if (dataset.empty()) throw InputError("no instances in " + instances.string());
  const auto policy_file = out_dir / "policy.json";
  if (fs::exists(policy_file) && !options.force) {
    throw InputError("refusing to overwrite existing " + policy_file.string() + " (pass --force)");
  }
  auto result = policy::train_policy(dataset, options.train);

  fs::create_directories(out_dir);
  policy::save_policy(result.params, options.train.wif, policy_file);
  std::ostringstream csv;
  csv << "epoch,mean_wif\n" << std::setprecision(17);
  for (std::size_t e = 0; e < result.history.size(); ++e) csv << e + 1 << "," << result.history[e] << "\n";
  write_file(out_dir / "history.csv", csv.str());
  log << "trained on " << dataset.size() << " instances for " << options.train.epochs << " epoch(s)";
  if (!result.history.empty()) log << ", final mean WIF " << result.history.back();
  log << " -> " << policy_file.string() << "\n";
  return result;
}

}  // namespace grouprag::harness
