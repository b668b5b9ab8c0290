#include "grouprag/gateway.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "grouprag/error.hpp"
#include "grouprag/text.hpp"

namespace grouprag::llm {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(StageTag tag) {
  switch (tag) {
    case StageTag::extract: return "extract";
    case StageTag::group: return "group";
    case StageTag::local: return "local";
    case StageTag::select: return "select";
    case StageTag::synthesize: return "synthesize";
    case StageTag::align: return "align";
    case StageTag::judge: return "judge";
  }
  return "unknown";
}

const std::vector<StageTag>& all_stage_tags() {
  static const std::vector<StageTag> tags = {StageTag::extract, StageTag::group,      StageTag::local,
                                             StageTag::select,  StageTag::synthesize, StageTag::align,
                                             StageTag::judge};
  return tags;
}

StageTag stage_tag_from_string(std::string_view name) {
  for (auto tag : all_stage_tags()) {
    if (to_string(tag) == name) return tag;
  }
  throw InputError("unknown stage tag: " + std::string(name));
}

// MockScript -------------------------------------------------------------------

MockScript::MockScript(std::vector<MockRule> rules, std::optional<std::string> default_response)
    : rules_(std::move(rules)), default_(std::move(default_response)) {
  compiled_.reserve(rules_.size());
  for (const auto& rule : rules_) {
    if (rule.regex) {
      try {
        compiled_.emplace_back(std::regex(rule.match, std::regex::ECMAScript));
      } catch (const std::regex_error& e) {
        throw InputError("mock rule has invalid regex '" + rule.match + "': " + e.what());
      }
    } else {
      compiled_.emplace_back(std::nullopt);
    }
  }
}

MockScript MockScript::parse_jsonl(std::string_view content, const std::string& origin) {
  std::vector<MockRule> rules;
  std::optional<std::string> fallback;
  std::istringstream lines{std::string(content)};
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    auto where = origin + ":" + std::to_string(line_no);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(where + ": malformed JSON: " + e.what());
    }
    if (!record.is_object()) throw InputError(where + ": expected an object");
    if (record.contains("default")) {
      fallback = record["default"].get<std::string>();
      continue;
    }
    try {
      MockRule rule;
      auto stage = record.at("stage").get<std::string>();
      if (stage != "*") rule.stage = stage_tag_from_string(stage);
      rule.match = record.at("match").get<std::string>();
      rule.response = record.at("response").get<std::string>();
      rule.regex = record.value("regex", false);
      if (!rule.regex && rule.match.starts_with("re:")) {
        rule.regex = true;
        rule.match = rule.match.substr(3);
      }
      rules.push_back(std::move(rule));
    } catch (const json::exception& e) {
      throw InputError(where + ": expected {\"stage\", \"match\", \"response\"}: " + e.what());
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  return MockScript(std::move(rules), std::move(fallback));
}

MockScript MockScript::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read mock script " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_jsonl(ss.str(), path.string());
}

std::optional<std::string> MockScript::respond(const CompletionRequest& request) const {
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    const auto& rule = rules_[i];
    if (rule.stage && *rule.stage != request.stage_tag) continue;
    bool hit = compiled_[i] ? std::regex_search(request.user_prompt, *compiled_[i])
                            : request.user_prompt.find(rule.match) != std::string::npos;
    if (hit) return rule.response;
  }
  return default_;
}

MockBackend::MockBackend(MockScript script, std::string name)
    : script_(std::move(script)), name_(std::move(name)) {}

CompletionResult MockBackend::complete(const CompletionRequest& request) {
  auto response = script_.respond(request);
  if (!response) {
    throw ScriptError("mock script '" + name_ + "' has no rule for stage " +
                      std::string(to_string(request.stage_tag)) + " and no default response");
  }
  return {*response, id(), 0, 1};
}

// Config -------------------------------------------------------------------------

BackendConfig BackendConfig::from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw InputError("backend config must be an object");
  BackendConfig cfg;
  try {
    cfg.kind = doc.value("kind", cfg.kind);
    cfg.url = doc.value("url", cfg.url);
    cfg.model = doc.value("model", cfg.model);
    cfg.api_key_env = doc.value("api_key_env", cfg.api_key_env);
    cfg.max_in_flight = doc.value("max_in_flight", cfg.max_in_flight);
    cfg.timeout_s = doc.value("timeout_s", cfg.timeout_s);
    cfg.max_attempts = doc.value("max_attempts", cfg.max_attempts);
    cfg.initial_backoff_ms = doc.value("initial_backoff_ms", cfg.initial_backoff_ms);
    if (doc.contains("script")) {
      fs::path script = doc["script"].get<std::string>();
      cfg.script = script.is_absolute() ? script : base_dir / script;
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("backend config: ") + e.what());
  }
  if (cfg.kind != "mock" && cfg.kind != "http") throw InputError("backend.kind must be 'http' or 'mock'");
  if (cfg.kind == "http" && cfg.url.empty()) throw InputError("backend.url is required for http backends");
  if (cfg.kind == "mock" && cfg.script.empty()) throw InputError("backend.script is required for mock backends");
  if (cfg.max_in_flight < 1) throw InputError("backend.max_in_flight must be >= 1");
  if (cfg.max_attempts < 1) throw InputError("backend.max_attempts must be >= 1");
  return cfg;
}

json BackendConfig::to_json() const {
  json doc = {{"kind", kind}, {"max_in_flight", max_in_flight}};
  if (kind == "http") {
    doc["url"] = url;
    doc["model"] = model;
    doc["api_key_env"] = api_key_env;
    doc["timeout_s"] = timeout_s;
    doc["max_attempts"] = max_attempts;
    doc["initial_backoff_ms"] = initial_backoff_ms;
  } else {
    doc["script"] = script.filename().string();
  }
  return doc;
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config) {
  if (config.kind == "mock") {
    return std::make_shared<MockBackend>(MockScript::load(config.script), config.script.stem().string());
  }
  HttpBackendOptions options;
  options.url = config.url;
  options.model = config.model;
  if (!config.api_key_env.empty()) {
    if (const char* key = std::getenv(config.api_key_env.c_str())) options.api_key = key;
  }
  options.timeout = std::chrono::milliseconds(static_cast<long long>(config.timeout_s * 1000.0));
  options.max_attempts = config.max_attempts;
  options.initial_backoff = std::chrono::milliseconds(config.initial_backoff_ms);
  return std::make_shared<HttpBackend>(std::move(options));
}

// Gateway ------------------------------------------------------------------------

Gateway::Gateway(std::shared_ptr<Backend> fallback, int max_in_flight)
    : fallback_(std::move(fallback)), limiter_(std::make_shared<Limiter>(std::max(1, max_in_flight))) {
  if (!fallback_) throw InputError("gateway requires a backend");
}

void Gateway::route(StageTag tag, std::shared_ptr<Backend> backend) {
  if (!backend) throw InputError("gateway route requires a backend");
  routes_[tag] = std::move(backend);
}

const Backend& Gateway::backend_for(StageTag tag) const {
  auto it = routes_.find(tag);
  return it == routes_.end() ? *fallback_ : *it->second;
}

CompletionResult Gateway::complete(const CompletionRequest& request) const {
  if (request.max_tokens < 1) throw InputError("completion request needs max_tokens >= 1");
  if (request.temperature < 0.0) throw InputError("completion request needs temperature >= 0");
  auto it = routes_.find(request.stage_tag);
  Backend& backend = it == routes_.end() ? *fallback_ : *it->second;

  {
    std::unique_lock lock(limiter_->mutex);
    limiter_->cv.wait(lock, [&] { return limiter_->available > 0; });
    --limiter_->available;
  }
  struct Release {
    Limiter& l;
    ~Release() {
      {
        std::lock_guard lock(l.mutex);
        ++l.available;
      }
      l.cv.notify_one();
    }
  } release{*limiter_};
  return backend.complete(request);
}

}  // namespace grouprag::llm
