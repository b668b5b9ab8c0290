#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace grouprag::llm {

enum class StageTag { extract, group, local, select, synthesize, align, judge };

std::string_view to_string(StageTag tag);
StageTag stage_tag_from_string(std::string_view name);  // throws InputError
const std::vector<StageTag>& all_stage_tags();

struct CompletionRequest {
  StageTag stage_tag = StageTag::extract;
  std::string system_prompt;
  std::string user_prompt;
  int max_tokens = 1024;
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

struct CompletionResult {
  std::string text;
  std::string backend_id;
  std::int64_t latency_ms = 0;
  int attempt_count = 1;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual CompletionResult complete(const CompletionRequest& request) = 0;
  virtual std::string id() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted mock

struct MockRule {
  std::optional<StageTag> stage;  // nullopt matches any stage
  std::string match;
  bool regex = false;
  std::string response;
};

/// Ordered rules; the first rule whose stage and matcher accept the request
/// wins. Matching looks at the user prompt only.
class MockScript {
 public:
  MockScript() = default;
  MockScript(std::vector<MockRule> rules, std::optional<std::string> default_response);

  /// JSONL, one rule per line: {"stage", "match", "response"} with optional
  /// "regex": true. A match string of the form "re:<pattern>" is also treated
  /// as a regex. A line {"default": "<text>"} sets the fallback response and
  /// "stage": "*" matches every stage.
  static MockScript parse_jsonl(std::string_view content, const std::string& origin = "<memory>");
  static MockScript load(const std::filesystem::path& path);

  /// nullopt when no rule matches and there is no default.
  std::optional<std::string> respond(const CompletionRequest& request) const;

  const std::vector<MockRule>& rules() const noexcept { return rules_; }
  const std::optional<std::string>& default_response() const noexcept { return default_; }

 private:
  std::vector<MockRule> rules_;
  std::vector<std::optional<std::regex>> compiled_;
  std::optional<std::string> default_;
};

class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockScript script, std::string name = "mock");

  /// Throws ScriptError when the script has no answer for the request.
  CompletionResult complete(const CompletionRequest& request) override;
  std::string id() const override { return "mock:" + name_; }

 private:
  MockScript script_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend

struct HttpBackendOptions {
  std::string url;    // base URL, e.g. http://localhost:8000/v1
  std::string model;
  std::string api_key;  // resolved secret; empty means no Authorization header
  std::chrono::milliseconds timeout{60'000};
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};  // doubled after each failure
};

/// POSTs chat-completion requests to `<url>/chat/completions`. Transport
/// errors, HTTP 429 and 5xx are retried with exponential backoff; other 4xx
/// responses fail immediately. Throws BackendError with the attempt count.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendOptions options);

  CompletionResult complete(const CompletionRequest& request) override;
  std::string id() const override { return "http:" + options_.model; }

  /// Request body exactly as sent on the wire.
  static nlohmann::json request_body(const CompletionRequest& request, const std::string& model);

 private:
  HttpBackendOptions options_;
};

// ---------------------------------------------------------------------------
// Config-driven construction and routing

struct BackendConfig {
  std::string kind = "mock";  // "mock" | "http"
  std::string url;
  std::string model;
  std::string api_key_env;
  int max_in_flight = 4;
  std::filesystem::path script;  // mock only
  double timeout_s = 60.0;
  int max_attempts = 3;
  int initial_backoff_ms = 500;

  static BackendConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
};

std::shared_ptr<Backend> make_backend(const BackendConfig& config);

/// Dispatches each request by its stage tag and bounds the number of
/// concurrent in-flight calls. Requests pass through unmodified.
class Gateway {
 public:
  explicit Gateway(std::shared_ptr<Backend> fallback, int max_in_flight = 4);

  void route(StageTag tag, std::shared_ptr<Backend> backend);
  const Backend& backend_for(StageTag tag) const;

  CompletionResult complete(const CompletionRequest& request) const;

  int max_in_flight() const noexcept { return limiter_->capacity; }

 private:
  struct Limiter {
    explicit Limiter(int n) : capacity(n), available(n) {}
    int capacity;
    int available;
    std::mutex mutex;
    std::condition_variable cv;
  };

  std::shared_ptr<Backend> fallback_;
  std::map<StageTag, std::shared_ptr<Backend>> routes_;
  std::shared_ptr<Limiter> limiter_;
};

// ---------------------------------------------------------------------------
// Prompt templates

struct PromptTemplate {
  std::string system;
  std::string user;
};

/// Named templates with {{placeholder}} substitution. The built-in set is
/// compiled from core/prompts; a directory of <name>.txt files overrides
/// individual entries.
class PromptLibrary {
 public:
  static PromptLibrary builtin();
  static PromptLibrary with_overrides(const std::filesystem::path& dir);

  /// Splits "### system" / "### user" sections.
  static PromptTemplate parse(std::string_view text);

  const PromptTemplate& get(const std::string& name) const;  // throws InputError
  void set(const std::string& name, PromptTemplate tmpl);

  /// Substitutes {{key}} for every entry in `values`; other text is untouched.
  static std::string render(std::string_view tmpl, const std::map<std::string, std::string>& values);

 private:
  std::map<std::string, PromptTemplate> templates_;
};

}  // namespace grouprag::llm
