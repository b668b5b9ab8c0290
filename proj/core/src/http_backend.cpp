#include <thread>

#include <httplib.h>

#include "grouprag/error.hpp"
#include "grouprag/gateway.hpp"

namespace grouprag::llm {

using nlohmann::json;

namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // prefix without trailing slash
};

Endpoint split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InputError("backend.url must include a scheme: " + url);
  auto path_begin = url.find('/', scheme_end + 3);
  Endpoint ep;
  ep.origin = url.substr(0, path_begin);
  ep.path = path_begin == std::string::npos ? std::string() : url.substr(path_begin);
  while (!ep.path.empty() && ep.path.back() == '/') ep.path.pop_back();
  return ep;
}

bool retryable(int status) {
  return status == 429 || status >= 500;
}

}  // namespace

HttpBackend::HttpBackend(HttpBackendOptions options) : options_(std::move(options)) {
  split_url(options_.url);
  if (options_.max_attempts < 1) throw InputError("http backend needs max_attempts >= 1");
}

json HttpBackend::request_body(const CompletionRequest& request, const std::string& model) {
  json messages = json::array();
  if (!request.system_prompt.empty()) {
    messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
  }
  messages.push_back({{"role", "user"}, {"content", request.user_prompt}});
  return {
      {"model", model},
      {"messages", std::move(messages)},
      {"max_tokens", request.max_tokens},
      {"temperature", request.temperature},
      {"seed", request.seed},
      {"stream", false},
  };
}

CompletionResult HttpBackend::complete(const CompletionRequest& request) {
  const auto endpoint = split_url(options_.url);
  const auto body = request_body(request, options_.model).dump();

  httplib::Headers headers;
  if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);

  const auto started = std::chrono::steady_clock::now();
  auto backoff = options_.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
    httplib::Client client(endpoint.origin);
    auto secs = options_.timeout.count() / 1000;
    auto usecs = (options_.timeout.count() % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);

    auto response = client.Post(endpoint.path + "/chat/completions", headers, body, "application/json");
    if (!response) {
      last_error = "transport error: " + httplib::to_string(response.error());
    } else if (response->status == 200) {
      try {
        auto doc = json::parse(response->body);
        CompletionResult result;
        result.text = doc.at("choices").at(0).at("message").at("content").get<std::string>();
        result.backend_id = id();
        result.attempt_count = attempt;
        result.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - started)
                                .count();
        return result;
      } catch (const json::exception& e) {
        throw BackendError(std::string("malformed chat-completion response: ") + e.what(), attempt);
      }
    } else {
      last_error = "HTTP " + std::to_string(response->status);
      if (!retryable(response->status)) {
        throw BackendError(last_error + " from " + options_.url + ": " + response->body, attempt);
      }
    }
    if (attempt < options_.max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw BackendError(last_error + " from " + options_.url + " after " +
                         std::to_string(options_.max_attempts) + " attempts",
                     options_.max_attempts);
}

}  // namespace grouprag::llm
