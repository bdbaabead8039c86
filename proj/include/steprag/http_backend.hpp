#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "steprag/config.hpp"
#include "steprag/gateway.hpp"
#include "steprag/prompts.hpp"

namespace steprag {

struct Endpoint {
  std::string origin;     // scheme://host[:port]
  std::string base_path;  // no trailing slash; may be empty
};

/// Throws ConfigError unless the URL is http(s)://host[:port][/path].
Endpoint parse_endpoint(std::string_view url);

struct HttpOptions {
  int max_retries = 3;
  int timeout_ms = 60000;
  int backoff_initial_ms = 500;
  double backoff_factor = 2.0;
  std::string api_key_env = "OPENAI_API_KEY";

  static HttpOptions from_config(const EngineConfig& config);
};

/// JSON POST with the retry policy: 429, 5xx, transport failures and
/// rejected bodies are retried with exponential backoff; 401/403 raise
/// AuthError at once; other statuses raise BackendUnavailable.
class RetryingHttpClient {
 public:
  RetryingHttpClient(Endpoint endpoint, HttpOptions options);

  /// `accept` may reject a 200 body (for example an empty completion),
  /// which is then retried like a transient failure.
  nlohmann::json post_json(std::string_view path, const nlohmann::json& body, CallInfo& info,
                           const std::function<bool(const nlohmann::json&)>& accept = {}) const;

  const Endpoint& endpoint() const noexcept { return endpoint_; }

 private:
  Endpoint endpoint_;
  HttpOptions options_;
};

/// OpenAI-compatible chat completion returning choices[0].message.content.
std::string chat_complete(const RetryingHttpClient& client, const std::string& model,
                          const std::string& system, const std::string& user, double temperature,
                          CallInfo& info);

class HttpGenerator final : public Generator {
 public:
  HttpGenerator(GeneratorRole role, HttpOptions options, std::shared_ptr<const PromptLibrary> prompts);
  std::string propose(const ReasoningState& state, const SampleRequest& sample,
                      CallInfo& info) override;
  std::string refine(const ReasoningState& state, const ReasoningStep& step,
                     std::string_view explanation, double score, CallInfo& info) override;
  std::string finalize(const ReasoningState& state, CallInfo& info) override;
  const GeneratorRole& role() const override { return role_; }

 private:
  GeneratorRole role_;
  RetryingHttpClient client_;
  std::shared_ptr<const PromptLibrary> prompts_;
};

/// POST {endpoint}/score {state_transcript, step_text} -> {score}.
class HttpRewardModel final : public RewardModel {
 public:
  HttpRewardModel(const std::string& endpoint, HttpOptions options);
  double score(const ReasoningState& state, const ReasoningStep& step, CallInfo& info) override;

 private:
  RetryingHttpClient client_;
};

class HttpExplainer final : public Explainer {
 public:
  HttpExplainer(const std::string& endpoint, std::string model, HttpOptions options,
                std::shared_ptr<const PromptLibrary> prompts);
  std::string explain(const ReasoningState& state, const ReasoningStep& step, double score,
                      CallInfo& info) override;

 private:
  RetryingHttpClient client_;
  std::string model_;
  std::shared_ptr<const PromptLibrary> prompts_;
};

/// POST {endpoint}/search {query, k} -> {documents:[{text, score}]}.
class HttpRetriever final : public Retriever {
 public:
  HttpRetriever(const std::string& endpoint, HttpOptions options);
  std::vector<Document> search(std::string_view query, int k, CallInfo& info) override;

 private:
  RetryingHttpClient client_;
};

/// Sends the judge prompt as the only user message at temperature 0.
class HttpJudge final : public Judge {
 public:
  HttpJudge(const std::string& endpoint, std::string model, HttpOptions options);
  std::string complete(std::string_view prompt, CallInfo& info) override;

 private:
  RetryingHttpClient client_;
  std::string model_;
};

/// Model name for a checkpoint tag: policy_model_template with {tag}
/// replaced, or the plain generator model when no template is set.
std::string policy_model_for_tag(const EngineConfig& config, const std::string& tag);

/// All roles from the config. `generator_model` overrides the policy model.
Backends make_http_backends(const EngineConfig& config, Strength strength,
                            const std::string& generator_model = "");

}  // namespace steprag
