#include "steprag/http_backend.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "steprag/error.hpp"

namespace steprag {

using nlohmann::json;

Endpoint parse_endpoint(std::string_view url) {
  std::string_view rest = url;
  std::string scheme;
  if (rest.rfind("http://", 0) == 0) {
    scheme = "http://";
  } else if (rest.rfind("https://", 0) == 0) {
    scheme = "https://";
  } else {
    throw Error(ErrorKind::kConfigError, "endpoint must start with http:// or https://: '" +
                                             std::string(url) + "'");
  }
  rest.remove_prefix(scheme.size());
  const auto slash = rest.find('/');
  const std::string_view host = rest.substr(0, slash);
  if (host.empty()) throw Error(ErrorKind::kConfigError, "endpoint lacks a host: " + std::string(url));
  Endpoint e;
  e.origin = scheme + std::string(host);
  if (slash != std::string_view::npos) {
    e.base_path = std::string(rest.substr(slash));
    while (!e.base_path.empty() && e.base_path.back() == '/') e.base_path.pop_back();
  }
  return e;
}

HttpOptions HttpOptions::from_config(const EngineConfig& config) {
  HttpOptions o;
  o.max_retries = config.max_retries;
  o.timeout_ms = config.timeout_ms;
  o.backoff_initial_ms = config.backoff_initial_ms;
  o.backoff_factor = config.backoff_factor;
  o.api_key_env = config.api_key_env;
  return o;
}

RetryingHttpClient::RetryingHttpClient(Endpoint endpoint, HttpOptions options)
    : endpoint_(std::move(endpoint)), options_(std::move(options)) {}

json RetryingHttpClient::post_json(std::string_view path, const json& body, CallInfo& info,
                                   const std::function<bool(const json&)>& accept) const {
  httplib::Client client(endpoint_.origin);
  const auto timeout = std::chrono::milliseconds(options_.timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  httplib::Headers headers;
  if (!options_.api_key_env.empty()) {
    if (const char* key = std::getenv(options_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }
  const std::string url = endpoint_.base_path + std::string(path);
  const std::string payload = body.dump();

  std::string last_failure;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) {
      info.retry_count = attempt;
      const double delay =
          options_.backoff_initial_ms * std::pow(options_.backoff_factor, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay));
    }
    auto res = client.Post(url, headers, payload, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    const int status = res->status;
    if (status == 401 || status == 403) {
      throw Error(ErrorKind::kAuthError,
                  endpoint_.origin + url + " rejected credentials (HTTP " + std::to_string(status) + ")");
    }
    if (status == 429 || status >= 500) {
      last_failure = "HTTP " + std::to_string(status);
      continue;
    }
    if (status < 200 || status >= 300) {
      throw Error(ErrorKind::kBackendUnavailable,
                  endpoint_.origin + url + " returned HTTP " + std::to_string(status));
    }
    json parsed = json::parse(res->body, nullptr, false);
    if (parsed.is_discarded()) {
      last_failure = "response is not JSON";
      continue;
    }
    if (accept && !accept(parsed)) {
      last_failure = "response rejected: " + res->body.substr(0, 200);
      continue;
    }
    return parsed;
  }
  throw Error(ErrorKind::kBackendUnavailable, endpoint_.origin + url + " failed after " +
                                                  std::to_string(options_.max_retries) +
                                                  " retries: " + last_failure);
}

namespace {

bool has_content(const json& j) {
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    return content.is_string() && !content.get<std::string>().empty();
  } catch (const json::exception&) {
    return false;
  }
}

}  // namespace

std::string chat_complete(const RetryingHttpClient& client, const std::string& model,
                          const std::string& system, const std::string& user, double temperature,
                          CallInfo& info) {
  json messages = json::array();
  if (!system.empty()) messages.push_back({{"role", "system"}, {"content", system}});
  messages.push_back({{"role", "user"}, {"content", user}});
  const json body{{"model", model}, {"messages", messages}, {"temperature", temperature}};
  const json reply = client.post_json("/v1/chat/completions", body, info, has_content);
  if (reply.contains("usage") && reply["usage"].is_object()) {
    const auto& usage = reply["usage"];
    if (usage.contains("prompt_tokens")) info.prompt_tokens = usage["prompt_tokens"].get<int>();
    if (usage.contains("completion_tokens")) {
      info.completion_tokens = usage["completion_tokens"].get<int>();
    }
  }
  return reply["choices"][0]["message"]["content"].get<std::string>();
}

namespace {

std::map<std::string, std::string> state_values(const ReasoningState& state) {
  return {{"transcript", render_transcript(state)},
          {"next_index", std::to_string(state.step_count() + 1)}};
}

}  // namespace

HttpGenerator::HttpGenerator(GeneratorRole role, HttpOptions options,
                             std::shared_ptr<const PromptLibrary> prompts)
    : role_(std::move(role)),
      client_(parse_endpoint(role_.endpoint), std::move(options)),
      prompts_(std::move(prompts)) {
  if (role_.temperature < 0.0) throw Error(ErrorKind::kConfigError, "temperature must be >= 0");
}

std::string HttpGenerator::propose(const ReasoningState& state, const SampleRequest& sample,
                                   CallInfo& info) {
  return chat_complete(client_, role_.model, prompts_->raw(role_.system_prompt_id),
                       prompts_->render("propose", state_values(state)),
                       sample.greedy ? 0.0 : role_.temperature, info);
}

std::string HttpGenerator::refine(const ReasoningState& state, const ReasoningStep& step,
                                  std::string_view explanation, double score, CallInfo& info) {
  auto values = state_values(state);
  values["step"] = render_step(step);
  values["explanation"] = std::string(explanation);
  values["score"] = format_score(score);
  return chat_complete(client_, role_.model, prompts_->raw(role_.system_prompt_id),
                       prompts_->render("refine", values), role_.temperature, info);
}

std::string HttpGenerator::finalize(const ReasoningState& state, CallInfo& info) {
  return chat_complete(client_, role_.model, prompts_->raw(role_.system_prompt_id),
                       prompts_->render("finalize", state_values(state)), 0.0, info);
}

HttpRewardModel::HttpRewardModel(const std::string& endpoint, HttpOptions options)
    : client_(parse_endpoint(endpoint), std::move(options)) {}

double HttpRewardModel::score(const ReasoningState& state, const ReasoningStep& step,
                              CallInfo& info) {
  const json reply = client_.post_json(
      "/score", {{"state_transcript", render_transcript(state)}, {"step_text", render_step(step)}},
      info, [](const json& j) { return j.contains("score") && j["score"].is_number(); });
  return reply["score"].get<double>();
}

HttpExplainer::HttpExplainer(const std::string& endpoint, std::string model, HttpOptions options,
                             std::shared_ptr<const PromptLibrary> prompts)
    : client_(parse_endpoint(endpoint), std::move(options)),
      model_(std::move(model)),
      prompts_(std::move(prompts)) {}

std::string HttpExplainer::explain(const ReasoningState& state, const ReasoningStep& step,
                                   double score, CallInfo& info) {
  auto values = state_values(state);
  values["step"] = render_step(step);
  values["score"] = format_score(score);
  return chat_complete(client_, model_, "", prompts_->render("explain", values), 0.0, info);
}

HttpRetriever::HttpRetriever(const std::string& endpoint, HttpOptions options)
    : client_(parse_endpoint(endpoint), std::move(options)) {}

std::vector<Document> HttpRetriever::search(std::string_view query, int k, CallInfo& info) {
  const json reply = client_.post_json(
      "/search", {{"query", query}, {"k", k}}, info,
      [](const json& j) { return j.contains("documents") && j["documents"].is_array(); });
  std::vector<Document> docs;
  for (const auto& d : reply["documents"]) {
    docs.push_back({d.at("text").get<std::string>(), d.value("score", 0.0)});
  }
  return docs;
}

HttpJudge::HttpJudge(const std::string& endpoint, std::string model, HttpOptions options)
    : client_(parse_endpoint(endpoint), std::move(options)), model_(std::move(model)) {}

std::string HttpJudge::complete(std::string_view prompt, CallInfo& info) {
  return chat_complete(client_, model_, "", std::string(prompt), 0.0, info);
}

std::string policy_model_for_tag(const EngineConfig& config, const std::string& tag) {
  std::string model = config.policy_model_template;
  if (model.empty()) return config.generator_model;
  for (auto pos = model.find("{tag}"); pos != std::string::npos; pos = model.find("{tag}")) {
    model.replace(pos, 5, tag);
  }
  return model;
}

Backends make_http_backends(const EngineConfig& config, Strength strength,
                            const std::string& generator_model) {
  auto require = [](const std::string& value, const char* key) {
    if (value.empty()) {
      throw Error(ErrorKind::kConfigError, std::string(key) + " is required for the http backend");
    }
  };
  const bool strong = strength == Strength::kStrong;
  GeneratorRole role;
  role.endpoint = strong ? config.strong_generator_endpoint : config.generator_endpoint;
  role.model = strong ? config.strong_generator_model : config.generator_model;
  if (!generator_model.empty()) role.model = generator_model;
  role.temperature = config.generator_temperature;
  role.strength = strength;
  require(role.endpoint, strong ? "strong_generator_endpoint" : "generator_endpoint");
  require(config.prm_endpoint, "prm_endpoint");
  require(config.pem_endpoint, "pem_endpoint");
  require(config.retriever_endpoint, "retriever_endpoint");

  const auto options = HttpOptions::from_config(config);
  const auto prompts = std::make_shared<const PromptLibrary>(
      config.prompt_dir.empty() ? default_prompt_dir() : std::filesystem::path(config.prompt_dir),
      config.prompt_version);
  Backends b;
  b.generator = std::make_shared<HttpGenerator>(role, options, prompts);
  b.prm = std::make_shared<HttpRewardModel>(config.prm_endpoint, options);
  b.pem = std::make_shared<HttpExplainer>(config.pem_endpoint, config.pem_model, options, prompts);
  b.retriever = std::make_shared<HttpRetriever>(config.retriever_endpoint, options);
  const std::string judge_endpoint =
      config.judge_endpoint.empty() ? role.endpoint : config.judge_endpoint;
  b.judge = std::make_shared<HttpJudge>(judge_endpoint,
                                        config.judge_model.empty() ? config.generator_model
                                                                   : config.judge_model,
                                        options);
  return b;
}

}  // namespace steprag
