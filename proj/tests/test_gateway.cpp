#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "steprag/error.hpp"
#include "steprag/gateway.hpp"
#include "steprag/http_backend.hpp"
#include "steprag/prompts.hpp"
#include "steprag/sim_world.hpp"
#include "support.hpp"

using namespace steprag;
using nlohmann::json;

namespace {

// httplib server on an ephemeral port, torn down with the fixture.
class TestServer {
 public:
  TestServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~TestServer() {
    server_.stop();
    thread_.join();
  }
  httplib::Server& server() { return server_; }
  std::string url(const std::string& path = "") const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

HttpOptions fast_options() {
  HttpOptions o;
  o.max_retries = 3;
  o.timeout_ms = 2000;
  o.backoff_initial_ms = 1;
  o.backoff_factor = 2.0;
  o.api_key_env = "STEPRAG_TEST_KEY";
  return o;
}

json completion(const std::string& content) {
  return {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}},
          {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 3}}}};
}

// Canned step text for gateway plumbing tests.
class FixedGenerator : public Generator {
 public:
  explicit FixedGenerator(std::string text) : text_(std::move(text)) {}
  std::string propose(const ReasoningState&, const SampleRequest&, CallInfo&) override { return text_; }
  std::string refine(const ReasoningState&, const ReasoningStep&, std::string_view, double,
                     CallInfo&) override {
    return text_;
  }
  std::string finalize(const ReasoningState&, CallInfo&) override { return text_; }
  const GeneratorRole& role() const override { return role_; }

 private:
  std::string text_;
  GeneratorRole role_;
};

class FixedPrm : public RewardModel {
 public:
  explicit FixedPrm(double v) : v_(v) {}
  double score(const ReasoningState&, const ReasoningStep&, CallInfo&) override { return v_; }

 private:
  double v_;
};

}  // namespace

TEST_CASE("step protocol parsing") {
  const ReasoningStep s = parse_step_output("Sub-Query: X\nRetrieve: Yes\nThought: Y");
  CHECK(s.sub_query == "X");
  CHECK(s.retrieve);
  CHECK(s.thought == "Y");
  CHECK_FALSE(s.is_terminal);

  const ReasoningStep t = parse_step_output("Final Answer: 1454");
  CHECK(t.is_terminal);
  CHECK(t.thought == "1454");

  const ReasoningStep no = parse_step_output("sub-query: a\nretrieve: no\nthought: b\nmore b");
  CHECK_FALSE(no.retrieve);
  CHECK(no.thought == "b\nmore b");

  try {
    parse_step_output("I think the answer is probably Paris, but I'm not sure.");
    FAIL("expected ParseFailure");
  } catch (const ParseFailure& e) {
    CHECK(e.raw() == "I think the answer is probably Paris, but I'm not sure.");
  }
  CHECK_THROWS_AS(parse_step_output("Sub-Query: X\nRetrieve: Maybe\nThought: Y"), ParseFailure);
  CHECK_THROWS_AS(parse_step_output("Sub-Query: X\nThought: Y"), ParseFailure);
  CHECK(parse_final_answer("Final Answer: Paris\n") == "Paris");
  CHECK(parse_final_answer("  Paris  ") == "Paris");
}

TEST_CASE("simulated gateway is deterministic") {
  const auto world = sim::World::generate(sim::WorldSpec{});
  const Gateway a(sim::make_backends(world, 4), 1);
  const Gateway b(sim::make_backends(world, 4), 1);
  const ReasoningState root{world->questions()[0].text, {}};
  const auto first = a.propose_steps(root, 3);
  CHECK(first.size() == 3);
  CHECK(first == b.propose_steps(root, 3));
  CHECK(a.score_step(root, first[0]) == b.score_step(root, first[0]));
  CHECK(a.score_step(root, first[0]) == a.score_step(root, first[0]));
  CHECK(a.log().count(Role::kGenerator) == 3);
  CHECK(a.log().count(Role::kPrm) == 3);
}

TEST_CASE("retrieval fills the document and honours k") {
  const auto world = sim::World::generate(sim::WorldSpec{});
  const Gateway g(sim::make_backends(world, 4), 1);
  const auto& q = world->questions()[0];
  const std::string& rel = world->relation_names()[static_cast<std::size_t>(q.relations[0])];
  CHECK(g.retrieve(sim::hop_sub_query(rel, q.chain[0]), 1).size() <= 1);
  CHECK(g.retrieve("nothing here", 1).empty());
  CHECK_THROWS_AS(g.retrieve("x", 0), Error);
}

TEST_CASE("oracle-valued correct step scores at least one half without noise") {
  sim::WorldSpec spec;
  spec.prm_bias = {0.0};
  spec.prm_noise = {0.0};
  const auto world = sim::World::generate(spec);
  const Gateway g(sim::make_backends(world, 4), 1);
  for (const auto& q : world->questions()) {
    const auto gold = testing::gold_steps(*world, q);
    CHECK(g.score_step({q.text, {}}, gold[0]).value >= 0.5);
  }
}

TEST_CASE("PRM output outside (0,1) is rejected") {
  const auto world = sim::World::generate(sim::WorldSpec{});
  Backends b = sim::make_backends(world, 4);
  b.prm = std::make_shared<FixedPrm>(1.2);
  const Gateway g(b, 1);
  try {
    g.score_step({"Q", {}}, ReasoningStep::terminal("x"));
    FAIL("expected ScoreOutOfRange");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kScoreOutOfRange);
  }
  b.prm = std::make_shared<FixedPrm>(0.0);
  CHECK_THROWS_AS(Gateway(b, 1).score_step({"Q", {}}, ReasoningStep::terminal("x")), Error);
}

TEST_CASE("refinement may finish the chain") {
  const auto world = sim::World::generate(sim::WorldSpec{});
  const Gateway g = Gateway(sim::make_backends(world, 4), 1)
                        .with_generator(std::make_shared<FixedGenerator>("Final Answer: Lisbon"));
  ReasoningStep step;
  step.sub_query = "capital of Portugal";
  step.thought = "It is Porto.";
  const ReasoningStep refined = g.refine_step({"Q", {}}, step, "Wrong city.", {0.2, false});
  CHECK(refined.is_terminal);
  CHECK(refined.thought == "Lisbon");
}

TEST_CASE("helpful feedback turns a wrong step into the correct one") {
  sim::WorldSpec spec;
  spec.correctness = {1.0};
  spec.pem_mode = sim::PemMode::kHelpful;
  const auto world = sim::World::generate(spec);
  const Gateway g(sim::make_backends(world, 4), 1);
  for (const auto& q : world->questions()) {
    const auto decoys = world->decoys(q, 0, q.chain[1]);
    const auto wrong = testing::hop_step(*world, q, 0, q.chain[0], world->entities()[decoys.front()]);
    const ReasoningState root{q.text, {}};
    const ProcessScore s = g.score_step(root, wrong);
    const ReasoningStep fixed = g.refine_step(root, wrong, g.explain_step(root, wrong, s), s);
    CHECK(sim::claimed_object(fixed.thought) == q.chain[1]);
    CHECK(world->trace(q.text, {fixed}).intact);
  }
}

TEST_CASE("adversarial feedback makes the refined step score lower") {
  sim::WorldSpec spec;
  spec.prm_noise = {0.0};
  spec.pem_mode = sim::PemMode::kAdversarial;
  const auto world = sim::World::generate(spec);
  const Gateway g(sim::make_backends(world, 4), 1);
  for (const auto& q : world->questions()) {
    const auto gold = testing::gold_steps(*world, q);
    const ReasoningState root{q.text, {}};
    const ProcessScore s = g.score_step(root, gold[0]);
    const ReasoningStep worse = g.refine_step(root, gold[0], g.explain_step(root, gold[0], s), s);
    CHECK(g.score_step(root, worse).value < s.value);
  }
}

TEST_CASE("http retries 429 and records the retry count") {
  TestServer srv;
  std::atomic<int> hits{0};
  srv.server().Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (++hits <= 2) {
      res.status = 429;
      return;
    }
    const json body = json::parse(req.body);
    CHECK(body["model"] == "m");
    CHECK(body["temperature"] == 0.0);
    res.set_content(completion("hello").dump(), "application/json");
  });
  RetryingHttpClient client(parse_endpoint(srv.url()), fast_options());
  CallInfo info;
  CHECK(chat_complete(client, "m", "", "hi", 0.0, info) == "hello");
  CHECK(info.retry_count == 2);
  CHECK(info.prompt_tokens == 12);
  CHECK(info.completion_tokens == 3);
  CHECK(hits == 3);
}

TEST_CASE("http 401 raises AuthError without retrying") {
  TestServer srv;
  std::atomic<int> hits{0};
  srv.server().Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 401;
  });
  RetryingHttpClient client(parse_endpoint(srv.url()), fast_options());
  CallInfo info;
  try {
    chat_complete(client, "m", "", "hi", 0.0, info);
    FAIL("expected AuthError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kAuthError);
  }
  CHECK(hits == 1);
}

TEST_CASE("http empty responses are retried then reported unavailable") {
  TestServer srv;
  std::atomic<int> hits{0};
  srv.server().Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.set_content(completion("").dump(), "application/json");
  });
  RetryingHttpClient client(parse_endpoint(srv.url()), fast_options());
  CallInfo info;
  try {
    chat_complete(client, "m", "", "hi", 0.0, info);
    FAIL("expected BackendUnavailable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBackendUnavailable);
  }
  CHECK(hits == 4);
}

TEST_CASE("http unreachable endpoint is BackendUnavailable") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpOptions o = fast_options();
  o.max_retries = 1;
  RetryingHttpClient client(parse_endpoint("http://127.0.0.1:" + std::to_string(port)), o);
  CallInfo info;
  try {
    client.post_json("/score", json::object(), info);
    FAIL("expected BackendUnavailable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBackendUnavailable);
  }
}

TEST_CASE("http reward model and gateway range check") {
  TestServer srv;
  srv.server().Post("/prm/score", [&](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    CHECK(body.contains("state_transcript"));
    CHECK(body.contains("step_text"));
    res.set_content(json{{"score", 1.2}}.dump(), "application/json");
  });
  const auto world = sim::World::generate(sim::WorldSpec{});
  Backends b = sim::make_backends(world, 1);
  b.prm = std::make_shared<HttpRewardModel>(srv.url("/prm"), fast_options());
  const Gateway g(b, 1);
  try {
    g.score_step({"Q", {}}, ReasoningStep::terminal("x"));
    FAIL("expected ScoreOutOfRange");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kScoreOutOfRange);
  }
}

TEST_CASE("explain prompt carries the score to three decimals") {
  TestServer srv;
  std::string seen;
  srv.server().Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body)["messages"].back()["content"].get<std::string>();
    res.set_content(completion("The step uses the wrong entity.").dump(), "application/json");
  });
  auto prompts = std::make_shared<const PromptLibrary>(default_prompt_dir(), "v1");
  HttpExplainer pem(srv.url(), "critic", fast_options(), prompts);
  CallInfo info;
  ReasoningStep step;
  step.sub_query = "mother of Bob";
  step.thought = "The mother of Bob is Ann.";
  CHECK(pem.explain({"Who is the mother of Bob?", {}}, step, 0.41234, info) ==
        "The step uses the wrong entity.");
  CHECK(seen.find("0.412") != std::string::npos);
  CHECK(seen.find("0.4123") == std::string::npos);
  CHECK(seen.find("mother of Bob") != std::string::npos);
}

TEST_CASE("http generator and retriever wire through the gateway") {
  TestServer srv;
  std::atomic<int> temps_zero{0};
  srv.server().Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    if (body["temperature"] == 0.0) ++temps_zero;
    CHECK(body["messages"][0]["role"] == "system");
    res.set_content(completion("Sub-Query: capital of France\nRetrieve: Yes\nThought: Paris.").dump(),
                    "application/json");
  });
  srv.server().Post("/search", [&](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    CHECK(body["k"] == 1);
    res.set_content(json{{"documents", {{{"text", "Paris is the capital of France."}, {"score", 0.9}}}}}.dump(),
                    "application/json");
  });
  EngineConfig c;
  c.backend = "http";
  c.generator_endpoint = srv.url();
  c.generator_model = "policy";
  c.prm_endpoint = srv.url();
  c.pem_endpoint = srv.url();
  c.retriever_endpoint = srv.url();
  c.max_retries = 0;
  const Gateway g(make_http_backends(c, Strength::kWeak), c.top_k_iterative);
  const ReasoningStep greedy = g.sample_step({"What is the capital of France?", {}}, {"lookahead", 0, true});
  CHECK(greedy.document == "Paris is the capital of France.");
  CHECK(temps_zero == 1);
  g.sample_step({"What is the capital of France?", {}}, {"candidate", 0, false});
  CHECK(temps_zero == 1);
}

TEST_CASE("http backends require their endpoints") {
  EngineConfig c;
  c.backend = "http";
  try {
    make_http_backends(c, Strength::kWeak);
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfigError);
  }
  CHECK_THROWS_AS(parse_endpoint("ftp://x"), Error);
  const Endpoint e = parse_endpoint("https://api.example.com/v1/");
  CHECK(e.origin == "https://api.example.com");
  CHECK(e.base_path == "/v1");
}

TEST_CASE("policy model names follow the checkpoint tag") {
  EngineConfig c;
  c.generator_model = "base";
  CHECK(policy_model_for_tag(c, "iter-1") == "base");
  c.policy_model_template = "policy-{tag}";
  CHECK(policy_model_for_tag(c, "iter-2") == "policy-iter-2");
}

TEST_CASE("prompt templates") {
  CHECK(render_template("a {{x}} b {{y}}", {{"x", "1"}, {"y", "2"}}) == "a 1 b 2");
  CHECK_THROWS_AS(render_template("{{missing}}", {}), Error);
  CHECK(format_score(0.5) == "0.500");
  CHECK_THROWS_AS(PromptLibrary(default_prompt_dir(), "no-such-version"), Error);
}
