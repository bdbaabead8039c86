#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <functional>
#include <random>

#include "steprag/engine.hpp"
#include "steprag/eval.hpp"
#include "steprag/sim_world.hpp"
#include "support.hpp"

using namespace steprag;

namespace {

using ProposeFn = std::function<std::string(const ReasoningState&, const SampleRequest&)>;
using ScoreFn = std::function<double(const ReasoningState&, const ReasoningStep&)>;

class ScriptedGenerator : public Generator {
 public:
  ScriptedGenerator(ProposeFn propose, std::string refined = "Sub-Query: fixed\nRetrieve: No\nThought: fixed")
      : propose_(std::move(propose)), refined_(std::move(refined)) {}
  std::string propose(const ReasoningState& s, const SampleRequest& r, CallInfo&) override {
    return propose_(s, r);
  }
  std::string refine(const ReasoningState&, const ReasoningStep&, std::string_view, double,
                     CallInfo&) override {
    return refined_;
  }
  std::string finalize(const ReasoningState&, CallInfo&) override { return "Final Answer: forced"; }
  const GeneratorRole& role() const override { return role_; }

 private:
  ProposeFn propose_;
  std::string refined_;
  GeneratorRole role_;
};

class ScriptedPrm : public RewardModel {
 public:
  explicit ScriptedPrm(ScoreFn fn) : fn_(std::move(fn)) {}
  double score(const ReasoningState& s, const ReasoningStep& step, CallInfo&) override {
    return fn_(s, step);
  }

 private:
  ScoreFn fn_;
};

class FailingPrm : public RewardModel {
 public:
  double score(const ReasoningState& s, const ReasoningStep&, CallInfo&) override {
    if (s.step_count() >= 1) throw Error(ErrorKind::kBackendUnavailable, "prm down");
    return 0.4;
  }
};

class QuietExplainer : public Explainer {
 public:
  std::string explain(const ReasoningState&, const ReasoningStep&, double, CallInfo&) override {
    return "try again";
  }
};

Gateway scripted(ProposeFn propose, ScoreFn score,
                 std::string refined = "Sub-Query: fixed\nRetrieve: No\nThought: fixed") {
  const auto world = sim::World::generate(sim::WorldSpec{});
  Backends b = sim::make_backends(world, 0);
  b.generator = std::make_shared<ScriptedGenerator>(std::move(propose), std::move(refined));
  b.prm = std::make_shared<ScriptedPrm>(std::move(score));
  b.pem = std::make_shared<QuietExplainer>();
  return Gateway(b, 1);
}

std::string numbered(std::uint64_t i) {
  return "Sub-Query: q" + std::to_string(i) + "\nRetrieve: No\nThought: t" + std::to_string(i);
}

SearchOptions plain_options(int M = 3) {
  SearchOptions o;
  o.M = M;
  o.lookahead = false;
  return o;
}

// Lookahead continuation: step k+1 of a chain, scored by depth.
Gateway chain_scored(std::vector<double> by_depth, bool terminal_after = false) {
  return scripted(
      [terminal_after](const ReasoningState& s, const SampleRequest&) {
        if (terminal_after && s.step_count() >= 2) return std::string("Final Answer: done");
        return numbered(s.step_count() + 1);
      },
      [by_depth](const ReasoningState& s, const ReasoningStep&) {
        return by_depth.at(std::min(s.step_count(), by_depth.size() - 1));
      });
}

}  // namespace

TEST_CASE("best candidate above the gate is accepted as is") {
  const std::vector<double> scores{0.2, 0.9, 0.5};
  const Gateway g = scripted([](const ReasoningState&, const SampleRequest& r) { return numbered(r.index); },
                             [&](const ReasoningState&, const ReasoningStep& step) {
                               return scores.at(static_cast<std::size_t>(step.sub_query[1] - '0'));
                             });
  const ReasoningEngine engine(g, plain_options());
  const auto [step, d] = engine.select_step({"Q", {}});
  CHECK(d.candidates.size() == 3);
  CHECK(d.chosen_index == 1);
  CHECK_FALSE(d.refined);
  CHECK(step.sub_query == "q1");
  CHECK(d.step_index == 1);
  CHECK_FALSE(d.pre_refine_score);
}

TEST_CASE("argmax is invariant to positive affine rescaling") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> scores(5);
    for (auto& s : scores) s = u(rng);
    const double a = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
    const double b = std::uniform_real_distribution<double>(0.0, 1.0 - a)(rng) * 0.99 + 0.001;
    auto run = [&](std::function<double(double)> map) {
      const Gateway g = scripted([](const ReasoningState&, const SampleRequest& r) { return numbered(r.index); },
                                 [&](const ReasoningState&, const ReasoningStep& step) {
                                   return map(scores.at(static_cast<std::size_t>(step.sub_query[1] - '0')));
                                 });
      SearchOptions o = plain_options(5);
      o.refinement = false;
      return ReasoningEngine(g, o).select_step({"Q", {}}).second.chosen_index;
    };
    CHECK(run([](double x) { return x; }) == run([&](double x) { return a * x + b * (1 - a) * 0.5; }));
  }
}

TEST_CASE("a low best candidate is explained and refined") {
  const Gateway g = scripted([](const ReasoningState&, const SampleRequest& r) { return numbered(r.index); },
                             [](const ReasoningState&, const ReasoningStep& step) {
                               return step.sub_query == "fixed" ? 0.8 : 0.3;
                             });
  const ReasoningEngine engine(g, plain_options());
  const auto [step, d] = engine.select_step({"Q", {}});
  CHECK(d.refined);
  CHECK(d.pre_refine_score == doctest::Approx(0.3));
  CHECK(d.post_refine_score == doctest::Approx(0.8));
  CHECK(step.sub_query == "fixed");
  CHECK(improvement_rate({d}) == 1.0);
  CHECK(g.log().count(Role::kPem) == 1);
}

TEST_CASE("single candidate still passes through the gate") {
  const Gateway g = scripted([](const ReasoningState&, const SampleRequest& r) { return numbered(r.index); },
                             [](const ReasoningState&, const ReasoningStep& step) {
                               return step.sub_query == "fixed" ? 0.7 : 0.45;
                             });
  const auto [step, d] = ReasoningEngine(g, plain_options(1)).select_step({"Q", {}});
  CHECK(d.candidates.size() == 1);
  CHECK(d.refined);
  CHECK(step.sub_query == "fixed");
}

TEST_CASE("refinement that stays low is accepted after the retries") {
  const Gateway g = scripted([](const ReasoningState&, const SampleRequest& r) { return numbered(r.index); },
                             [](const ReasoningState&, const ReasoningStep& step) {
                               return step.sub_query == "fixed" ? 0.2 : 0.3;
                             });
  SearchOptions o = plain_options();
  o.refine_retries = 2;
  const auto [step, d] = ReasoningEngine(g, o).select_step({"Q", {}});
  CHECK(d.refined);
  CHECK(d.post_refine_score == doctest::Approx(0.2));
  CHECK(step.sub_query == "fixed");
  CHECK(g.log().count(Role::kPem) == 2);
}

TEST_CASE("TD update with one lookahead step") {
  const Gateway g = chain_scored({0.4, 0.8});
  const ReasoningEngine engine(g, plain_options());
  const ReasoningStep first = parse_step_output(numbered(1));
  const auto r = engine.td_lookahead_adjust({"Q", {}}, first, {0.4, false}, {0.5, 0.05, 1, 5});
  CHECK(r.score.value == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(r.score.adjusted);
  CHECK(r.depth == 1);
}

TEST_CASE("lookahead stops once the change is below beta") {
  const Gateway g = chain_scored({0.4, 0.44, 0.9, 0.9});
  const ReasoningEngine engine(g, plain_options());
  const auto r = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.4, false},
                                            {0.5, 0.05, 3, 5});
  CHECK(r.depth == 1);
  CHECK(r.score.value == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("constant scores are a fixed point") {
  const Gateway g = chain_scored({0.37});
  const ReasoningEngine engine(g, plain_options());
  const auto r = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.37, false},
                                            {0.5, 0.0, 3, 5});
  CHECK(r.depth == 3);
  CHECK(r.score.value == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("TD estimate stays within the observed scores") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> by_depth(6);
    for (auto& v : by_depth) v = u(rng);
    const double alpha = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    const Gateway g = chain_scored(by_depth);
    const ReasoningEngine engine(g, plain_options());
    const auto r = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {by_depth[0], false},
                                              {alpha, 0.0, 4, 6});
    REQUIRE(r.depth == 4);
    const auto [lo, hi] = std::minmax_element(by_depth.begin(), by_depth.begin() + 5);
    CHECK(r.score.value >= *lo - 1e-12);
    CHECK(r.score.value <= *hi + 1e-12);
  }
}

TEST_CASE("large beta means one step, tiny alpha keeps the raw score") {
  const Gateway g = chain_scored({0.2, 0.9, 0.1, 0.7});
  const ReasoningEngine engine(g, plain_options());
  const auto one = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.2, false},
                                              {0.5, 1.0, 3, 5});
  CHECK(one.depth == 1);
  const auto tiny = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.2, false},
                                               {1e-9, 0.0, 3, 5});
  CHECK(tiny.score.value == doctest::Approx(0.2).epsilon(1e-8));
}

TEST_CASE("lookahead edge cases") {
  const Gateway g = chain_scored({0.4, 0.8}, true);
  const ReasoningEngine engine(g, plain_options());

  const auto terminal = engine.td_lookahead_adjust({"Q", {}}, ReasoningStep::terminal("x"), {0.4, false});
  CHECK(terminal.score.value == 0.4);
  CHECK_FALSE(terminal.score.adjusted);
  CHECK(terminal.depth == 0);

  // Continuation reaches a final answer after step 3.
  const auto ends = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.4, false},
                                               {0.5, 0.0, 5, 5});
  CHECK(ends.depth == 2);

  // Rollout never exceeds T steps.
  const auto capped = engine.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.4, false},
                                                 {0.5, 0.0, 5, 2});
  CHECK(capped.depth == 1);

  // A failing PRM falls back to the raw score.
  const auto world = sim::World::generate(sim::WorldSpec{});
  Backends b = g.backends();
  b.prm = std::make_shared<FailingPrm>();
  const ReasoningEngine broken(Gateway(b, 1), plain_options());
  const auto fallback = broken.td_lookahead_adjust({"Q", {}}, parse_step_output(numbered(1)), {0.4, false});
  CHECK(fallback.score.value == 0.4);
  CHECK_FALSE(fallback.score.adjusted);
  CHECK(fallback.warning.has_value());
}

TEST_CASE("lookahead applies only to shallow steps") {
  const Gateway g = chain_scored({0.6, 0.6, 0.6, 0.9, 0.9, 0.9});
  SearchOptions o;
  o.M = 1;
  o.shallow_cutoff = 3;
  const ReasoningEngine engine(g, o);
  ReasoningState s{"Q", {}};
  for (int i = 1; i <= 3; ++i) s.steps.push_back(parse_step_output(numbered(i)));
  const ScoredCandidate deep = engine.score_candidate(s, parse_step_output(numbered(4)));
  CHECK_FALSE(deep.score.adjusted);
  CHECK(deep.lookahead_depth == 0);
  s.steps.pop_back();
  const ScoredCandidate shallow = engine.score_candidate(s, parse_step_output(numbered(3)));
  CHECK(shallow.score.adjusted);
  CHECK(shallow.lookahead_depth >= 1);
  CHECK(shallow.raw_score == 0.6);
}

TEST_CASE("parse failures are tolerated until every candidate fails") {
  const Gateway some = scripted(
      [](const ReasoningState&, const SampleRequest& r) {
        return r.index == 1 ? numbered(1) : std::string("rambling prose");
      },
      [](const ReasoningState&, const ReasoningStep&) { return 0.9; });
  const auto [step, d] = ReasoningEngine(some, plain_options()).select_step({"Q", {}});
  CHECK(d.parse_failures == 2);
  CHECK(d.candidates.size() == 1);
  CHECK(step.sub_query == "q1");

  const Gateway none = scripted([](const ReasoningState&, const SampleRequest&) { return std::string("??"); },
                                [](const ReasoningState&, const ReasoningStep&) { return 0.9; });
  try {
    ReasoningEngine(none, plain_options()).select_step({"Q", {}});
    FAIL("expected NoCandidates");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNoCandidates);
  }
  try {
    ReasoningEngine(none, plain_options()).run_chain("Q");
    FAIL("expected ChainAborted");
  } catch (const ChainAborted& e) {
    CHECK(e.cause() == ErrorKind::kNoCandidates);
    CHECK(e.partial().question == "Q");
    CHECK(e.partial().steps.empty());
  }
}

TEST_CASE("helpful feedback always lifts the refined score") {
  sim::WorldSpec spec;
  spec.correctness = {0.3};
  spec.pem_mode = sim::PemMode::kHelpful;
  const auto world = sim::World::generate(spec);
  const ReasoningEngine engine(Gateway(sim::make_backends(world, 8), 1), SearchOptions{});
  std::size_t refined = 0;
  for (const auto& q : world->questions()) {
    for (const auto& d : engine.run_chain(q.text).decisions) {
      const bool all_low = std::all_of(d.candidates.begin(), d.candidates.end(),
                                       [](const ScoredCandidate& c) { return c.score.value <= 0.5; });
      CHECK(d.refined == all_low);
      if (!d.refined) continue;
      ++refined;
      REQUIRE(d.pre_refine_score);
      REQUIRE(d.post_refine_score);
      CHECK(*d.post_refine_score > *d.pre_refine_score);
    }
  }
  CHECK(refined > 20);
}

TEST_CASE("two-hop question is answered in three steps") {
  sim::WorldSpec spec;
  spec.hop_weights = {0.0, 1.0};
  spec.correctness = {1.0};
  const auto world = sim::World::generate(spec);
  const ReasoningEngine engine(Gateway(sim::make_backends(world, 1), 1), SearchOptions{});
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& q = world->questions()[i];
    const ChainResult r = engine.run_chain(q.text);
    CHECK(r.record.steps.size() == 3);
    CHECK(r.record.steps.back().is_terminal);
    CHECK(r.record.answer == q.gold);
    CHECK_FALSE(r.forced_finalization);
  }
}

TEST_CASE("step cap forces finalization") {
  sim::WorldSpec spec;
  spec.hop_weights = {1.0};
  spec.correctness = {1.0};
  spec.never_terminate = true;
  const auto world = sim::World::generate(spec);
  const ReasoningEngine engine(Gateway(sim::make_backends(world, 1), 1), SearchOptions{});
  const auto& q = world->questions()[0];
  const ChainResult r = engine.run_chain(q.text);
  CHECK(r.record.steps.size() == 5);
  CHECK(r.decisions.size() == 5);
  CHECK(r.forced_finalization);
  CHECK(r.record.answer == q.gold);
  for (const auto& s : r.record.steps) CHECK_FALSE(s.is_terminal);
}

TEST_CASE("parametric questions need no retrieval") {
  sim::WorldSpec spec;
  spec.parametric_fraction = 1.0;
  const auto world = sim::World::generate(spec);
  const Gateway g(sim::make_backends(world, 1), 1);
  const ReasoningEngine engine(g, SearchOptions{});
  for (std::size_t i = 0; i < 10; ++i) {
    const ChainResult r = engine.run_chain(world->questions()[i].text);
    for (const auto& s : r.record.steps) {
      CHECK_FALSE(s.retrieve);
      CHECK_FALSE(s.document);
    }
    CHECK(r.record.answer == world->questions()[i].gold);
  }
  CHECK(g.log().count(Role::kRetriever) == 0);
}

TEST_CASE("engine rejects bad input") {
  const Gateway g = chain_scored({0.5});
  CHECK_THROWS_AS(ReasoningEngine(g, plain_options(0)), Error);
  const ReasoningEngine engine(g, plain_options());
  CHECK_THROWS_AS(engine.run_chain(""), Error);
  CHECK_THROWS_AS(engine.select_step({"Q", {ReasoningStep::terminal("x")}}), Error);
}

TEST_CASE("decision trace is one JSON object per line") {
  const Gateway g = chain_scored({0.7}, true);
  const ReasoningEngine engine(g, plain_options());
  const ChainResult r = engine.run_chain("Q");
  testing::TempDir dir("trace");
  write_decision_trace(dir.path / "trace.jsonl", r.decisions);
  std::ifstream in(dir.path / "trace.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("candidates"));
    CHECK(j["step_index"] == n + 1);
    ++n;
  }
  CHECK(n == r.decisions.size());
}
