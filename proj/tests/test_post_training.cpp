#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "steprag/post_training.hpp"
#include "steprag/serialization.hpp"
#include "steprag/sim_world.hpp"
#include "support.hpp"

using namespace steprag;

namespace {

std::vector<BenchmarkItem> items_of(const sim::World& world, std::size_t limit = 1000) {
  std::vector<BenchmarkItem> items;
  for (const auto& q : world.questions()) {
    if (items.size() == limit) break;
    items.push_back({q.id, q.text, {q.gold}});
  }
  return items;
}

ReasoningEngine strong_engine(std::shared_ptr<const sim::World> world) {
  return ReasoningEngine(Gateway(sim::make_backends(world, 4, Strength::kStrong), 1), SearchOptions{});
}

WarmupExample random_example(std::mt19937_64& rng) {
  ReasoningState s = testing::random_state(rng, 6);
  if (s.is_terminal()) s.steps.pop_back();
  s.steps.push_back(ReasoningStep::terminal(testing::random_text(rng)));
  return {s.question, s.steps, s.steps.back().thought, document_spans(s.question, s.steps)};
}

// Random tiling of [0, n) into ranges of length 1..7.
std::vector<CharRange> random_ranges(std::mt19937_64& rng, std::size_t n) {
  std::vector<CharRange> out;
  for (std::size_t b = 0; b < n;) {
    const std::size_t e = std::min(n, b + 1 + rng() % 7);
    out.emplace_back(b, e);
    b = e;
  }
  return out;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class DownPrm : public RewardModel {
 public:
  double score(const ReasoningState&, const ReasoningStep&, CallInfo&) override {
    throw Error(ErrorKind::kBackendUnavailable, "prm down");
  }
};

std::shared_ptr<const sim::World> mixed_world() {
  sim::WorldSpec spec;
  spec.correctness = {0.7};
  spec.pem_mode = sim::PemMode::kNeutral;
  return sim::World::generate(spec);
}

}  // namespace

TEST_CASE("warm-up keeps every correct strong chain") {
  sim::WorldSpec spec;
  spec.strong_correctness = {1.0};
  const auto world = sim::World::generate(spec);
  const auto items = items_of(*world, 10);
  const WarmupCollection c = build_warmup_dataset(items, strong_engine(world), 3);
  CHECK(c.report.questions == 10);
  CHECK(c.report.kept == 10);
  CHECK(c.report.failed == 0);
  REQUIRE(c.examples.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& ex = c.examples[i];
    CHECK(ex.question == items[i].question);
    CHECK(acc_r(items[i].golden_answers, ex.answer));
    CHECK(ex.masked_spans == document_spans(ex.question, ex.steps));
    CHECK_FALSE(ex.masked_spans.empty());
    CHECK_NOTHROW(validate(ex));
  }
  CHECK(build_warmup_dataset(items, strong_engine(world), 1).examples == c.examples);
}

TEST_CASE("warm-up chains without retrieval have nothing to mask") {
  sim::WorldSpec spec;
  spec.strong_correctness = {1.0};
  spec.parametric_fraction = 1.0;
  const auto world = sim::World::generate(spec);
  const WarmupCollection c = build_warmup_dataset(items_of(*world, 10), strong_engine(world));
  REQUIRE(c.examples.size() == 10);
  for (const auto& ex : c.examples) {
    CHECK(ex.masked_spans.empty());
    const TokenMaskView mask = build_token_mask(ex);
    CHECK(mask.masked_count() == 0);
  }
}

TEST_CASE("warm-up excludes wrong answers and stops on outages") {
  sim::WorldSpec spec;
  spec.strong_correctness = {1.0};
  const auto world = sim::World::generate(spec);
  auto items = items_of(*world, 4);
  items[1].golden_answers = {"Nobody"};
  const WarmupCollection c = build_warmup_dataset(items, strong_engine(world));
  CHECK(c.report.kept == 3);
  CHECK(c.report.excluded_incorrect == 1);
  for (const auto& ex : c.examples) CHECK(ex.question != items[1].question);

  Backends down = sim::make_backends(world, 4, Strength::kStrong);
  down.prm = std::make_shared<DownPrm>();
  CHECK_THROWS_AS(build_warmup_dataset(items, ReasoningEngine(Gateway(down, 1), SearchOptions{})), Error);
}

TEST_CASE("masked tokens are exactly the retrieved documents") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    const WarmupExample ex = random_example(rng);
    const TokenMaskView view = build_token_mask(ex);
    std::string docs;
    for (const auto& s : ex.steps) {
      if (s.document) docs += *s.document;
    }
    CHECK(view.masked_text() == docs);
    std::string joined;
    for (const auto& t : view.tokens) joined += t;
    CHECK(joined == training_text(ex));
  }
}

TEST_CASE("tokens straddling a document boundary are masked") {
  ReasoningStep s;
  s.sub_query = "colour of Bavo";
  s.retrieve = true;
  s.document = "The colour of Bavo is Kemu.";
  s.thought = "Kemu.";
  const std::vector<ReasoningStep> steps{s, ReasoningStep::terminal("Kemu")};
  const WarmupExample ex{"Q", steps, "Kemu", document_spans("Q", steps)};
  const std::string text = training_text(ex);
  const MaskedSpan span = ex.masked_spans.at(0);

  const std::vector<CharRange> ranges{{0, span.begin - 2},
                                      {span.begin - 2, span.begin + 3},
                                      {span.begin + 3, span.end - 1},
                                      {span.end - 1, span.end + 4},
                                      {span.end + 4, text.size()}};
  const TokenMaskView view = build_token_mask(ex, ranges);
  CHECK(view.mask == std::vector<bool>{false, true, true, true, false});

  const std::vector<CharRange> touching{{0, span.begin}, {span.begin, span.end}, {span.end, text.size()}};
  CHECK(build_token_mask(ex, touching).mask == std::vector<bool>{false, true, false});
}

TEST_CASE("masked count matches a character-level brute force") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 300; ++trial) {
    const WarmupExample ex = random_example(rng);
    const std::string text = training_text(ex);
    const auto ranges = random_ranges(rng, text.size());
    std::vector<bool> inside(text.size(), false);
    for (const auto& span : ex.masked_spans) {
      for (std::size_t c = span.begin; c < span.end; ++c) inside[c] = true;
    }
    std::size_t expected = 0;
    for (const auto& [b, e] : ranges) {
      bool any = false;
      for (std::size_t c = b; c < e; ++c) any = any || inside[c];
      expected += any ? 1 : 0;
    }
    CHECK(build_token_mask(ex, ranges).masked_count() == expected);
  }
}

TEST_CASE("token ranges must tile the text") {
  std::mt19937_64 rng(2);
  const WarmupExample ex = random_example(rng);
  const std::size_t n = training_text(ex).size();
  auto kind_of = [&](const std::vector<CharRange>& ranges) -> std::optional<ErrorKind> {
    try {
      build_token_mask(ex, ranges);
    } catch (const Error& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  CHECK(kind_of({{0, 3}, {4, n}}) == ErrorKind::kAlignmentError);
  CHECK(kind_of({{0, 5}, {3, n}}) == ErrorKind::kAlignmentError);
  CHECK(kind_of({{0, n - 1}}) == ErrorKind::kAlignmentError);
  CHECK(kind_of({{0, n + 1}}) == ErrorKind::kAlignmentError);
  CHECK(kind_of({{0, 0}, {0, n}}) == ErrorKind::kAlignmentError);
}

TEST_CASE("masked loss") {
  TokenMaskView view;
  view.tokens = {"a", "b", "c"};
  view.mask = {false, true, false};
  view.ranges = {{0, 1}, {1, 2}, {2, 3}};
  CHECK(warmup_masked_loss(std::vector<double>{-1.0, -50.0, -3.0}, view) == 2.0);
  CHECK(warmup_masked_loss(std::vector<double>{-1.0, -0.01, -3.0}, view) == 2.0);
  CHECK(warmup_masked_loss_gradient(std::vector<double>{-1.0, -50.0, -3.0}, view) ==
        std::vector<double>{-0.5, 0.0, -0.5});

  TokenMaskView all = view;
  all.mask = {true, true, true};
  CHECK(warmup_masked_loss(std::vector<double>{-1.0, -2.0, -3.0}, all) == 0.0);
  CHECK(warmup_masked_loss_gradient(std::vector<double>{-1.0, -2.0, -3.0}, all) ==
        std::vector<double>{0.0, 0.0, 0.0});

  try {
    warmup_masked_loss(std::vector<double>{-1.0}, view);
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kLengthMismatch);
  }
}

TEST_CASE("masked loss ignores masked tokens and has the right gradient") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> lp(-12.0, -0.01);
  for (int trial = 0; trial < 100; ++trial) {
    const WarmupExample ex = random_example(rng);
    const TokenMaskView view = build_token_mask(ex);
    std::vector<double> x(view.size());
    for (auto& v : x) v = lp(rng);
    const double base = warmup_masked_loss(x, view);
    auto perturbed = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (view.mask[i]) perturbed[i] = lp(rng);
    }
    CHECK(warmup_masked_loss(perturbed, view) == base);

    const auto grad = warmup_masked_loss_gradient(x, view);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double fd = testing::central_difference(
          [&](const std::vector<double>& y) { return warmup_masked_loss(y, view); }, x, i, 1e-5);
      CHECK(std::abs(grad[i] - fd) <= 1e-6 * std::max(1.0, std::abs(grad[i])) + 1e-10);
    }
  }
}

TEST_CASE("step preferences cover both classes") {
  const auto world = mixed_world();
  const PlainPolicy policy(Gateway(sim::make_backends(world, 6), 1), 5);
  const auto items = items_of(*world);
  const StepPreferenceCollection c = collect_step_preferences(policy, items, {5, 32, 4});
  CHECK(c.report.questions == 100);
  CHECK(c.report.failed == 0);
  CHECK(c.report.examples == c.examples.size());
  CHECK(c.report.desirable > 0);
  CHECK(c.report.desirable < c.report.examples);
  CHECK(c.report.skipped_extreme_mc < 100);
  std::size_t desirable = 0;
  for (const auto& ex : c.examples) {
    CHECK(ex.desirable == (ex.mc > 0.5));
    desirable += ex.desirable ? 1 : 0;
    auto steps = ex.state.steps;
    steps.push_back(ex.step);
    CHECK(ex.masked_spans == document_spans(ex.state.question, steps));
    CHECK_NOTHROW(validate(ex));
  }
  CHECK(desirable == c.report.desirable);
  CHECK(collect_step_preferences(policy, items, {5, 32, 1}).examples == c.examples);
}

TEST_CASE("refinement during rollouts raises the mean MC") {
  sim::WorldSpec spec;
  spec.correctness = {0.7};
  const auto world = sim::World::generate(spec);
  const Gateway g(sim::make_backends(world, 6), 1);
  const PlainPolicy plain(g, 5);
  const RefiningPolicy refining(g, 5, 0.5);
  RolloutCache cache;
  double plain_sum = 0.0, refined_sum = 0.0;
  for (const auto& q : world->questions()) {
    McEstimator a(plain, cache, {q.gold}, 2);
    McEstimator b(refining, cache, {q.gold}, 2);
    plain_sum += a.mc_score({q.text, {}}, 5);
    refined_sum += b.mc_score({q.text, {}}, 5);
  }
  CHECK(refining.refinements() > 0);
  CHECK(refined_sum > plain_sum + 10.0);
}

TEST_CASE("iterations call the trainer once each and resume") {
  const auto world = mixed_world();
  const Gateway g(sim::make_backends(world, 8), 1);
  std::map<std::string, std::shared_ptr<RefiningPolicy>> policies;
  std::vector<TrainerRequest> calls;
  testing::TempDir dir("iterations");

  IterationContext ctx;
  ctx.questions = items_of(*world);
  ctx.questions_per_iteration = 20;
  ctx.policy_for_tag = [&](const std::string& tag) {
    auto& p = policies[tag];
    if (!p) p = std::make_shared<RefiningPolicy>(g, 5, 0.5, tag);
    return p;
  };
  ctx.trainer = TrainerHook::callback([&](const TrainerRequest& r) { calls.push_back(r); });
  ctx.out_dir = dir.path;

  const auto reports = run_iterations(ctx);
  REQUIRE(reports.size() == 3);
  REQUIRE(calls.size() == 3);
  const std::vector<std::pair<std::string, std::string>> tags{
      {"warmup", "iter-1"}, {"iter-1", "iter-2"}, {"iter-2", "iter-3"}};
  for (int i = 0; i < 3; ++i) {
    const auto dataset = dir.path / ("steppref-" + std::to_string(i) + ".jsonl");
    CHECK(std::filesystem::exists(dataset));
    CHECK(std::filesystem::exists(dir.path / ("iteration-report-" + std::to_string(i) + ".json")));
    CHECK(calls[i].dataset == dataset);
    CHECK(calls[i].base_tag == tags[i].first);
    CHECK(calls[i].out_tag == tags[i].second);
    CHECK(reports[i].base_tag == tags[i].first);
    CHECK(reports[i].trainer_tag == tags[i].second);
    CHECK(read_jsonl_file<StepPreferenceExample>(dataset).size() == reports[i].examples);
  }
  CHECK(reports[0].examples > 0);

  const auto first = read_all(dir.path / "steppref-1.jsonl");
  CHECK(run_iterations(ctx) == reports);
  CHECK(calls.size() == 3);
  CHECK(read_all(dir.path / "steppref-1.jsonl") == first);

  testing::TempDir other("iterations-again");
  ctx.out_dir = other.path;
  policies.clear();
  run_iterations(ctx);
  for (int i = 0; i < 3; ++i) {
    const std::string name = "steppref-" + std::to_string(i) + ".jsonl";
    CHECK(read_all(other.path / name) == read_all(dir.path / name));
  }
  CHECK_THROWS_AS(run_iteration(3, ctx), Error);
}

TEST_CASE("external trainer commands") {
  testing::TempDir dir("trainer");
  const auto log = dir.path / "args.txt";
  const TrainerHook hook = TrainerHook::command("printf '%s\\n' >" + log.string());
  hook.invoke({dir.path / "it's.jsonl", "warmup", "iter-1"});
  std::stringstream expected;
  expected << "--dataset\n" << (dir.path / "it's.jsonl").string() << "\n--base-tag\nwarmup\n--out-tag\niter-1\n";
  CHECK(read_all(log) == expected.str());

  try {
    TrainerHook::command("false").invoke({"x", "a", "b"});
    FAIL("expected TrainerFailed");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTrainerFailed);
  }
  try {
    TrainerHook::callback([](const TrainerRequest&) { throw std::runtime_error("boom"); }).invoke({"x", "a", "b"});
    FAIL("expected TrainerFailed");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTrainerFailed);
  }
}
