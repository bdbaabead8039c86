#include "steprag/post_training.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>

#include "steprag/error.hpp"
#include "steprag/parallel.hpp"
#include "steprag/serialization.hpp"

namespace steprag {

std::string training_text(const WarmupExample& example) {
  return render_transcript({example.question, example.steps});
}

void to_json(nlohmann::json& j, const WarmupReport& r) {
  j = nlohmann::json{{"questions", r.questions},
                     {"kept", r.kept},
                     {"excluded_incorrect", r.excluded_incorrect},
                     {"failed", r.failed},
                     {"failures", r.failures}};
}

WarmupCollection build_warmup_dataset(const std::vector<BenchmarkItem>& questions,
                                      const ReasoningEngine& strong_engine,
                                      int max_concurrency) {
  struct Outcome {
    std::optional<WarmupExample> example;
    std::optional<std::string> failure;
  };
  auto outcomes = parallel_map(questions.size(), max_concurrency, [&](std::size_t i) {
    const BenchmarkItem& item = questions[i];
    Outcome out;
    try {
      ChainResult chain = strong_engine.run_chain(item.question);
      if (acc_r(item.golden_answers, chain.record.answer)) {
        WarmupExample ex;
        ex.question = item.question;
        ex.steps = std::move(chain.record.steps);
        ex.answer = chain.record.answer;
        ex.masked_spans = document_spans(ex.question, ex.steps);
        out.example = std::move(ex);
      }
    } catch (const Error& e) {
      if (is_backend_outage(e)) throw;
      out.failure = item.id + ": " + e.what();
    }
    return out;
  });

  WarmupCollection result;
  result.report.questions = questions.size();
  for (auto& o : outcomes) {
    if (o.failure) {
      ++result.report.failed;
      result.report.failures.push_back(*o.failure);
    } else if (o.example) {
      result.examples.push_back(std::move(*o.example));
    } else {
      ++result.report.excluded_incorrect;
    }
  }
  result.report.kept = result.examples.size();
  return result;
}

std::vector<CharRange> tokenize(std::string_view text, const std::vector<MaskedSpan>& spans) {
  std::vector<std::size_t> cuts;
  for (const auto& s : spans) {
    cuts.push_back(s.begin);
    cuts.push_back(s.end);
  }
  std::sort(cuts.begin(), cuts.end());
  std::vector<CharRange> ranges;
  std::size_t begin = 0;
  auto is_space = [&](std::size_t i) { return std::isspace(static_cast<unsigned char>(text[i])) != 0; };
  for (std::size_t i = 1; i <= text.size(); ++i) {
    const bool boundary = i == text.size() || is_space(i) != is_space(i - 1) ||
                          std::binary_search(cuts.begin(), cuts.end(), i);
    if (boundary) {
      ranges.emplace_back(begin, i);
      begin = i;
    }
  }
  return ranges;
}

std::size_t TokenMaskView::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

std::string TokenMaskView::masked_text() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mask[i]) out += tokens[i];
  }
  return out;
}

TokenMaskView build_token_mask(const WarmupExample& example, const std::vector<CharRange>& ranges) {
  const std::string text = training_text(example);
  std::size_t expected = 0;
  for (const auto& [b, e] : ranges) {
    if (b != expected || e <= b) {
      throw Error(ErrorKind::kAlignmentError,
                  "token ranges must tile the text; gap or overlap at offset " +
                      std::to_string(expected));
    }
    expected = e;
  }
  if (expected != text.size()) {
    throw Error(ErrorKind::kAlignmentError, "token ranges cover " + std::to_string(expected) +
                                                " of " + std::to_string(text.size()) + " chars");
  }
  TokenMaskView view;
  view.ranges = ranges;
  for (const auto& [b, e] : ranges) {
    view.tokens.push_back(text.substr(b, e - b));
    const bool masked = std::any_of(
        example.masked_spans.begin(), example.masked_spans.end(),
        [&, b = b, e = e](const MaskedSpan& s) { return s.begin < e && b < s.end; });
    view.mask.push_back(masked);
  }
  return view;
}

TokenMaskView build_token_mask(const WarmupExample& example) {
  return build_token_mask(example, tokenize(training_text(example), example.masked_spans));
}

namespace {

std::size_t unmasked_count(std::span<const double> lp, const TokenMaskView& mask) {
  if (lp.size() != mask.size()) {
    throw Error(ErrorKind::kLengthMismatch, std::to_string(lp.size()) + " logprobs vs " +
                                                std::to_string(mask.size()) + " tokens");
  }
  return mask.size() - mask.masked_count();
}

}  // namespace

double warmup_masked_loss(std::span<const double> lp, const TokenMaskView& mask) {
  const std::size_t count = unmasked_count(lp, mask);
  if (count == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (!mask.mask[i]) sum -= lp[i];
  }
  return sum / static_cast<double>(count);
}

std::vector<double> warmup_masked_loss_gradient(std::span<const double> lp,
                                                const TokenMaskView& mask) {
  const std::size_t count = unmasked_count(lp, mask);
  std::vector<double> grad(lp.size(), 0.0);
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (!mask.mask[i]) grad[i] = -1.0 / static_cast<double>(count);
  }
  return grad;
}

StepPreferenceCollection collect_step_preferences(const RolloutPolicy& policy,
                                                  const std::vector<BenchmarkItem>& questions,
                                                  const StepPreferenceOptions& options) {
  struct Outcome {
    std::vector<StepPreferenceExample> examples;
    bool extreme = false;
    std::optional<std::string> failure;
  };
  RolloutCache cache;
  auto outcomes = parallel_map(questions.size(), options.max_concurrency, [&](std::size_t qi) {
    const BenchmarkItem& item = questions[qi];
    Outcome out;
    try {
      McEstimator estimator(policy, cache, item.golden_answers);
      const ReasoningState root{item.question, {}};
      const double mc = estimator.mc_score(root, options.N);
      if (mc == 0.0 || mc == 1.0) {
        out.extreme = true;
        return out;
      }
      for (auto& a : annotate_rollout_tree(root, options.N, options.example_cap, estimator).steps) {
        StepPreferenceExample ex;
        auto steps = a.state.steps;
        steps.push_back(a.step);
        ex.masked_spans = document_spans(a.state.question, steps);
        ex.state = std::move(a.state);
        ex.step = std::move(a.step);
        ex.mc = a.mc;
        ex.desirable = a.mc > 0.5;
        out.examples.push_back(std::move(ex));
      }
    } catch (const Error& e) {
      if (is_backend_outage(e)) throw;
      out = Outcome{};
      out.failure = item.id + ": " + e.what();
    }
    return out;
  });

  StepPreferenceCollection result;
  result.report.questions = questions.size();
  for (auto& o : outcomes) {
    if (o.failure) {
      ++result.report.failed;
      result.report.failures.push_back(*o.failure);
    }
    if (o.extreme) ++result.report.skipped_extreme_mc;
    for (auto& ex : o.examples) {
      result.report.desirable += ex.desirable ? 1 : 0;
      result.examples.push_back(std::move(ex));
    }
  }
  result.report.examples = result.examples.size();
  return result;
}

namespace {

std::string shell_quote(const std::string& text) {
  std::string out = "'";
  for (char c : text) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

}  // namespace

TrainerHook TrainerHook::command(std::string command) {
  return callback([command = std::move(command)](const TrainerRequest& r) {
    const std::string line = command + " --dataset " + shell_quote(r.dataset.string()) +
                             " --base-tag " + shell_quote(r.base_tag) + " --out-tag " +
                             shell_quote(r.out_tag);
    const int status = std::system(line.c_str());
    if (status != 0) {
      throw Error(ErrorKind::kTrainerFailed,
                  "trainer command exited with status " + std::to_string(status));
    }
  });
}

TrainerHook TrainerHook::callback(Callback fn) {
  TrainerHook hook;
  hook.fn_ = std::move(fn);
  return hook;
}

TrainerHook TrainerHook::noop() {
  return callback([](const TrainerRequest&) {});
}

void TrainerHook::invoke(const TrainerRequest& request) const {
  try {
    fn_(request);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kTrainerFailed) throw;
    throw Error(ErrorKind::kTrainerFailed, e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::kTrainerFailed, e.what());
  }
}

void to_json(nlohmann::json& j, const IterationReport& r) {
  j = nlohmann::json{{"iteration", r.iteration},
                     {"examples", r.examples},
                     {"desirable_ratio", r.desirable_ratio},
                     {"refinements_applied", r.refinements_applied},
                     {"base_tag", r.base_tag},
                     {"trainer_tag", r.trainer_tag},
                     {"dataset", r.dataset}};
}

void from_json(const nlohmann::json& j, IterationReport& r) {
  j.at("iteration").get_to(r.iteration);
  j.at("examples").get_to(r.examples);
  j.at("desirable_ratio").get_to(r.desirable_ratio);
  j.at("refinements_applied").get_to(r.refinements_applied);
  j.at("base_tag").get_to(r.base_tag);
  j.at("trainer_tag").get_to(r.trainer_tag);
  j.at("dataset").get_to(r.dataset);
}

std::string base_tag_for(int iteration, const std::string& warmup_tag) {
  return iteration == 0 ? warmup_tag : "iter-" + std::to_string(iteration);
}

std::string out_tag_for(int iteration) { return "iter-" + std::to_string(iteration + 1); }

IterationReport run_iteration(int i, const IterationContext& ctx) {
  if (i < 0 || i >= ctx.I) {
    throw Error(ErrorKind::kDomainError,
                "iteration " + std::to_string(i) + " outside [0, " + std::to_string(ctx.I) + ")");
  }
  const auto report_path = ctx.out_dir / ("iteration-report-" + std::to_string(i) + ".json");
  if (std::filesystem::exists(report_path)) {
    try {
      return nlohmann::json::parse(read_file(report_path)).get<IterationReport>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kMalformedLine, report_path.string() + ": " + e.what());
    }
  }

  std::vector<BenchmarkItem> questions = ctx.questions;
  if (ctx.questions_per_iteration > 0 && !questions.empty()) {
    const auto per = static_cast<std::size_t>(ctx.questions_per_iteration);
    std::vector<BenchmarkItem> window;
    for (std::size_t k = 0; k < std::min(per, ctx.questions.size()); ++k) {
      window.push_back(ctx.questions[(static_cast<std::size_t>(i) * per + k) % ctx.questions.size()]);
    }
    questions = std::move(window);
  }

  IterationReport report;
  report.iteration = i;
  report.base_tag = base_tag_for(i, ctx.warmup_tag);
  report.trainer_tag = out_tag_for(i);
  const auto dataset = ctx.out_dir / ("steppref-" + std::to_string(i) + ".jsonl");
  report.dataset = dataset.filename().string();

  const auto policy = ctx.policy_for_tag(report.base_tag);
  const std::size_t refinements_before = policy->refinements();
  const StepPreferenceCollection collection =
      collect_step_preferences(*policy, questions, ctx.collection);
  report.refinements_applied = policy->refinements() - refinements_before;
  report.examples = collection.report.examples;
  report.desirable_ratio = collection.report.desirable_ratio();
  write_jsonl_file(dataset, collection.examples);

  ctx.trainer.invoke({dataset, report.base_tag, report.trainer_tag});
  write_file_atomic(report_path, nlohmann::json(report).dump(2) + "\n");
  return report;
}

std::vector<IterationReport> run_iterations(const IterationContext& ctx) {
  std::vector<IterationReport> reports;
  for (int i = 0; i < ctx.I; ++i) reports.push_back(run_iteration(i, ctx));
  return reports;
}

}  // namespace steprag
