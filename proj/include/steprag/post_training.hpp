#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/engine.hpp"
#include "steprag/eval.hpp"
#include "steprag/supervision.hpp"
#include "steprag/types.hpp"

namespace steprag {

/// Text the warm-up loss is computed over; masked_spans index into it.
std::string training_text(const WarmupExample& example);

struct WarmupReport {
  std::size_t questions = 0;
  std::size_t kept = 0;
  std::size_t excluded_incorrect = 0;
  std::size_t failed = 0;
  std::vector<std::string> failures;
};

void to_json(nlohmann::json& j, const WarmupReport& report);

struct WarmupCollection {
  std::vector<WarmupExample> examples;
  WarmupReport report;
};

/// Runs the full engine (wired to the strong policy) on every question and
/// keeps the chains whose answer passes ACC_R.
WarmupCollection build_warmup_dataset(const std::vector<BenchmarkItem>& questions,
                                      const ReasoningEngine& strong_engine,
                                      int max_concurrency = 1);

using CharRange = std::pair<std::size_t, std::size_t>;  // [begin, end)

/// Splits into whitespace runs and non-whitespace runs, also cutting at
/// every span boundary. The ranges tile the text.
std::vector<CharRange> tokenize(std::string_view text, const std::vector<MaskedSpan>& spans);

struct TokenMaskView {
  std::vector<std::string> tokens;
  std::vector<bool> mask;  // true = excluded from the loss
  std::vector<CharRange> ranges;

  std::size_t size() const noexcept { return tokens.size(); }
  std::size_t masked_count() const;
  /// Concatenation of the masked tokens.
  std::string masked_text() const;
};

/// Masks every token whose range intersects a span. Throws AlignmentError
/// unless the ranges tile training_text(example).
TokenMaskView build_token_mask(const WarmupExample& example, const std::vector<CharRange>& ranges);
TokenMaskView build_token_mask(const WarmupExample& example);

/// Mean of -logprob over unmasked tokens; 0 when every token is masked.
/// Throws LengthMismatch.
double warmup_masked_loss(std::span<const double> token_logprobs, const TokenMaskView& mask);
std::vector<double> warmup_masked_loss_gradient(std::span<const double> token_logprobs,
                                                const TokenMaskView& mask);

struct StepPreferenceOptions {
  int N = 5;
  int example_cap = 32;
  int max_concurrency = 1;
};

struct StepPreferenceReport {
  std::size_t questions = 0;
  std::size_t skipped_extreme_mc = 0;  // question-level MC of 0 or 1
  std::size_t failed = 0;
  std::size_t examples = 0;
  std::size_t desirable = 0;
  std::size_t refinements_applied = 0;
  std::vector<std::string> failures;

  double desirable_ratio() const {
    return examples == 0 ? 0.0 : static_cast<double>(desirable) / static_cast<double>(examples);
  }
};

struct StepPreferenceCollection {
  std::vector<StepPreferenceExample> examples;
  StepPreferenceReport report;
};

/// Annotated rollout trees of `policy` (pass a RefiningPolicy to refine
/// low-scoring steps during rollouts); desirable = MC > 0.5.
StepPreferenceCollection collect_step_preferences(const RolloutPolicy& policy,
                                                  const std::vector<BenchmarkItem>& questions,
                                                  const StepPreferenceOptions& options);

struct TrainerRequest {
  std::filesystem::path dataset;
  std::string base_tag;
  std::string out_tag;
};

/// Weight updates happen outside the pipeline: either an external command
/// (`cmd --dataset P --base-tag A --out-tag B`) or an in-process callback.
class TrainerHook {
 public:
  using Callback = std::function<void(const TrainerRequest&)>;

  static TrainerHook command(std::string command);
  static TrainerHook callback(Callback fn);
  /// Does nothing; the checkpoint tag still advances.
  static TrainerHook noop();

  /// Throws TrainerFailed.
  void invoke(const TrainerRequest& request) const;

 private:
  Callback fn_;
};

struct IterationReport {
  int iteration = 0;
  std::size_t examples = 0;
  double desirable_ratio = 0.0;
  std::size_t refinements_applied = 0;
  std::string base_tag;
  std::string trainer_tag;
  std::string dataset;

  bool operator==(const IterationReport&) const = default;
};

void to_json(nlohmann::json& j, const IterationReport& report);
void from_json(const nlohmann::json& j, IterationReport& report);

struct IterationContext {
  std::vector<BenchmarkItem> questions;
  int questions_per_iteration = 0;  // 0 = all
  /// Rollout policy (normally a RefiningPolicy) behind a checkpoint tag.
  std::function<std::shared_ptr<RefiningPolicy>(const std::string& tag)> policy_for_tag;
  TrainerHook trainer = TrainerHook::noop();
  std::filesystem::path out_dir;
  std::string warmup_tag = "warmup";
  int I = 3;
  StepPreferenceOptions collection;
};

std::string base_tag_for(int iteration, const std::string& warmup_tag);
std::string out_tag_for(int iteration);

/// Collects steppref-{i}.jsonl, calls the trainer and writes
/// iteration-report-{i}.json. A finished iteration (report present) is
/// returned from disk without calling the trainer again.
IterationReport run_iteration(int i, const IterationContext& context);
std::vector<IterationReport> run_iterations(const IterationContext& context);

}  // namespace steprag
