#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace steprag {

/// One chain-of-thought step: sub-query, retrieval indicator, retrieved
/// document (present iff retrieve) and the generator's thought. A terminal
/// step carries the final answer in `thought` and leaves the rest empty.
struct ReasoningStep {
  std::string sub_query;
  bool retrieve = false;
  std::optional<std::string> document;
  std::string thought;
  bool is_terminal = false;

  static ReasoningStep terminal(std::string answer);

  bool operator==(const ReasoningStep&) const = default;
};

/// The question plus the accepted step prefix. Every model call is
/// conditioned on one of these.
struct ReasoningState {
  std::string question;
  std::vector<ReasoningStep> steps;

  std::size_t step_count() const noexcept { return steps.size(); }
  bool is_terminal() const noexcept { return !steps.empty() && steps.back().is_terminal; }

  bool operator==(const ReasoningState&) const = default;
};

struct ChainRecord {
  std::string question;
  std::vector<ReasoningStep> steps;
  std::string answer;
  std::optional<bool> correct;

  bool operator==(const ChainRecord&) const = default;
};

struct ProcessScore {
  double value = 0.5;
  bool adjusted = false;

  bool operator==(const ProcessScore&) const = default;
};

struct PrmExample {
  std::string question_id;
  ReasoningState state;
  ReasoningStep step;
  double mc = 0.0;
  int label = 0;

  bool operator==(const PrmExample&) const = default;
};

struct PemPreferenceExample {
  ReasoningState state;
  ReasoningStep step;
  std::string explanation;
  double r1 = 0.0;
  double r2 = 0.0;
  int preference = 0;

  bool operator==(const PemPreferenceExample&) const = default;
};

/// Half-open character range [begin, end) of one retrieved document inside
/// the rendered training text.
struct MaskedSpan {
  std::size_t step_index = 0;
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const MaskedSpan&) const = default;
};

struct WarmupExample {
  std::string question;
  std::vector<ReasoningStep> steps;
  std::string answer;
  std::vector<MaskedSpan> masked_spans;

  bool operator==(const WarmupExample&) const = default;
};

struct StepPreferenceExample {
  ReasoningState state;
  ReasoningStep step;
  double mc = 0.0;
  bool desirable = false;
  std::vector<MaskedSpan> masked_spans;

  bool operator==(const StepPreferenceExample&) const = default;
};

// Invariant checks; each throws Error(kInvariantViolation).
void validate(const ReasoningStep& step);
void validate(const ReasoningState& state);
void validate(const ChainRecord& chain);
void validate(const PrmExample& example);
void validate(const PemPreferenceExample& example);
void validate(const WarmupExample& example);
void validate(const StepPreferenceExample& example);

/// Value-semantics append. Throws AppendAfterTerminal or StepLimitExceeded.
ReasoningState append_step(const ReasoningState& state, ReasoningStep step,
                           std::size_t max_steps);

std::string render_step(const ReasoningStep& step);
std::string render_transcript(const ReasoningState& state);

/// Spans of every retrieved document inside render_transcript({question, steps}).
std::vector<MaskedSpan> document_spans(const std::string& question,
                                       const std::vector<ReasoningStep>& steps);

int binary_label(double mc);

}  // namespace steprag
