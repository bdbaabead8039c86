#include "steprag/types.hpp"

#include <string_view>
#include <utility>

#include "steprag/error.hpp"

namespace steprag {

namespace {

void require(bool condition, const char* what) {
  if (!condition) throw Error(ErrorKind::kInvariantViolation, what);
}

// Renders the step body and, when `spans` is given, records where the
// document text landed relative to `out`.
void render_step_into(std::string& out, const ReasoningStep& step, std::size_t step_index,
                      std::vector<MaskedSpan>* spans) {
  if (step.is_terminal) {
    out += "Final Answer: ";
    out += step.thought;
    out += '\n';
    return;
  }
  out += "Sub-Query: ";
  out += step.sub_query;
  out += '\n';
  out += step.retrieve ? "Retrieve: Yes\n" : "Retrieve: No\n";
  if (step.document) {
    out += "Document: ";
    const std::size_t begin = out.size();
    out += *step.document;
    if (spans) spans->push_back({step_index, begin, out.size()});
    out += '\n';
  }
  out += "Thought: ";
  out += step.thought;
  out += '\n';
}

std::string render_all(const std::string& question, const std::vector<ReasoningStep>& steps,
                       std::vector<MaskedSpan>* spans) {
  std::string out = "Question: " + question + "\n";
  for (std::size_t i = 0; i < steps.size(); ++i) {
    out += "Step " + std::to_string(i + 1) + ":\n";
    render_step_into(out, steps[i], i, spans);
  }
  return out;
}

}  // namespace

ReasoningStep ReasoningStep::terminal(std::string answer) {
  ReasoningStep step;
  step.thought = std::move(answer);
  step.is_terminal = true;
  return step;
}

void validate(const ReasoningStep& step) {
  require(step.document.has_value() == step.retrieve,
          "document must be present iff retrieve is true");
  if (step.is_terminal) {
    require(!step.retrieve, "terminal step cannot retrieve");
    require(!step.thought.empty(), "terminal step needs an answer");
  } else {
    require(!step.sub_query.empty(), "non-terminal step needs a sub-query");
    require(!step.thought.empty(), "non-terminal step needs a thought");
  }
}

void validate(const ReasoningState& state) {
  for (std::size_t i = 0; i < state.steps.size(); ++i) {
    validate(state.steps[i]);
    require(!state.steps[i].is_terminal || i + 1 == state.steps.size(),
            "terminal step must be last");
  }
}

void validate(const ChainRecord& chain) { validate(ReasoningState{chain.question, chain.steps}); }

void validate(const PrmExample& example) {
  validate(example.state);
  validate(example.step);
  require(example.mc >= 0.0 && example.mc <= 1.0, "mc must lie in [0,1]");
  require(example.label == binary_label(example.mc), "label must equal 1[mc > 0.5]");
}

void validate(const PemPreferenceExample& example) {
  validate(example.state);
  validate(example.step);
  require(example.r1 != example.r2, "tied scores never form a preference record");
  require(example.preference == (example.r2 > example.r1 ? 1 : -1),
          "preference must be +1 iff r2 > r1");
}

void validate(const WarmupExample& example) {
  for (const auto& step : example.steps) validate(step);
  require(example.masked_spans == document_spans(example.question, example.steps),
          "masked spans must cover exactly the retrieved documents");
}

void validate(const StepPreferenceExample& example) {
  validate(example.state);
  validate(example.step);
  require(example.desirable == (example.mc > 0.5), "desirable must equal mc > 0.5");
  auto steps = example.state.steps;
  steps.push_back(example.step);
  require(example.masked_spans == document_spans(example.state.question, steps),
          "masked spans must cover exactly the retrieved documents");
}

ReasoningState append_step(const ReasoningState& state, ReasoningStep step,
                           std::size_t max_steps) {
  if (state.is_terminal()) {
    throw Error(ErrorKind::kAppendAfterTerminal, "state already holds a final answer");
  }
  if (state.step_count() >= max_steps) {
    throw Error(ErrorKind::kStepLimitExceeded,
                "state already has " + std::to_string(state.step_count()) + " steps");
  }
  ReasoningState next = state;
  next.steps.push_back(std::move(step));
  return next;
}

std::string render_step(const ReasoningStep& step) {
  std::string out;
  render_step_into(out, step, 0, nullptr);
  return out;
}

std::string render_transcript(const ReasoningState& state) {
  return render_all(state.question, state.steps, nullptr);
}

std::vector<MaskedSpan> document_spans(const std::string& question,
                                       const std::vector<ReasoningStep>& steps) {
  std::vector<MaskedSpan> spans;
  render_all(question, steps, &spans);
  return spans;
}

int binary_label(double mc) { return mc > 0.5 ? 1 : 0; }

}  // namespace steprag
