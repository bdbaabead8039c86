#include "steprag/engine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "steprag/parallel.hpp"
#include "steprag/serialization.hpp"

namespace steprag {

SearchOptions SearchOptions::from_config(const EngineConfig& config) {
  SearchOptions o;
  o.M = config.M;
  o.T = config.T;
  o.tau = config.tau;
  o.refine_retries = config.refine_retries;
  o.shallow_cutoff = config.shallow_cutoff;
  o.lookahead_params = {config.alpha, config.beta, config.H, config.T};
  o.max_concurrency = config.max_concurrency;
  return o;
}

ChainAborted::ChainAborted(ReasoningState partial, ErrorKind cause, const std::string& message)
    : Error(ErrorKind::kChainAborted, message), partial_(std::move(partial)), cause_(cause) {}

ReasoningEngine::ReasoningEngine(Gateway gateway, SearchOptions options)
    : gateway_(std::move(gateway)), options_(options) {
  if (options_.M < 1) throw Error(ErrorKind::kConfigError, "M must be >= 1");
  if (options_.T < 1) throw Error(ErrorKind::kConfigError, "T must be >= 1");
}

LookaheadResult ReasoningEngine::td_lookahead_adjust(const ReasoningState& state,
                                                     const ReasoningStep& step, ProcessScore raw,
                                                     const LookaheadParams& params) const {
  LookaheadResult result{raw, 0, std::nullopt};
  if (step.is_terminal || params.H < 1) return result;
  double v = raw.value;
  ReasoningState rollout = state;
  rollout.steps.push_back(step);
  try {
    for (int k = 1; k <= params.H; ++k) {
      if (rollout.is_terminal() || rollout.step_count() >= static_cast<std::size_t>(params.T)) {
        break;
      }
      ReasoningStep next = gateway_.sample_step(rollout, {"lookahead", 0, true});
      const double r = gateway_.score_step(rollout, next).value;
      const double delta = r - v;
      v += params.alpha * delta;
      result.depth = k;
      rollout.steps.push_back(std::move(next));
      if (std::abs(delta) < params.beta || rollout.is_terminal()) break;
    }
  } catch (const Error& e) {
    return {raw, 0, std::string("lookahead fell back to raw score: ") + e.what()};
  }
  result.score = {std::clamp(v, 0.0, 1.0), true};
  return result;
}

ScoredCandidate ReasoningEngine::score_candidate(const ReasoningState& state,
                                                 ReasoningStep step) const {
  ScoredCandidate c;
  const ProcessScore raw = gateway_.score_step(state, step);
  c.raw_score = raw.value;
  c.score = raw;
  if (options_.lookahead && state.step_count() < static_cast<std::size_t>(options_.shallow_cutoff)) {
    const LookaheadResult adjusted = td_lookahead_adjust(state, step, raw);
    c.score = adjusted.score;
    c.lookahead_depth = adjusted.depth;
  }
  c.step = std::move(step);
  return c;
}

std::pair<ReasoningStep, StepDecision> ReasoningEngine::select_step(
    const ReasoningState& state) const {
  if (state.is_terminal()) throw Error(ErrorKind::kAppendAfterTerminal, "state is terminal");
  if (state.step_count() >= static_cast<std::size_t>(options_.T)) {
    throw Error(ErrorKind::kStepLimitExceeded, "state already has T steps");
  }

  StepDecision decision;
  decision.step_index = state.step_count() + 1;

  struct Slot {
    std::optional<ScoredCandidate> candidate;
    std::optional<std::string> parse_error;
    std::optional<std::string> warning;
  };
  const auto slots = parallel_map(
      static_cast<std::size_t>(options_.M), options_.max_concurrency, [&](std::size_t i) {
        Slot slot;
        ReasoningStep step;
        try {
          step = gateway_.sample_step(state, {"candidate", i, false});
        } catch (const ParseFailure& e) {
          slot.parse_error = e.what();
          return slot;
        }
        slot.candidate = score_candidate(state, std::move(step));
        return slot;
      });
  for (const auto& slot : slots) {
    if (slot.parse_error) {
      ++decision.parse_failures;
      decision.warnings.push_back(*slot.parse_error);
    }
    if (slot.candidate) decision.candidates.push_back(*slot.candidate);
  }
  if (decision.candidates.empty()) {
    throw Error(ErrorKind::kNoCandidates,
                "all " + std::to_string(options_.M) + " candidates failed to parse");
  }

  const auto best = std::max_element(
      decision.candidates.begin(), decision.candidates.end(),
      [](const auto& a, const auto& b) { return a.score.value < b.score.value; });
  decision.chosen_index = static_cast<std::size_t>(best - decision.candidates.begin());
  decision.lookahead_depth_used = best->lookahead_depth;

  ReasoningStep accepted = best->step;
  if (best->score.value <= options_.tau && options_.refinement && options_.refine_retries > 0) {
    decision.refined = true;
    decision.pre_refine_score = best->score.value;
    ReasoningStep current = best->step;
    ProcessScore current_score = best->score;
    for (int attempt = 0; attempt < options_.refine_retries; ++attempt) {
      const std::string explanation = gateway_.explain_step(state, current, current_score);
      ScoredCandidate refined =
          score_candidate(state, gateway_.refine_step(state, current, explanation, current_score));
      current = std::move(refined.step);
      current_score = refined.score;
      if (current_score.value > options_.tau) break;
    }
    decision.post_refine_score = current_score.value;
    accepted = std::move(current);
  }
  decision.accepted = accepted;
  return {std::move(accepted), std::move(decision)};
}

ChainResult ReasoningEngine::run_chain(const std::string& question) const {
  if (question.empty()) throw Error(ErrorKind::kDomainError, "question must not be empty");
  ChainResult result;
  ReasoningState state{question, {}};
  try {
    while (!state.is_terminal() && state.step_count() < static_cast<std::size_t>(options_.T)) {
      auto [step, decision] = select_step(state);
      result.decisions.push_back(std::move(decision));
      state = append_step(state, std::move(step), static_cast<std::size_t>(options_.T));
    }
    if (state.is_terminal()) {
      result.record.answer = state.steps.back().thought;
    } else {
      result.record.answer = gateway_.finalize(state);
      result.forced_finalization = true;
    }
  } catch (const Error& e) {
    throw ChainAborted(state, e.kind(), e.what());
  }
  result.record.question = question;
  result.record.steps = std::move(state.steps);
  return result;
}

void to_json(nlohmann::json& j, const ScoredCandidate& candidate) {
  j = nlohmann::json{{"step", candidate.step},
                     {"score", candidate.score.value},
                     {"adjusted", candidate.score.adjusted},
                     {"raw_score", candidate.raw_score},
                     {"lookahead_depth", candidate.lookahead_depth}};
}

void to_json(nlohmann::json& j, const StepDecision& d) {
  auto optional_number = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  j = nlohmann::json{{"step_index", d.step_index},
                     {"candidates", d.candidates},
                     {"chosen_index", d.chosen_index},
                     {"refined", d.refined},
                     {"pre_refine_score", optional_number(d.pre_refine_score)},
                     {"post_refine_score", optional_number(d.post_refine_score)},
                     {"lookahead_depth_used", d.lookahead_depth_used},
                     {"parse_failures", d.parse_failures},
                     {"warnings", d.warnings},
                     {"accepted", d.accepted}};
}

void write_decision_trace(const std::filesystem::path& path,
                          const std::vector<StepDecision>& decisions) {
  std::ostringstream out;
  for (const auto& d : decisions) out << nlohmann::json(d).dump() << '\n';
  write_file_atomic(path, out.str());
}

}  // namespace steprag
