#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/config.hpp"
#include "steprag/error.hpp"
#include "steprag/gateway.hpp"
#include "steprag/types.hpp"

namespace steprag {

struct LookaheadParams {
  double alpha = 0.5;
  double beta = 0.05;
  int H = 3;
  int T = 5;  // continuation never grows the state past T steps

  /// alpha = 1, beta = 0, H = T: scores the whole greedy continuation and
  /// keeps the last one.
  static LookaheadParams full_rollout(int T) { return {1.0, 0.0, T, T}; }
};

struct LookaheadResult {
  ProcessScore score;
  int depth = 0;  // continuation steps simulated
  std::optional<std::string> warning;
};

struct SearchOptions {
  int M = 3;
  int T = 5;
  double tau = 0.5;
  int refine_retries = 1;
  int shallow_cutoff = 3;
  bool lookahead = true;
  bool refinement = true;
  LookaheadParams lookahead_params;
  int max_concurrency = 1;  // candidate-level parallelism

  static SearchOptions from_config(const EngineConfig& config);
};

struct ScoredCandidate {
  ReasoningStep step;
  ProcessScore score;     // after lookahead when it applied
  double raw_score = 0.0;
  int lookahead_depth = 0;
};

struct StepDecision {
  std::size_t step_index = 0;  // 1-based position of the accepted step
  std::vector<ScoredCandidate> candidates;
  std::size_t chosen_index = 0;
  bool refined = false;
  std::optional<double> pre_refine_score;
  std::optional<double> post_refine_score;
  int lookahead_depth_used = 0;
  int parse_failures = 0;
  std::vector<std::string> warnings;
  ReasoningStep accepted;
};

struct ChainResult {
  ChainRecord record;
  std::vector<StepDecision> decisions;
  bool forced_finalization = false;
};

/// Raised by run_chain; keeps the state reached before the failure and the
/// kind of the underlying error.
class ChainAborted : public Error {
 public:
  ChainAborted(ReasoningState partial, ErrorKind cause, const std::string& message);
  const ReasoningState& partial() const noexcept { return partial_; }
  ErrorKind cause() const noexcept { return cause_; }
  ErrorKind root_kind() const noexcept override { return cause_; }

 private:
  ReasoningState partial_;
  ErrorKind cause_;
};

class ReasoningEngine {
 public:
  ReasoningEngine(Gateway gateway, SearchOptions options);

  std::pair<ReasoningStep, StepDecision> select_step(const ReasoningState& state) const;

  /// Greedy TD lookahead: v0 = r_t, v_k = v_{k-1} + alpha (r_{t+k} - v_{k-1}).
  /// Gateway failures fall back to the raw score with a warning.
  LookaheadResult td_lookahead_adjust(const ReasoningState& state, const ReasoningStep& step,
                                      ProcessScore raw, const LookaheadParams& params) const;
  LookaheadResult td_lookahead_adjust(const ReasoningState& state, const ReasoningStep& step,
                                      ProcessScore raw) const {
    return td_lookahead_adjust(state, step, raw, options_.lookahead_params);
  }

  /// Raw PRM score, TD-adjusted when the step lands within the shallow cutoff.
  ScoredCandidate score_candidate(const ReasoningState& state, ReasoningStep step) const;

  /// Throws ChainAborted.
  ChainResult run_chain(const std::string& question) const;

  const Gateway& gateway() const noexcept { return gateway_; }
  const SearchOptions& options() const noexcept { return options_; }

 private:
  Gateway gateway_;
  SearchOptions options_;
};

void to_json(nlohmann::json& j, const ScoredCandidate& candidate);
void to_json(nlohmann::json& j, const StepDecision& decision);
void write_decision_trace(const std::filesystem::path& path,
                          const std::vector<StepDecision>& decisions);

}  // namespace steprag
