#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/eval.hpp"
#include "steprag/gateway.hpp"
#include "steprag/types.hpp"

namespace steprag {

/// Completes a state to a final answer. `index` selects the draw so that
/// rollout i from a given state is reproducible.
class RolloutPolicy {
 public:
  virtual ~RolloutPolicy() = default;
  virtual ChainRecord rollout(const ReasoningState& state, std::uint64_t index) const = 0;
  /// Distinguishes policies sharing one cache.
  virtual std::string tag() const = 0;
};

/// Unassisted sampling: one proposal per step, no PRM, no refinement.
class PlainPolicy : public RolloutPolicy {
 public:
  PlainPolicy(Gateway gateway, int T, std::string tag = "plain");
  ChainRecord rollout(const ReasoningState& state, std::uint64_t index) const override;
  std::string tag() const override { return tag_; }

 protected:
  virtual ReasoningStep next_step(const ReasoningState& state, std::uint64_t index) const;
  Gateway gateway_;

 private:
  int T_;
  std::string tag_;
};

/// Like PlainPolicy, but a sampled step whose PRM score is <= tau is
/// explained and refined before the rollout continues.
class RefiningPolicy : public PlainPolicy {
 public:
  RefiningPolicy(Gateway gateway, int T, double tau, std::string tag = "refining");
  std::size_t refinements() const noexcept { return refinements_->load(); }

 protected:
  ReasoningStep next_step(const ReasoningState& state, std::uint64_t index) const override;

 private:
  double tau_;
  std::shared_ptr<std::atomic<std::size_t>> refinements_;
};

/// Rollouts keyed by (policy tag, state). Safe for concurrent use.
class RolloutCache {
 public:
  struct Entry {
    std::vector<ChainRecord> rollouts;
    std::size_t correct = 0;  // rollouts with correct == true
  };

  static std::uint64_t key(const RolloutPolicy& policy, const ReasoningState& state);

  std::optional<Entry> find(std::uint64_t key) const;
  /// Appends rollouts; they must carry `correct`.
  void append(std::uint64_t key, const std::vector<ChainRecord>& rollouts);
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::unordered_map<std::uint64_t, Entry> entries_;
};

/// MC = correct / n, correctness by ACC_R against the gold aliases.
class McEstimator {
 public:
  McEstimator(const RolloutPolicy& policy, RolloutCache& cache,
              std::vector<std::string> golden_answers, int max_concurrency = 1);

  /// Reuses cached rollouts and tops them up to n. Throws DomainError for n < 1.
  double mc_score(const ReasoningState& state, int n);
  /// First n cached rollouts of the state (after mc_score).
  std::vector<ChainRecord> rollouts(const ReasoningState& state, int n) const;
  /// Cached MC over the first n rollouts, if at least n exist.
  std::optional<double> cached_mc(const ReasoningState& state, int n) const;

  std::size_t evaluations() const noexcept { return evaluations_; }
  const RolloutPolicy& policy() const noexcept { return policy_; }

 private:
  const RolloutPolicy& policy_;
  RolloutCache& cache_;
  std::vector<std::string> golds_;
  int max_concurrency_;
  std::size_t evaluations_ = 0;
};

struct Annotation {
  std::optional<std::size_t> first_error;  // 1-based; none when no prefix is dead
  std::size_t evaluations = 0;
  std::vector<std::pair<std::size_t, double>> evaluated;  // (prefix length, MC) in search order
  bool monotonicity_violation = false;
};

/// Binary search for the first prefix with MC = 0. Uses at most
/// ceil(log2(len)) + 1 MC evaluations. A terminal chain with correct ==
/// false counts as dead at full length without rollouts. A cached dead
/// prefix followed by a live one sets monotonicity_violation.
Annotation annotate_first_error(const ChainRecord& chain, int n, McEstimator& estimator);

/// Every prefix, first to last; the reference the binary search must match.
std::optional<std::size_t> linear_scan_first_error(const ChainRecord& chain, int n,
                                                   McEstimator& estimator);

struct AnnotatedStep {
  ReasoningState state;
  ReasoningStep step;
  double mc = 0.0;
};

struct TreeAnnotation {
  std::vector<AnnotatedStep> steps;  // deduplicated by (state, step), at most `cap`
  std::size_t monotonicity_violations = 0;
};

/// Annotates every incorrect cached rollout of `root` (the n rollouts that
/// produced its MC) and returns each evaluated prefix with its MC.
TreeAnnotation annotate_rollout_tree(const ReasoningState& root, int n, int cap,
                                     McEstimator& estimator);

struct PrmCollectionReport {
  std::size_t questions = 0;
  std::size_t discarded_mc1 = 0;
  std::size_t escalated = 0;
  std::size_t discarded_after_escalation = 0;
  std::size_t failed = 0;
  std::size_t examples = 0;
  std::size_t positive = 0;
  std::size_t monotonicity_violations = 0;
  std::size_t mc_evaluations = 0;
  std::vector<std::string> failures;

  double positive_fraction() const {
    return examples == 0 ? 0.0 : static_cast<double>(positive) / static_cast<double>(examples);
  }
};

void to_json(nlohmann::json& j, const PrmCollectionReport& report);

struct PrmCollectionOptions {
  int N = 5;
  int example_cap = 32;
  int max_concurrency = 1;  // questions in flight
};

struct PrmCollection {
  std::vector<PrmExample> examples;
  PrmCollectionReport report;
};

PrmCollection build_prm_dataset(const std::vector<BenchmarkItem>& questions,
                                const RolloutPolicy& weak_policy,
                                const RolloutPolicy& strong_policy,
                                const PrmCollectionOptions& options);

/// -(1/M) sum[y log p + (1-y) log(1-p)]. DomainError for p outside (0,1),
/// LengthMismatch for unequal inputs, DomainError for an empty batch.
double prm_ce_loss(std::span<const double> predictions, std::span<const int> labels);
std::vector<double> prm_ce_loss_gradient(std::span<const double> predictions,
                                         std::span<const int> labels);

}  // namespace steprag
