#include "steprag/supervision.hpp"

#include <cmath>
#include <set>

#include "steprag/error.hpp"
#include "steprag/hashing.hpp"
#include "steprag/parallel.hpp"

namespace steprag {

PlainPolicy::PlainPolicy(Gateway gateway, int T, std::string tag)
    : gateway_(std::move(gateway)), T_(T), tag_(std::move(tag)) {}

ReasoningStep PlainPolicy::next_step(const ReasoningState& state, std::uint64_t index) const {
  return gateway_.sample_step(state, {"rollout", index, false});
}

ChainRecord PlainPolicy::rollout(const ReasoningState& start, std::uint64_t index) const {
  ReasoningState state = start;
  while (!state.is_terminal() && state.step_count() < static_cast<std::size_t>(T_)) {
    state.steps.push_back(next_step(state, index));
  }
  ChainRecord record;
  record.question = state.question;
  record.answer = state.is_terminal() ? state.steps.back().thought : gateway_.finalize(state);
  record.steps = std::move(state.steps);
  return record;
}

RefiningPolicy::RefiningPolicy(Gateway gateway, int T, double tau, std::string tag)
    : PlainPolicy(std::move(gateway), T, std::move(tag)),
      tau_(tau),
      refinements_(std::make_shared<std::atomic<std::size_t>>(0)) {}

ReasoningStep RefiningPolicy::next_step(const ReasoningState& state, std::uint64_t index) const {
  ReasoningStep step = PlainPolicy::next_step(state, index);
  const ProcessScore score = gateway_.score_step(state, step);
  if (score.value > tau_) return step;
  const std::string explanation = gateway_.explain_step(state, step, score);
  ++*refinements_;
  return gateway_.refine_step(state, step, explanation, score);
}

std::uint64_t RolloutCache::key(const RolloutPolicy& policy, const ReasoningState& state) {
  return fingerprint(0, {policy.tag(), render_transcript(state)});
}

std::optional<RolloutCache::Entry> RolloutCache::find(std::uint64_t key) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void RolloutCache::append(std::uint64_t key, const std::vector<ChainRecord>& rollouts) {
  std::lock_guard lock(mutex_);
  Entry& entry = entries_[key];
  for (const auto& r : rollouts) {
    if (!r.correct) throw Error(ErrorKind::kInvariantViolation, "cached rollout lacks correctness");
    entry.rollouts.push_back(r);
    entry.correct += *r.correct ? 1 : 0;
  }
}

std::size_t RolloutCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

McEstimator::McEstimator(const RolloutPolicy& policy, RolloutCache& cache,
                         std::vector<std::string> golden_answers, int max_concurrency)
    : policy_(policy),
      cache_(cache),
      golds_(std::move(golden_answers)),
      max_concurrency_(max_concurrency) {}

double McEstimator::mc_score(const ReasoningState& state, int n) {
  if (n < 1) throw Error(ErrorKind::kDomainError, "rollout count must be >= 1");
  ++evaluations_;
  const auto key = RolloutCache::key(policy_, state);
  const auto entry = cache_.find(key);
  const std::size_t have = entry ? entry->rollouts.size() : 0;
  if (have < static_cast<std::size_t>(n)) {
    auto fresh = parallel_map(static_cast<std::size_t>(n) - have, max_concurrency_,
                              [&](std::size_t i) {
                                ChainRecord r = policy_.rollout(state, have + i);
                                r.correct = acc_r(golds_, r.answer);
                                return r;
                              });
    cache_.append(key, fresh);
  }
  return *cached_mc(state, n);
}

std::vector<ChainRecord> McEstimator::rollouts(const ReasoningState& state, int n) const {
  const auto entry = cache_.find(RolloutCache::key(policy_, state));
  if (!entry) return {};
  const auto count = std::min(entry->rollouts.size(), static_cast<std::size_t>(n));
  return {entry->rollouts.begin(), entry->rollouts.begin() + static_cast<std::ptrdiff_t>(count)};
}

std::optional<double> McEstimator::cached_mc(const ReasoningState& state, int n) const {
  const auto first = rollouts(state, n);
  if (n < 1 || first.size() < static_cast<std::size_t>(n)) return std::nullopt;
  std::size_t correct = 0;
  for (const auto& r : first) correct += *r.correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

ReasoningState prefix_state(const ChainRecord& chain, std::size_t length) {
  return {chain.question, {chain.steps.begin(),
                           chain.steps.begin() + static_cast<std::ptrdiff_t>(length)}};
}

}  // namespace

Annotation annotate_first_error(const ChainRecord& chain, int n, McEstimator& estimator) {
  Annotation a;
  const std::size_t length = chain.steps.size();
  // Smallest dead prefix in [1, length]; length + 1 stands for "none". A
  // finished chain already judged wrong is itself a dead prefix.
  std::size_t lo = 1, hi = length + 1;
  if (length > 0 && chain.steps.back().is_terminal && chain.correct == false) hi = length;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    const double mc = estimator.mc_score(prefix_state(chain, mid), n);
    ++a.evaluations;
    a.evaluated.emplace_back(mid, mc);
    if (mc == 0.0) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  if (hi <= length) a.first_error = hi;

  bool seen_dead = false;
  for (std::size_t k = 1; k <= length && !a.monotonicity_violation; ++k) {
    const auto mc = estimator.cached_mc(prefix_state(chain, k), n);
    if (!mc) continue;
    if (*mc == 0.0) {
      seen_dead = true;
    } else if (seen_dead) {
      a.monotonicity_violation = true;
    }
  }
  return a;
}

std::optional<std::size_t> linear_scan_first_error(const ChainRecord& chain, int n,
                                                   McEstimator& estimator) {
  for (std::size_t k = 1; k <= chain.steps.size(); ++k) {
    if (estimator.mc_score(prefix_state(chain, k), n) == 0.0) return k;
  }
  return std::nullopt;
}

TreeAnnotation annotate_rollout_tree(const ReasoningState& root, int n, int cap,
                                     McEstimator& estimator) {
  TreeAnnotation tree;
  std::set<std::string> seen;
  for (const ChainRecord& rollout : estimator.rollouts(root, n)) {
    const Annotation a = annotate_first_error(rollout, n, estimator);
    tree.monotonicity_violations += a.monotonicity_violation ? 1 : 0;
    for (const auto& [length, mc] : a.evaluated) {
      if (tree.steps.size() >= static_cast<std::size_t>(cap)) return tree;
      AnnotatedStep s{prefix_state(rollout, length - 1), rollout.steps[length - 1], mc};
      if (seen.insert(render_transcript(s.state) + '\x1f' + render_step(s.step)).second) {
        tree.steps.push_back(std::move(s));
      }
    }
  }
  return tree;
}

void to_json(nlohmann::json& j, const PrmCollectionReport& r) {
  j = nlohmann::json{{"questions", r.questions},
                     {"discarded_mc1", r.discarded_mc1},
                     {"escalated", r.escalated},
                     {"discarded_after_escalation", r.discarded_after_escalation},
                     {"failed", r.failed},
                     {"examples", r.examples},
                     {"positive", r.positive},
                     {"positive_fraction", r.positive_fraction()},
                     {"monotonicity_violations", r.monotonicity_violations},
                     {"mc_evaluations", r.mc_evaluations},
                     {"failures", r.failures}};
}

PrmCollection build_prm_dataset(const std::vector<BenchmarkItem>& questions,
                                const RolloutPolicy& weak_policy,
                                const RolloutPolicy& strong_policy,
                                const PrmCollectionOptions& options) {
  enum class Fate { kKept, kMc1, kEscalatedKept, kEscalatedDiscarded, kFailed };
  struct Outcome {
    Fate fate = Fate::kKept;
    std::vector<PrmExample> examples;
    std::size_t violations = 0;
    std::size_t evaluations = 0;
    std::string failure;
  };
  RolloutCache cache;

  auto outcomes = parallel_map(questions.size(), options.max_concurrency, [&](std::size_t qi) {
    const BenchmarkItem& item = questions[qi];
    Outcome out;
    try {
      const ReasoningState root{item.question, {}};
      McEstimator weak(weak_policy, cache, item.golden_answers);
      McEstimator strong(strong_policy, cache, item.golden_answers);
      McEstimator* chosen = &weak;
      const double mc = weak.mc_score(root, options.N);
      if (mc == 1.0) {
        out.fate = Fate::kMc1;
      } else if (mc == 0.0) {
        const double escalated = strong.mc_score(root, options.N);
        out.fate = (escalated == 0.0 || escalated == 1.0) ? Fate::kEscalatedDiscarded
                                                           : Fate::kEscalatedKept;
        chosen = &strong;
      }
      if (out.fate == Fate::kKept || out.fate == Fate::kEscalatedKept) {
        const TreeAnnotation tree =
            annotate_rollout_tree(root, options.N, options.example_cap, *chosen);
        out.violations = tree.monotonicity_violations;
        for (const auto& annotated : tree.steps) {
          PrmExample ex;
          ex.question_id = item.id;
          ex.state = annotated.state;
          ex.step = annotated.step;
          ex.mc = annotated.mc;
          ex.label = binary_label(annotated.mc);
          out.examples.push_back(std::move(ex));
        }
      }
      out.evaluations = weak.evaluations() + strong.evaluations();
    } catch (const Error& e) {
      if (is_backend_outage(e)) throw;
      out = Outcome{};
      out.fate = Fate::kFailed;
      out.failure = item.id + ": " + e.what();
    }
    return out;
  });

  PrmCollection result;
  PrmCollectionReport& report = result.report;
  report.questions = questions.size();
  for (auto& o : outcomes) {
    switch (o.fate) {
      case Fate::kMc1: ++report.discarded_mc1; break;
      case Fate::kEscalatedKept: ++report.escalated; break;
      case Fate::kEscalatedDiscarded:
        ++report.escalated;
        ++report.discarded_after_escalation;
        break;
      case Fate::kFailed:
        ++report.failed;
        report.failures.push_back(o.failure);
        break;
      case Fate::kKept: break;
    }
    report.monotonicity_violations += o.violations;
    report.mc_evaluations += o.evaluations;
    for (auto& ex : o.examples) {
      report.positive += static_cast<std::size_t>(ex.label);
      result.examples.push_back(std::move(ex));
    }
  }
  report.examples = result.examples.size();
  return result;
}

namespace {

void check_loss_inputs(std::span<const double> p, std::span<const int> y) {
  if (p.size() != y.size()) {
    throw Error(ErrorKind::kLengthMismatch, std::to_string(p.size()) + " predictions vs " +
                                                std::to_string(y.size()) + " labels");
  }
  if (p.empty()) throw Error(ErrorKind::kDomainError, "empty batch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) {
      throw Error(ErrorKind::kDomainError, "prediction outside (0,1) at index " + std::to_string(i));
    }
    if (y[i] != 0 && y[i] != 1) {
      throw Error(ErrorKind::kDomainError, "label must be 0 or 1 at index " + std::to_string(i));
    }
  }
}

}  // namespace

double prm_ce_loss(std::span<const double> p, std::span<const int> y) {
  check_loss_inputs(p, y);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum += y[i] ? std::log(p[i]) : std::log1p(-p[i]);
  }
  return -sum / static_cast<double>(p.size());
}

std::vector<double> prm_ce_loss_gradient(std::span<const double> p, std::span<const int> y) {
  check_loss_inputs(p, y);
  const double m = static_cast<double>(p.size());
  std::vector<double> grad(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    grad[i] = y[i] ? -1.0 / (m * p[i]) : 1.0 / (m * (1.0 - p[i]));
  }
  return grad;
}

}  // namespace steprag
