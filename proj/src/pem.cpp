#include "steprag/pem.hpp"

#include <cmath>
#include <set>

#include "steprag/error.hpp"
#include "steprag/hashing.hpp"
#include "steprag/parallel.hpp"
#include "steprag/serialization.hpp"

namespace steprag {

std::optional<PemPreferenceExample> collect_preference_example(const Gateway& gateway,
                                                               const ReasoningState& state,
                                                               const ReasoningStep& step) {
  const ProcessScore r1 = gateway.score_step(state, step);
  std::string explanation = gateway.explain_step(state, step, r1);
  const ReasoningStep refined = gateway.refine_step(state, step, explanation, r1);
  const ProcessScore r2 = gateway.score_step(state, refined);
  if (r2.value == r1.value) return std::nullopt;
  PemPreferenceExample ex;
  ex.state = state;
  ex.step = step;
  ex.explanation = std::move(explanation);
  ex.r1 = r1.value;
  ex.r2 = r2.value;
  ex.preference = r2.value > r1.value ? 1 : -1;
  return ex;
}

double dynamic_lambda_u(double r1, double r2, double lambda0) {
  if (!(lambda0 > 0.0)) throw Error(ErrorKind::kDomainError, "lambda0 must be > 0");
  return lambda0 * std::exp(r1 - r2);
}

void KtoBatchInput::validate() const {
  if (examples.empty()) throw Error(ErrorKind::kDomainError, "empty KTO batch");
  if (!(beta > 0.0)) throw Error(ErrorKind::kDomainError, "beta must be > 0");
  if (!(lambda_d > 0.0)) throw Error(ErrorKind::kDomainError, "lambda_d must be > 0");
  for (const auto& e : examples) {
    if (!e.desirable && !(e.lambda_u > 0.0)) {
      throw Error(ErrorKind::kDomainError, "lambda_u must be > 0");
    }
  }
}

namespace {

double logistic(double x) {
  // Split by sign so neither branch overflows.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double kto_loss(const KtoBatchInput& batch) {
  batch.validate();
  double sum = 0.0;
  for (const auto& e : batch.examples) {
    const double r = e.policy_lp - e.ref_lp;
    if (e.desirable) {
      sum += batch.lambda_d - batch.lambda_d * logistic(batch.beta * (r - batch.z0));
    } else {
      sum += e.lambda_u - e.lambda_u * logistic(batch.beta * (batch.z0 - r));
    }
  }
  return sum / static_cast<double>(batch.examples.size());
}

std::vector<double> kto_loss_gradient(const KtoBatchInput& batch) {
  batch.validate();
  const double m = static_cast<double>(batch.examples.size());
  std::vector<double> grad;
  grad.reserve(batch.examples.size());
  for (const auto& e : batch.examples) {
    const double r = e.policy_lp - e.ref_lp;
    if (e.desirable) {
      const double s = logistic(batch.beta * (r - batch.z0));
      grad.push_back(-batch.lambda_d * batch.beta * s * (1.0 - s) / m);
    } else {
      const double s = logistic(batch.beta * (batch.z0 - r));
      grad.push_back(e.lambda_u * batch.beta * s * (1.0 - s) / m);
    }
  }
  return grad;
}

double estimate_z0(std::span<const double> kl_samples) {
  if (kl_samples.empty()) return 0.0;
  double sum = 0.0;
  for (double v : kl_samples) sum += v;
  return std::max(0.0, sum / static_cast<double>(kl_samples.size()));
}

void to_json(nlohmann::json& j, const PemCollectionReport& r) {
  j = nlohmann::json{{"questions", r.questions}, {"pairs", r.pairs},
                     {"ties", r.ties},           {"improved", r.improved},
                     {"degraded", r.degraded},   {"failed", r.failed},
                     {"failures", r.failures}};
}

PemCollection collect_pem_dataset(const Gateway& gateway,
                                  const std::vector<BenchmarkItem>& questions,
                                  const PemCollectionOptions& options) {
  struct Outcome {
    std::vector<PemPreferenceExample> examples;
    std::size_t pairs = 0;
    std::size_t ties = 0;
    std::optional<std::string> failure;
  };
  const PlainPolicy policy(gateway, options.T, "pem-source");
  auto outcomes = parallel_map(questions.size(), options.max_concurrency, [&](std::size_t qi) {
    const BenchmarkItem& item = questions[qi];
    Outcome out;
    try {
      const ChainRecord chain = policy.rollout({item.question, {}}, 0);
      if (chain.steps.empty()) return out;
      SeededStream rng(fingerprint(options.seed, {"pem-pairs", item.id, item.question}));
      std::set<std::size_t> drawn;
      const auto wanted = std::min<std::size_t>(
          static_cast<std::size_t>(std::max(0, options.pairs_per_question)), chain.steps.size());
      while (drawn.size() < wanted) drawn.insert(rng.index(chain.steps.size()));
      for (std::size_t depth : drawn) {
        const ReasoningState state{chain.question,
                                   {chain.steps.begin(),
                                    chain.steps.begin() + static_cast<std::ptrdiff_t>(depth)}};
        ++out.pairs;
        if (auto ex = collect_preference_example(gateway, state, chain.steps[depth])) {
          out.examples.push_back(std::move(*ex));
        } else {
          ++out.ties;
        }
      }
    } catch (const Error& e) {
      if (is_backend_outage(e)) throw;
      out = Outcome{};
      out.failure = item.id + ": " + e.what();
    }
    return out;
  });

  PemCollection result;
  result.report.questions = questions.size();
  for (auto& o : outcomes) {
    result.report.pairs += o.pairs;
    result.report.ties += o.ties;
    if (o.failure) {
      ++result.report.failed;
      result.report.failures.push_back(*o.failure);
    }
    for (auto& ex : o.examples) {
      (ex.preference > 0 ? result.report.improved : result.report.degraded) += 1;
      result.examples.push_back(std::move(ex));
    }
  }
  return result;
}

nlohmann::json kto_batch_json(const std::vector<PemPreferenceExample>& examples, double lambda0,
                              double beta, double lambda_d, double z0) {
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const bool desirable = ex.preference > 0;
    items.push_back({{"record", i},
                     {"policy_lp", nullptr},
                     {"ref_lp", nullptr},
                     {"desirable", desirable},
                     {"lambda", desirable ? lambda_d : dynamic_lambda_u(ex.r1, ex.r2, lambda0)}});
  }
  return {{"examples", items}, {"z0", z0}, {"beta", beta}, {"lambda_d", lambda_d}};
}

}  // namespace steprag
