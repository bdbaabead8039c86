#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/eval.hpp"
#include "steprag/gateway.hpp"
#include "steprag/supervision.hpp"
#include "steprag/types.hpp"

namespace steprag {

/// Score, explain, refine, re-score. Ties yield no record.
std::optional<PemPreferenceExample> collect_preference_example(const Gateway& gateway,
                                                               const ReasoningState& state,
                                                               const ReasoningStep& step);

/// lambda0 * exp(r1 - r2). DomainError unless lambda0 > 0.
double dynamic_lambda_u(double r1, double r2, double lambda0);

struct KtoExample {
  double policy_lp = 0.0;
  double ref_lp = 0.0;
  bool desirable = true;
  double lambda_u = 1.0;  // read only for undesirable examples
};

struct KtoBatchInput {
  std::vector<KtoExample> examples;
  double z0 = 0.0;
  double beta = 0.1;
  double lambda_d = 1.0;

  /// DomainError on an empty batch or non-positive coefficients.
  void validate() const;
};

/// mean over the batch of (lambda_y - v), with
/// v = lambda_d sigma(beta (r - z0)) for desirable and
/// v = lambda_u sigma(beta (z0 - r)) for undesirable, r = policy_lp - ref_lp.
double kto_loss(const KtoBatchInput& batch);
/// d loss / d policy_lp for every example.
std::vector<double> kto_loss_gradient(const KtoBatchInput& batch);

/// max(0, mean of the KL samples); 0 for no samples.
double estimate_z0(std::span<const double> kl_samples);

struct PemCollectionOptions {
  int T = 5;
  int pairs_per_question = 1;
  std::uint64_t seed = 0;
  int max_concurrency = 1;
};

struct PemCollectionReport {
  std::size_t questions = 0;
  std::size_t pairs = 0;
  std::size_t ties = 0;
  std::size_t improved = 0;  // preference +1
  std::size_t degraded = 0;  // preference -1
  std::size_t failed = 0;
  std::vector<std::string> failures;
};

void to_json(nlohmann::json& j, const PemCollectionReport& report);

struct PemCollection {
  std::vector<PemPreferenceExample> examples;
  PemCollectionReport report;
};

/// Rolls out one policy chain per question and draws (state, step) pairs
/// uniformly over its steps.
PemCollection collect_pem_dataset(const Gateway& gateway,
                                  const std::vector<BenchmarkItem>& questions,
                                  const PemCollectionOptions& options);

/// Trainer-facing batch: one entry per preference record. Log-probabilities
/// are left null for the trainer to fill.
nlohmann::json kto_batch_json(const std::vector<PemPreferenceExample>& examples, double lambda0,
                              double beta, double lambda_d, double z0 = 0.0);

}  // namespace steprag
