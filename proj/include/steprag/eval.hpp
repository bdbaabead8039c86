#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/engine.hpp"
#include "steprag/gateway.hpp"

namespace steprag {

/// One benchmark line: {id, question, golden_answers:[...]}.
struct BenchmarkItem {
  std::string id;
  std::string question;
  std::vector<std::string> golden_answers;

  bool operator==(const BenchmarkItem&) const = default;
};

void to_json(nlohmann::json& j, const BenchmarkItem& item);
void from_json(const nlohmann::json& j, BenchmarkItem& item);
void validate(const BenchmarkItem& item);

std::vector<BenchmarkItem> read_benchmark(std::istream& in);
std::vector<BenchmarkItem> load_benchmark(const std::filesystem::path& path);

/// Containment of normalize(gold) in normalize(predicted). Throws
/// DomainError when gold normalizes to nothing.
bool acc_r(std::string_view gold, std::string_view predicted);
/// Any-match over aliases.
bool acc_r(const std::vector<std::string>& golds, std::string_view predicted);

inline constexpr std::string_view kJudgePromptTemplate =
    "Given a Question and its Golden Answer, verify whether the Predicted Answer is correct. \n"
    "The prediction is correct if it fully aligns with the meaning and key information of the "
    "Golden Answer. \n"
    "Respond with True if the prediction is correct and False otherwise.\n"
    "\n"
    "Question: {}\n"
    "\n"
    "Golden Answer: {}\n"
    "\n"
    "Predicted Answer: {}";

std::string render_judge_prompt(std::string_view question, std::string_view gold,
                                std::string_view predicted);
/// "True..."/"False..." after trimming, case-insensitive; else JudgeUnparseable.
bool parse_judge_reply(std::string_view reply);
bool acc_l(const Gateway& gateway, std::string_view question, std::string_view gold,
           std::string_view predicted);

struct ImprovementCounts {
  std::size_t improved = 0;
  std::size_t refined = 0;
  /// Undefined (nullopt) when nothing was refined.
  std::optional<double> rate() const;
};

ImprovementCounts improvement_counts(const std::vector<StepDecision>& decisions);
std::optional<double> improvement_rate(const std::vector<StepDecision>& decisions);

struct EvalRecord {
  std::string id;
  std::string question;
  std::vector<std::string> golden_answers;
  std::string predicted;
  bool acc_r = false;
  std::optional<bool> acc_l;
  std::size_t steps = 0;
  std::size_t refined_steps = 0;
  std::size_t improved_steps = 0;

  bool operator==(const EvalRecord&) const = default;
};

struct EvalReport {
  std::string dataset;
  std::string config_fingerprint;
  std::vector<EvalRecord> records;
  double acc_r = 0.0;
  std::optional<double> acc_l;
  std::size_t improved = 0;
  std::size_t refined = 0;

  /// Recomputes the aggregates from the records.
  void aggregate();
  /// Throws InvariantViolation when the stored aggregates disagree with the records.
  void check_consistency() const;
  std::optional<double> improvement_rate() const {
    return ImprovementCounts{improved, refined}.rate();
  }
  std::string to_table() const;
};

void to_json(nlohmann::json& j, const EvalRecord& record);
void from_json(const nlohmann::json& j, EvalRecord& record);
void to_json(nlohmann::json& j, const EvalReport& report);
/// Also checks consistency.
void from_json(const nlohmann::json& j, EvalReport& report);

struct EvalOptions {
  std::string dataset = "benchmark";
  std::string config_fingerprint;
  bool judge = false;       // also compute ACC_L
  int max_concurrency = 1;  // questions in flight
};

struct EvalRun {
  EvalReport report;
  std::vector<ChainResult> chains;  // same order as the items
};

EvalRun evaluate(const ReasoningEngine& engine, const std::vector<BenchmarkItem>& items,
                 const EvalOptions& options);

}  // namespace steprag
