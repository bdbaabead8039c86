#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "steprag/types.hpp"

namespace steprag {

enum class Role { kGenerator, kPrm, kPem, kJudge, kRetriever };
std::string_view to_string(Role role);

enum class Strength { kWeak, kStrong };

/// Describes one policy generator (the weak or the strong one).
struct GeneratorRole {
  std::string endpoint;
  std::string model;
  double temperature = 0.7;
  std::string system_prompt_id = "system";
  Strength strength = Strength::kWeak;
};

struct ModelCallRecord {
  Role role = Role::kGenerator;
  std::string request;
  std::string response;
  double latency_ms = 0.0;
  int retry_count = 0;
  std::optional<int> prompt_tokens;
  std::optional<int> completion_tokens;
  bool failed = false;
};

/// Thread-safe append-only log; one record per backend call.
class CallLog {
 public:
  void add(ModelCallRecord record);
  std::vector<ModelCallRecord> records() const;
  std::size_t size() const;
  std::size_t count(Role role) const;

 private:
  mutable std::mutex mutex_;
  std::vector<ModelCallRecord> records_;
};

/// Filled in by backends so the gateway can log retries and token usage.
struct CallInfo {
  int retry_count = 0;
  std::optional<int> prompt_tokens;
  std::optional<int> completion_tokens;
};

/// Which draw a proposal is. Simulated backends derive their randomness
/// from it; HTTP backends only look at `greedy` (temperature 0).
struct SampleRequest {
  std::string_view stream = "candidate";
  std::uint64_t index = 0;
  bool greedy = false;
};

struct Document {
  std::string text;
  double score = 0.0;
};

// Backend roles. Implementations must be callable from concurrent tasks.

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string propose(const ReasoningState& state, const SampleRequest& sample,
                              CallInfo& info) = 0;
  virtual std::string refine(const ReasoningState& state, const ReasoningStep& step,
                             std::string_view explanation, double score, CallInfo& info) = 0;
  virtual std::string finalize(const ReasoningState& state, CallInfo& info) = 0;
  virtual const GeneratorRole& role() const = 0;
};

class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual double score(const ReasoningState& state, const ReasoningStep& step, CallInfo& info) = 0;
};

class Explainer {
 public:
  virtual ~Explainer() = default;
  virtual std::string explain(const ReasoningState& state, const ReasoningStep& step,
                              double score, CallInfo& info) = 0;
};

class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::vector<Document> search(std::string_view query, int k, CallInfo& info) = 0;
};

class Judge {
 public:
  virtual ~Judge() = default;
  virtual std::string complete(std::string_view prompt, CallInfo& info) = 0;
};

struct Backends {
  std::shared_ptr<Generator> generator;
  std::shared_ptr<RewardModel> prm;
  std::shared_ptr<Explainer> pem;
  std::shared_ptr<Retriever> retriever;
  std::shared_ptr<Judge> judge;
};

/// Parses the tagged-line step protocol (Sub-Query / Retrieve / Thought, or
/// a "Final Answer:" line). Throws ParseFailure carrying the raw text.
ReasoningStep parse_step_output(std::string_view raw);

/// Extracts the answer of a finalization reply: the "Final Answer:" line if
/// present, otherwise the whole trimmed reply.
std::string parse_final_answer(std::string_view raw);

/// Typed front door to all model roles. Parses generator output, fills
/// retrieved documents, validates PRM scores and logs every backend call.
class Gateway {
 public:
  struct Candidate {
    std::optional<ReasoningStep> step;
    std::string error;
  };

  Gateway(Backends backends, int top_k, std::shared_ptr<CallLog> log = nullptr);

  /// Same roles and log, different policy generator.
  Gateway with_generator(std::shared_ptr<Generator> generator) const;

  /// Exactly m parsed candidates or ParseFailure.
  std::vector<ReasoningStep> propose_steps(const ReasoningState& state, int m,
                                           std::string_view stream = "candidate") const;
  /// m attempts; unparsable ones are reported in Candidate::error.
  std::vector<Candidate> propose_candidates(const ReasoningState& state, int m,
                                            std::string_view stream = "candidate") const;
  ReasoningStep sample_step(const ReasoningState& state, const SampleRequest& sample) const;

  ProcessScore score_step(const ReasoningState& state, const ReasoningStep& step) const;
  std::string explain_step(const ReasoningState& state, const ReasoningStep& step,
                           ProcessScore score) const;
  ReasoningStep refine_step(const ReasoningState& state, const ReasoningStep& step,
                            std::string_view explanation, ProcessScore score) const;
  std::string finalize(const ReasoningState& state) const;
  std::vector<Document> retrieve(std::string_view query, int k) const;
  std::string judge(std::string_view prompt) const;

  CallLog& log() const { return *log_; }
  const Backends& backends() const { return backends_; }
  int top_k() const { return top_k_; }

 private:
  ReasoningStep complete_step(std::string raw) const;

  Backends backends_;
  int top_k_;
  std::shared_ptr<CallLog> log_;
};

}  // namespace steprag
