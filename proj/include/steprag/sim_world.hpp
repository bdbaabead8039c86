#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "steprag/gateway.hpp"
#include "steprag/types.hpp"

// Deterministic synthetic multi-hop QA world. Facts are (head, relation,
// tail) triples over a random functional graph; questions follow relation
// chains. The simulated generator makes "wrong-hop" errors by substituting
// a decoy entity that can never lead to the gold answer, so a chain's first
// error is always well defined and success probabilities are exact.
namespace steprag::sim {

enum class PemMode { kHelpful, kAdversarial, kNeutral };
std::string_view to_string(PemMode mode);
PemMode parse_pem_mode(std::string_view text);

/// Per-depth parameters are lists indexed by step depth (1-based); the last
/// value extends to deeper steps.
struct WorldSpec {
  std::uint64_t seed = 7;
  int entities = 60;
  int relations = 6;
  int questions = 100;
  std::vector<double> hop_weights{0.0, 1.0, 1.0, 1.0};  // weight of hop lengths 1, 2, ...
  std::vector<double> correctness{0.9};                 // weak policy p(d)
  std::vector<double> strong_correctness{0.97};
  std::vector<double> prm_bias{-2.4, -0.72, -0.216, -0.0648, -0.01944};  // logit offset b(d)
  std::vector<double> prm_noise{0.65, 0.35, 0.2, 0.125, 0.0875};         // logit std σ(d)
  PemMode pem_mode = PemMode::kHelpful;
  double parametric_fraction = 0.0;
  double score_floor = 0.01;
  bool never_terminate = false;

  /// Throws SpecInfeasible.
  void validate() const;
  std::string to_text() const;

  static double at_depth(const std::vector<double>& values, std::size_t depth);
};

WorldSpec parse_world_spec(std::string_view text);
WorldSpec load_world_spec(const std::filesystem::path& path);

struct Question {
  std::string id;
  std::string text;
  std::string gold;
  std::vector<int> relations;       // relation index per hop
  std::vector<std::string> chain;   // start entity followed by one entity per hop
};

/// What a (prefix of a) reasoning chain means inside the world.
struct ChainTrace {
  const Question* question = nullptr;
  bool intact = true;              // every hop so far follows the gold chain
  std::size_t first_error = 0;     // 1-based step index, 0 when intact
  std::size_t hops_done = 0;
  std::string current;             // entity the chain currently stands on
  bool verified = false;           // an intact verified step guarantees the remaining hops
  bool terminal = false;
  bool answer_correct = false;
};

class World {
 public:
  /// Throws SpecInfeasible when the world spec cannot produce the requested
  /// question set.
  static std::shared_ptr<const World> generate(const WorldSpec& spec);

  const WorldSpec& spec() const noexcept { return spec_; }
  const std::vector<Question>& questions() const noexcept { return questions_; }
  const std::vector<std::string>& entities() const noexcept { return entities_; }
  const std::vector<std::string>& relation_names() const noexcept { return relation_names_; }

  const Question* find_question(std::string_view text) const;
  const std::string& tail(const std::string& head, int relation) const;
  bool is_parametric(const std::string& head, int relation) const;
  std::string fact_text(const std::string& head, int relation) const;
  /// Exact sub-query lookup ("<relation> of <Entity>").
  std::optional<std::string> lookup(std::string_view sub_query) const;

  /// Follows relations[from..] starting at `entity`.
  std::string follow(std::string entity, const Question& question, std::size_t from_hop) const;
  /// Entities that are wrong for hop `hop` (0-based) and can never reach gold.
  std::vector<std::size_t> decoys(const Question& question, std::size_t hop,
                                  const std::string& exclude) const;

  /// Throws UnknownEntity for questions or entities outside the world.
  ChainTrace trace(const std::string& question, const std::vector<ReasoningStep>& steps) const;

  /// Probability that the policy of the given strength reaches the gold
  /// answer from [state, step].
  double success_probability(const ReasoningState& state, const ReasoningStep& step,
                             Strength strength = Strength::kWeak) const;
  /// success_probability mapped into [floor, 1 - floor].
  double oracle_step_value(const ReasoningState& state, const ReasoningStep& step,
                           Strength strength = Strength::kWeak) const;
  double ceiling() const noexcept { return 1.0 - spec_.score_floor; }
  double floor() const noexcept { return spec_.score_floor; }

  /// Per-hop correctness of the policy at step depth `depth` (1-based).
  double correctness(std::size_t depth, Strength strength) const;

 private:
  explicit World(WorldSpec spec) : spec_(std::move(spec)) {}
  std::size_t entity_index(const std::string& name) const;
  double remaining_success(const ChainTrace& trace, std::size_t steps_so_far,
                           Strength strength) const;

  WorldSpec spec_;
  std::vector<std::string> entities_;
  std::vector<std::string> relation_names_;
  std::unordered_map<std::string, std::size_t> entity_ids_;
  std::vector<std::vector<std::size_t>> tails_;    // [entity][relation]
  std::vector<std::vector<char>> parametric_;      // [entity][relation]
  std::vector<Question> questions_;
  std::unordered_map<std::string, std::size_t> question_ids_;
};

// Step text conventions shared by the simulated backends.
inline constexpr std::string_view kVerifiedMarker = "[verified]";
std::string hop_sub_query(std::string_view relation, std::string_view subject);
std::string hop_thought(std::string_view relation, std::string_view subject,
                        std::string_view object, bool verified);
/// Object entity claimed by a thought ("... is <Object>."), if any.
std::optional<std::string> claimed_object(std::string_view thought);

class SimGenerator final : public Generator {
 public:
  SimGenerator(std::shared_ptr<const World> world, std::uint64_t seed, Strength strength);
  std::string propose(const ReasoningState& state, const SampleRequest& sample,
                      CallInfo& info) override;
  std::string refine(const ReasoningState& state, const ReasoningStep& step,
                     std::string_view explanation, double score, CallInfo& info) override;
  std::string finalize(const ReasoningState& state, CallInfo& info) override;
  const GeneratorRole& role() const override { return role_; }

 private:
  std::shared_ptr<const World> world_;
  std::uint64_t seed_;
  GeneratorRole role_;
};

/// σ(logit(oracle) + b(d) + σ(d)·z), z ~ N(0,1) clipped to ±2.5, keyed on
/// (seed, state, step) so identical content always gets the same score.
class SimRewardModel final : public RewardModel {
 public:
  SimRewardModel(std::shared_ptr<const World> world, std::uint64_t seed);
  double score(const ReasoningState& state, const ReasoningStep& step, CallInfo& info) override;

 private:
  std::shared_ptr<const World> world_;
  std::uint64_t seed_;
};

class SimExplainer final : public Explainer {
 public:
  SimExplainer(std::shared_ptr<const World> world, std::uint64_t seed, PemMode mode);
  std::string explain(const ReasoningState& state, const ReasoningStep& step, double score,
                      CallInfo& info) override;

 private:
  std::shared_ptr<const World> world_;
  std::uint64_t seed_;
  PemMode mode_;
};

class SimRetriever final : public Retriever {
 public:
  explicit SimRetriever(std::shared_ptr<const World> world);
  std::vector<Document> search(std::string_view query, int k, CallInfo& info) override;

 private:
  std::shared_ptr<const World> world_;
};

/// String-equality judge: reads the Golden/Predicted Answer lines of the
/// prompt and answers True iff they normalize to the same text.
class SimJudge final : public Judge {
 public:
  std::string complete(std::string_view prompt, CallInfo& info) override;
};

/// All roles backed by one world; the PEM mode defaults to the world spec's.
Backends make_backends(std::shared_ptr<const World> world, std::uint64_t seed,
                       Strength strength = Strength::kWeak,
                       std::optional<PemMode> pem_mode = std::nullopt);

}  // namespace steprag::sim
