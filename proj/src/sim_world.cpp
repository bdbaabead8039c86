#include "steprag/sim_world.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "steprag/error.hpp"
#include "steprag/hashing.hpp"
#include "steprag/serialization.hpp"
#include "steprag/text.hpp"

namespace steprag::sim {

namespace {

constexpr std::array<std::string_view, 12> kRelationPool{
    "mother", "father",  "spouse",  "mentor",  "employer", "rival",
    "neighbor", "founder", "teacher", "partner", "sibling", "patron"};

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::kSpecInfeasible, what);
}

std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, values[i]);
    out.append(buf, res.ptr);
  }
  return out;
}

std::vector<double> parse_list(std::string_view key, std::string_view value) {
  std::vector<double> out;
  for (const auto& part : split(value, ',')) out.push_back(parse_double(key, part));
  return out;
}

std::string score_text(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", score);
  return buf;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string strength_tag(Strength s) { return s == Strength::kStrong ? "strong" : "weak"; }

std::string hop_text(std::string_view relation, std::string_view subject, bool retrieve,
                     std::string_view object, bool verified) {
  return "Sub-Query: " + hop_sub_query(relation, subject) + "\nRetrieve: " +
         (retrieve ? "Yes" : "No") + "\nThought: " +
         hop_thought(relation, subject, object, verified);
}

struct Hint {
  std::optional<std::string> entity;
  bool plan = false;
};

Hint parse_hint(std::string_view explanation) {
  Hint hint;
  for (const auto& line : split(explanation, '\n')) {
    if (line.rfind("Hint:", 0) == 0) hint.entity = trim(std::string_view(line).substr(5));
    if (line == "Plan: verified") hint.plan = true;
  }
  return hint;
}

}  // namespace

std::string_view to_string(PemMode mode) {
  switch (mode) {
    case PemMode::kHelpful: return "helpful";
    case PemMode::kAdversarial: return "adversarial";
    case PemMode::kNeutral: return "neutral";
  }
  return "helpful";
}

PemMode parse_pem_mode(std::string_view text) {
  if (text == "helpful") return PemMode::kHelpful;
  if (text == "adversarial") return PemMode::kAdversarial;
  if (text == "neutral") return PemMode::kNeutral;
  throw Error(ErrorKind::kConfigError, "unknown pem_mode '" + std::string(text) + "'");
}

double WorldSpec::at_depth(const std::vector<double>& values, std::size_t depth) {
  if (values.empty()) return 0.0;
  const std::size_t i = depth == 0 ? 0 : depth - 1;
  return values[std::min(i, values.size() - 1)];
}

void WorldSpec::validate() const {
  require(entities >= 3, "need at least 3 entities");
  require(relations >= 1, "need at least 1 relation");
  require(questions >= 0, "question count must be non-negative");
  require(!hop_weights.empty(), "hop_weights must not be empty");
  require(hop_weights.size() <= 8, "hop lengths above 8 are not supported");
  double total = 0.0;
  for (double w : hop_weights) {
    require(w >= 0.0, "hop weights must be non-negative");
    total += w;
  }
  require(total > 0.0, "hop weights must not all be zero");
  for (const auto* list : {&correctness, &strong_correctness}) {
    require(!list->empty(), "correctness lists must not be empty");
    for (double p : *list) require(p >= 0.0 && p <= 1.0, "correctness must lie in [0,1]");
  }
  require(!prm_bias.empty() && !prm_noise.empty(), "prm_bias/prm_noise must not be empty");
  for (double b : prm_bias) require(std::abs(b) <= 20.0, "|prm_bias| must be <= 20");
  for (double s : prm_noise) require(s >= 0.0 && s <= 4.0, "prm_noise must lie in [0,4]");
  require(parametric_fraction >= 0.0 && parametric_fraction <= 1.0,
          "parametric_fraction must lie in [0,1]");
  require(score_floor > 0.0 && score_floor < 0.5, "score_floor must lie in (0,0.5)");
}

std::string WorldSpec::to_text() const {
  std::ostringstream out;
  out << "seed = " << seed << '\n'
      << "entities = " << entities << '\n'
      << "relations = " << relations << '\n'
      << "questions = " << questions << '\n'
      << "hop_weights = " << format_list(hop_weights) << '\n'
      << "correctness = " << format_list(correctness) << '\n'
      << "strong_correctness = " << format_list(strong_correctness) << '\n'
      << "prm_bias = " << format_list(prm_bias) << '\n'
      << "prm_noise = " << format_list(prm_noise) << '\n'
      << "pem_mode = " << to_string(pem_mode) << '\n'
      << "parametric_fraction = " << format_list({parametric_fraction}) << '\n'
      << "score_floor = " << format_list({score_floor}) << '\n'
      << "never_terminate = " << (never_terminate ? "true" : "false") << '\n';
  return out.str();
}

WorldSpec parse_world_spec(std::string_view text) {
  WorldSpec spec;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (key == "seed") {
      spec.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "entities") {
      spec.entities = static_cast<int>(parse_int(key, value));
    } else if (key == "relations") {
      spec.relations = static_cast<int>(parse_int(key, value));
    } else if (key == "questions") {
      spec.questions = static_cast<int>(parse_int(key, value));
    } else if (key == "hop_weights") {
      spec.hop_weights = parse_list(key, value);
    } else if (key == "correctness") {
      spec.correctness = parse_list(key, value);
    } else if (key == "strong_correctness") {
      spec.strong_correctness = parse_list(key, value);
    } else if (key == "prm_bias") {
      spec.prm_bias = parse_list(key, value);
    } else if (key == "prm_noise") {
      spec.prm_noise = parse_list(key, value);
    } else if (key == "pem_mode") {
      spec.pem_mode = parse_pem_mode(value);
    } else if (key == "parametric_fraction") {
      spec.parametric_fraction = parse_double(key, value);
    } else if (key == "score_floor") {
      spec.score_floor = parse_double(key, value);
    } else if (key == "never_terminate") {
      spec.never_terminate = parse_bool(key, value);
    } else {
      throw Error(ErrorKind::kConfigError, "unknown world key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

WorldSpec load_world_spec(const std::filesystem::path& path) {
  return parse_world_spec(read_file(path));
}

std::string hop_sub_query(std::string_view relation, std::string_view subject) {
  return std::string(relation) + " of " + std::string(subject);
}

std::string hop_thought(std::string_view relation, std::string_view subject,
                        std::string_view object, bool verified) {
  std::string text = "The " + std::string(relation) + " of " + std::string(subject) + " is " +
                     std::string(object) + ".";
  if (verified) text += " " + std::string(kVerifiedMarker);
  return text;
}

std::optional<std::string> claimed_object(std::string_view thought) {
  const auto pos = thought.rfind(" is ");
  if (pos == std::string_view::npos) return std::nullopt;
  std::string_view rest = thought.substr(pos + 4);
  const auto dot = rest.find('.');
  if (dot != std::string_view::npos) rest = rest.substr(0, dot);
  std::string object = trim(rest);
  if (object.empty()) return std::nullopt;
  return object;
}

// ---------------------------------------------------------------------------
// World

std::shared_ptr<const World> World::generate(const WorldSpec& spec) {
  spec.validate();
  auto world = std::shared_ptr<World>(new World(spec));
  SeededStream rng(fingerprint(spec.seed, {"world"}));

  static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  const auto n = static_cast<std::size_t>(spec.entities);
  require(n <= 50000, "too many entities");
  while (world->entities_.size() < n) {
    std::string name;
    for (int s = 0; s < 3; ++s) {
      name += kConsonants[rng.index(kConsonants.size())];
      name += kVowels[rng.index(kVowels.size())];
    }
    name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    if (world->entity_ids_.emplace(name, world->entities_.size()).second) {
      world->entities_.push_back(name);
    }
  }

  for (int r = 0; r < spec.relations; ++r) {
    world->relation_names_.push_back(r < static_cast<int>(kRelationPool.size())
                                         ? std::string(kRelationPool[static_cast<std::size_t>(r)])
                                         : "relation" + std::to_string(r + 1));
  }

  const auto rels = static_cast<std::size_t>(spec.relations);
  world->tails_.assign(n, std::vector<std::size_t>(rels));
  world->parametric_.assign(n, std::vector<char>(rels));
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t r = 0; r < rels; ++r) {
      std::size_t t = rng.index(n - 1);
      if (t >= e) ++t;  // no self loops
      world->tails_[e][r] = t;
      world->parametric_[e][r] = rng.uniform() < spec.parametric_fraction ? 1 : 0;
    }
  }

  const double total_weight =
      std::accumulate(spec.hop_weights.begin(), spec.hop_weights.end(), 0.0);
  std::unordered_set<std::string> seen;
  const std::size_t max_attempts = 1000 * static_cast<std::size_t>(spec.questions) + 1000;
  std::size_t attempts = 0;
  while (world->questions_.size() < static_cast<std::size_t>(spec.questions)) {
    require(++attempts <= max_attempts, "cannot generate enough distinct answerable questions");
    double u = rng.uniform() * total_weight;
    std::size_t hops = 1;
    for (std::size_t i = 0; i < spec.hop_weights.size(); ++i) {
      if (u < spec.hop_weights[i]) {
        hops = i + 1;
        break;
      }
      u -= spec.hop_weights[i];
      hops = i + 1;
    }
    Question q;
    std::size_t current = rng.index(n);
    q.chain.push_back(world->entities_[current]);
    for (std::size_t h = 0; h < hops; ++h) {
      const auto r = rng.index(rels);
      q.relations.push_back(static_cast<int>(r));
      current = world->tails_[current][r];
      q.chain.push_back(world->entities_[current]);
    }
    q.gold = q.chain.back();
    std::string text = "Who is the ";
    for (std::size_t h = hops; h-- > 0;) {
      text += world->relation_names_[static_cast<std::size_t>(q.relations[h])];
      text += h > 0 ? " of the " : " of ";
    }
    q.text = text + q.chain.front() + "?";
    if (!seen.insert(q.text).second) continue;
    bool every_hop_has_decoy = true;
    for (std::size_t h = 0; h < hops && every_hop_has_decoy; ++h) {
      every_hop_has_decoy = !world->decoys(q, h, q.chain[h + 1]).empty();
    }
    if (!every_hop_has_decoy) continue;
    char id[32];
    std::snprintf(id, sizeof id, "sim-%04zu", world->questions_.size() + 1);
    q.id = id;
    world->question_ids_.emplace(q.text, world->questions_.size());
    world->questions_.push_back(std::move(q));
  }
  return world;
}

const Question* World::find_question(std::string_view text) const {
  const auto it = question_ids_.find(std::string(text));
  return it == question_ids_.end() ? nullptr : &questions_[it->second];
}

std::size_t World::entity_index(const std::string& name) const {
  const auto it = entity_ids_.find(name);
  if (it == entity_ids_.end()) throw Error(ErrorKind::kUnknownEntity, "unknown entity '" + name + "'");
  return it->second;
}

const std::string& World::tail(const std::string& head, int relation) const {
  return entities_[tails_[entity_index(head)][static_cast<std::size_t>(relation)]];
}

bool World::is_parametric(const std::string& head, int relation) const {
  return parametric_[entity_index(head)][static_cast<std::size_t>(relation)] != 0;
}

std::string World::fact_text(const std::string& head, int relation) const {
  return "The " + relation_names_[static_cast<std::size_t>(relation)] + " of " + head + " is " +
         tail(head, relation) + ".";
}

std::optional<std::string> World::lookup(std::string_view sub_query) const {
  const auto pos = sub_query.find(" of ");
  if (pos == std::string_view::npos) return std::nullopt;
  const std::string relation(sub_query.substr(0, pos));
  const std::string subject(sub_query.substr(pos + 4));
  const auto rel = std::find(relation_names_.begin(), relation_names_.end(), relation);
  if (rel == relation_names_.end() || !entity_ids_.count(subject)) return std::nullopt;
  return fact_text(subject, static_cast<int>(rel - relation_names_.begin()));
}

std::string World::follow(std::string entity, const Question& question,
                          std::size_t from_hop) const {
  for (std::size_t h = from_hop; h < question.relations.size(); ++h) {
    entity = tail(entity, question.relations[h]);
  }
  return entity;
}

std::vector<std::size_t> World::decoys(const Question& question, std::size_t hop,
                                       const std::string& exclude) const {
  std::vector<std::size_t> out;
  for (std::size_t e = 0; e < entities_.size(); ++e) {
    if (entities_[e] == exclude) continue;
    if (follow(entities_[e], question, hop + 1) == question.gold) continue;
    out.push_back(e);
  }
  return out;
}

ChainTrace World::trace(const std::string& question, const std::vector<ReasoningStep>& steps) const {
  ChainTrace t;
  t.question = find_question(question);
  if (!t.question) throw Error(ErrorKind::kUnknownEntity, "question not in world: " + question);
  const Question& q = *t.question;
  t.current = q.chain.front();
  auto mark_error = [&](std::size_t index) {
    if (t.intact) {
      t.intact = false;
      t.first_error = index;
    }
  };
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const ReasoningStep& step = steps[i];
    if (step.is_terminal) {
      t.terminal = true;
      t.answer_correct = t.intact && t.hops_done == q.relations.size() &&
                         normalize_answer(step.thought) == normalize_answer(q.gold);
      if (!t.answer_correct) mark_error(i + 1);
      break;
    }
    const auto object = claimed_object(step.thought);
    if (object && !entity_ids_.count(*object)) {
      throw Error(ErrorKind::kUnknownEntity, "unknown entity '" + *object + "'");
    }
    if (t.hops_done < q.relations.size()) {
      const auto& relation = relation_names_[static_cast<std::size_t>(q.relations[t.hops_done])];
      const bool on_gold = object && *object == q.chain[t.hops_done + 1] &&
                           step.sub_query == hop_sub_query(relation, q.chain[t.hops_done]);
      if (!on_gold) mark_error(i + 1);
      if (object) t.current = *object;
      ++t.hops_done;
      if (t.intact && step.thought.find(kVerifiedMarker) != std::string::npos) t.verified = true;
    } else if (!object || *object != t.current) {
      mark_error(i + 1);
    }
  }
  return t;
}

double World::correctness(std::size_t depth, Strength strength) const {
  return WorldSpec::at_depth(strength == Strength::kStrong ? spec_.strong_correctness
                                                           : spec_.correctness,
                             depth);
}

double World::remaining_success(const ChainTrace& t, std::size_t steps_so_far,
                                Strength strength) const {
  const Question& q = *t.question;
  double probability = 1.0;
  std::size_t depth = steps_so_far;
  for (std::size_t h = t.hops_done; h < q.relations.size(); ++h) {
    ++depth;
    if (t.verified || is_parametric(q.chain[h], q.relations[h])) continue;
    probability *= correctness(depth, strength);
  }
  return probability;
}

double World::success_probability(const ReasoningState& state, const ReasoningStep& step,
                                  Strength strength) const {
  auto steps = state.steps;
  steps.push_back(step);
  const ChainTrace t = trace(state.question, steps);
  if (t.terminal) return t.answer_correct ? 1.0 : 0.0;
  if (!t.intact) return 0.0;
  return remaining_success(t, steps.size(), strength);
}

double World::oracle_step_value(const ReasoningState& state, const ReasoningStep& step,
                                Strength strength) const {
  const double f = spec_.score_floor;
  return f + (1.0 - 2.0 * f) * success_probability(state, step, strength);
}

// ---------------------------------------------------------------------------
// Simulated backends

SimGenerator::SimGenerator(std::shared_ptr<const World> world, std::uint64_t seed,
                           Strength strength)
    : world_(std::move(world)), seed_(seed) {
  role_.endpoint = "sim";
  role_.model = "sim-" + strength_tag(strength);
  role_.temperature = 1.0;
  role_.strength = strength;
}

std::string SimGenerator::propose(const ReasoningState& state, const SampleRequest& sample,
                                  CallInfo&) {
  const ChainTrace t = world_->trace(state.question, state.steps);
  const Question& q = *t.question;
  if (t.terminal || t.hops_done >= q.relations.size()) {
    if (world_->spec().never_terminate && !t.terminal) {
      return "Sub-Query: confirm answer\nRetrieve: No\nThought: The answer is " + t.current + ".";
    }
    return "Final Answer: " + t.current;
  }
  const int relation = q.relations[t.hops_done];
  const auto& relation_name = world_->relation_names()[static_cast<std::size_t>(relation)];
  const std::string& truth = world_->tail(t.current, relation);
  const bool parametric = world_->is_parametric(t.current, relation);
  const double p = (t.verified || parametric)
                       ? 1.0
                       : world_->correctness(state.step_count() + 1, role_.strength);

  SeededStream rng(fingerprint(
      seed_, {"propose", strength_tag(role_.strength), sample.stream,
              sample.greedy ? std::string("greedy") : std::to_string(sample.index),
              render_transcript(state)}));
  const bool correct = sample.greedy ? p >= 0.5 : rng.uniform() < p;
  std::string object = truth;
  if (!correct) {
    const auto decoys = world_->decoys(q, t.hops_done, truth);
    if (!decoys.empty()) object = world_->entities()[decoys[rng.index(decoys.size())]];
  }
  return hop_text(relation_name, t.current, !parametric, object, false);
}

std::string SimGenerator::refine(const ReasoningState& state, const ReasoningStep& step,
                                 std::string_view explanation, double, CallInfo& info) {
  const Hint hint = parse_hint(explanation);
  if (!hint.entity) {
    // Feedback without an actionable hint: draw a fresh step.
    return propose(state,
                   {"refine", fnv1a(explanation), false}, info);
  }
  if (step.is_terminal) return "Final Answer: " + *hint.entity;
  const ChainTrace t = world_->trace(state.question, state.steps);
  const Question& q = *t.question;
  if (t.hops_done >= q.relations.size()) {
    return "Sub-Query: " + step.sub_query + "\nRetrieve: No\nThought: The answer is " +
           *hint.entity + ".";
  }
  const int relation = q.relations[t.hops_done];
  const auto& relation_name = world_->relation_names()[static_cast<std::size_t>(relation)];
  return hop_text(relation_name, t.current, !world_->is_parametric(t.current, relation),
                  *hint.entity, hint.plan);
}

std::string SimGenerator::finalize(const ReasoningState& state, CallInfo&) {
  return "Final Answer: " + world_->trace(state.question, state.steps).current;
}

SimRewardModel::SimRewardModel(std::shared_ptr<const World> world, std::uint64_t seed)
    : world_(std::move(world)), seed_(seed) {}

double SimRewardModel::score(const ReasoningState& state, const ReasoningStep& step, CallInfo&) {
  const double oracle = world_->oracle_step_value(state, step);
  const std::size_t depth = state.step_count() + 1;
  const double bias = WorldSpec::at_depth(world_->spec().prm_bias, depth);
  const double sigma = WorldSpec::at_depth(world_->spec().prm_noise, depth);
  SeededStream rng(fingerprint(seed_, {"prm", render_transcript(state), render_step(step)}));
  const double z = std::clamp(rng.normal(), -2.5, 2.5);
  return logistic(std::log(oracle / (1.0 - oracle)) + bias + sigma * z);
}

SimExplainer::SimExplainer(std::shared_ptr<const World> world, std::uint64_t seed, PemMode mode)
    : world_(std::move(world)), seed_(seed), mode_(mode) {}

std::string SimExplainer::explain(const ReasoningState& state, const ReasoningStep& step,
                                  double score, CallInfo&) {
  const ChainTrace prefix = world_->trace(state.question, state.steps);
  auto steps = state.steps;
  steps.push_back(step);
  const ChainTrace full = world_->trace(state.question, steps);
  const Question& q = *prefix.question;
  const std::size_t index = state.step_count() + 1;

  const bool is_hop = !step.is_terminal && prefix.hops_done < q.relations.size();
  std::string expected = prefix.current;
  if (is_hop) expected = world_->tail(prefix.current, q.relations[prefix.hops_done]);
  const std::optional<std::string> claimed =
      step.is_terminal ? std::optional<std::string>(step.thought) : claimed_object(step.thought);
  const bool step_ok = claimed && normalize_answer(*claimed) == normalize_answer(expected);
  const bool at_ceiling = world_->oracle_step_value(state, step) >= world_->ceiling() - 1e-12;

  PemMode mode = mode_;
  SeededStream rng(fingerprint(seed_, {"pem", render_transcript(state), render_step(step)}));
  if (mode == PemMode::kNeutral) {
    mode = rng.uniform() < 0.5 ? PemMode::kHelpful : PemMode::kAdversarial;
  }

  std::string text = "Process reward " + score_text(score) + " for step " + std::to_string(index) + ".";
  if (full.first_error > 0) {
    text += " The first error is at step " + std::to_string(full.first_error) + ".";
  } else {
    text += " No error found up to this step.";
  }

  std::string hint = expected;
  bool plan = false;
  if (mode == PemMode::kHelpful) {
    plan = prefix.intact && !at_ceiling && !step.is_terminal;
  } else if (!step_ok) {
    hint = claimed.value_or(expected);
  } else {
    std::vector<std::size_t> candidates;
    if (is_hop) {
      candidates = world_->decoys(q, prefix.hops_done, expected);
    } else {
      for (std::size_t e = 0; e < world_->entities().size(); ++e) {
        if (world_->entities()[e] != expected && world_->entities()[e] != q.gold) candidates.push_back(e);
      }
    }
    if (!candidates.empty()) hint = world_->entities()[candidates[rng.index(candidates.size())]];
  }

  if (is_hop) {
    const auto& relation = world_->relation_names()[static_cast<std::size_t>(q.relations[prefix.hops_done])];
    text += "\nThe " + relation + " of " + prefix.current + " is " + hint + ".";
  } else {
    text += "\nThe answer should be " + hint + ".";
  }
  text += "\nHint: " + hint;
  if (plan) text += "\nPlan: verified";
  return text;
}

SimRetriever::SimRetriever(std::shared_ptr<const World> world) : world_(std::move(world)) {}

std::vector<Document> SimRetriever::search(std::string_view query, int k, CallInfo&) {
  if (k < 1) return {};
  if (auto fact = world_->lookup(query)) return {Document{*fact, 1.0}};
  return {};
}

std::string SimJudge::complete(std::string_view prompt, CallInfo&) {
  std::optional<std::string> gold, predicted;
  for (const auto& line : split(prompt, '\n')) {
    if (line.rfind("Golden Answer:", 0) == 0) gold = trim(std::string_view(line).substr(14));
    if (line.rfind("Predicted Answer:", 0) == 0) predicted = trim(std::string_view(line).substr(17));
  }
  if (!gold || !predicted) return "Unable to judge: prompt lacks answer slots.";
  return normalize_answer(*gold) == normalize_answer(*predicted) ? "True" : "False";
}

Backends make_backends(std::shared_ptr<const World> world, std::uint64_t seed, Strength strength,
                       std::optional<PemMode> pem_mode) {
  Backends b;
  b.generator = std::make_shared<SimGenerator>(world, seed, strength);
  b.prm = std::make_shared<SimRewardModel>(world, seed);
  b.pem = std::make_shared<SimExplainer>(world, seed, pem_mode.value_or(world->spec().pem_mode));
  b.retriever = std::make_shared<SimRetriever>(world);
  b.judge = std::make_shared<SimJudge>();
  return b;
}

}  // namespace steprag::sim
