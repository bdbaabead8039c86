#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "steprag/gateway.hpp"
#include "steprag/sim_world.hpp"
#include "steprag/types.hpp"

namespace testing {

inline std::string random_text(std::mt19937_64& rng, std::size_t max_len = 24) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz ABC,.:'\"\\/\t-0123456789";
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) s += alphabet[pick(rng)];
  if (s.find_first_not_of(" \t") == std::string::npos) s = "x" + s;
  return s;
}

inline steprag::ReasoningStep random_step(std::mt19937_64& rng, bool terminal = false) {
  if (terminal) return steprag::ReasoningStep::terminal(random_text(rng));
  steprag::ReasoningStep step;
  step.sub_query = random_text(rng);
  step.retrieve = rng() % 2 == 0;
  if (step.retrieve) step.document = random_text(rng, 60);
  step.thought = random_text(rng);
  return step;
}

inline steprag::ReasoningState random_state(std::mt19937_64& rng, std::size_t max_steps = 5) {
  steprag::ReasoningState state{random_text(rng, 40), {}};
  const std::size_t n = rng() % (max_steps + 1);
  for (std::size_t i = 0; i < n; ++i) {
    state.steps.push_back(random_step(rng, i + 1 == n && rng() % 3 == 0));
  }
  return state;
}

inline steprag::ReasoningStep hop_step(const steprag::sim::World& world,
                                       const steprag::sim::Question& q, std::size_t hop,
                                       const std::string& subject, const std::string& object) {
  const std::string& rel = world.relation_names()[static_cast<std::size_t>(q.relations[hop])];
  steprag::ReasoningStep step;
  step.sub_query = steprag::sim::hop_sub_query(rel, subject);
  step.retrieve = true;
  step.document = "The " + rel + " of " + subject + " is " + object + ".";
  step.thought = steprag::sim::hop_thought(rel, subject, object, false);
  return step;
}

/// The gold chain of a question as steps, terminal included.
inline std::vector<steprag::ReasoningStep> gold_steps(const steprag::sim::World& world,
                                                      const steprag::sim::Question& q) {
  std::vector<steprag::ReasoningStep> steps;
  for (std::size_t h = 0; h < q.relations.size(); ++h) {
    steps.push_back(hop_step(world, q, h, q.chain[h], q.chain[h + 1]));
  }
  steps.push_back(steprag::ReasoningStep::terminal(q.gold));
  return steps;
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() /
           ("steprag-" + name + "-" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing
