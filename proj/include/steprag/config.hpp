#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace steprag {

/// Every tunable of the search, collection and training pipelines plus the
/// backend wiring. Field names double as keys of the `key = value` config
/// file. Defaults reproduce the published settings.
struct EngineConfig {
  // Search.
  int M = 3;                 // candidates per step
  int T = 5;                 // max reasoning steps
  double tau = 0.5;          // refinement gate
  double alpha = 0.5;        // TD step size
  double beta = 0.05;        // lookahead stop threshold
  int H = 3;                 // lookahead step limit
  int shallow_cutoff = 3;    // steps 1..shallow_cutoff get lookahead
  int refine_retries = 1;
  int top_k_iterative = 1;
  int top_k_single = 3;

  // Collection and training.
  int N = 5;                 // rollouts per MC estimate
  int example_cap = 32;      // PRM examples per question
  double lambda0 = 1.0;
  double lambda_d = 1.0;
  double kto_beta = 0.1;
  int I = 3;                 // offline-RL iterations
  int pem_pairs_per_question = 1;
  int questions_per_iteration = 0;  // 0 = all
  std::string warmup_tag = "warmup";
  std::string trainer_command;

  // Runtime.
  int max_concurrency = 1;
  std::uint64_t seed = 0;

  // Backends.
  std::string backend = "sim";  // sim | http
  std::string world;            // WorldSpec path for the sim backend
  std::string prompt_dir;       // empty = bundled templates
  std::string prompt_version = "v1";
  std::string generator_endpoint;
  std::string generator_model;
  double generator_temperature = 0.7;
  std::string strong_generator_endpoint;
  std::string strong_generator_model;
  std::string policy_model_template;  // "{tag}" is replaced by the checkpoint tag
  std::string prm_endpoint;
  std::string pem_endpoint;
  std::string pem_model;
  std::string judge_endpoint;
  std::string judge_model;
  std::string retriever_endpoint;
  std::string api_key_env = "OPENAI_API_KEY";
  int max_retries = 3;
  int timeout_ms = 60000;
  int backoff_initial_ms = 500;
  double backoff_factor = 2.0;

  /// Throws ConfigError when an invariant is broken.
  void validate() const;

  /// Sets one field from its textual form; unknown keys and unparsable
  /// values raise ConfigError.
  void set(std::string_view key, std::string_view value);

  /// Canonical `key = value` rendering of every field.
  std::string to_text() const;
};

EngineConfig parse_config(std::string_view text);
EngineConfig load_config(const std::filesystem::path& path);

}  // namespace steprag
