#include "steprag/config.hpp"

#include <array>
#include <charconv>
#include <sstream>
#include <variant>

#include "steprag/error.hpp"
#include "steprag/text.hpp"
#include "steprag/serialization.hpp"

namespace steprag {

namespace {

using Field = std::variant<int EngineConfig::*, double EngineConfig::*,
                           std::string EngineConfig::*, std::uint64_t EngineConfig::*>;

struct FieldEntry {
  std::string_view name;
  Field field;
};

const auto& field_table() {
  static const std::array<FieldEntry, 43> table{{
      {"M", &EngineConfig::M},
      {"T", &EngineConfig::T},
      {"tau", &EngineConfig::tau},
      {"alpha", &EngineConfig::alpha},
      {"beta", &EngineConfig::beta},
      {"H", &EngineConfig::H},
      {"shallow_cutoff", &EngineConfig::shallow_cutoff},
      {"refine_retries", &EngineConfig::refine_retries},
      {"top_k_iterative", &EngineConfig::top_k_iterative},
      {"top_k_single", &EngineConfig::top_k_single},
      {"N", &EngineConfig::N},
      {"example_cap", &EngineConfig::example_cap},
      {"lambda0", &EngineConfig::lambda0},
      {"lambda_d", &EngineConfig::lambda_d},
      {"kto_beta", &EngineConfig::kto_beta},
      {"I", &EngineConfig::I},
      {"pem_pairs_per_question", &EngineConfig::pem_pairs_per_question},
      {"questions_per_iteration", &EngineConfig::questions_per_iteration},
      {"warmup_tag", &EngineConfig::warmup_tag},
      {"trainer_command", &EngineConfig::trainer_command},
      {"max_concurrency", &EngineConfig::max_concurrency},
      {"seed", &EngineConfig::seed},
      {"backend", &EngineConfig::backend},
      {"world", &EngineConfig::world},
      {"prompt_dir", &EngineConfig::prompt_dir},
      {"prompt_version", &EngineConfig::prompt_version},
      {"generator_endpoint", &EngineConfig::generator_endpoint},
      {"generator_model", &EngineConfig::generator_model},
      {"generator_temperature", &EngineConfig::generator_temperature},
      {"strong_generator_endpoint", &EngineConfig::strong_generator_endpoint},
      {"strong_generator_model", &EngineConfig::strong_generator_model},
      {"policy_model_template", &EngineConfig::policy_model_template},
      {"prm_endpoint", &EngineConfig::prm_endpoint},
      {"pem_endpoint", &EngineConfig::pem_endpoint},
      {"pem_model", &EngineConfig::pem_model},
      {"judge_endpoint", &EngineConfig::judge_endpoint},
      {"judge_model", &EngineConfig::judge_model},
      {"retriever_endpoint", &EngineConfig::retriever_endpoint},
      {"api_key_env", &EngineConfig::api_key_env},
      {"max_retries", &EngineConfig::max_retries},
      {"timeout_ms", &EngineConfig::timeout_ms},
      {"backoff_initial_ms", &EngineConfig::backoff_initial_ms},
      {"backoff_factor", &EngineConfig::backoff_factor},
  }};
  return table;
}

void check(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::kConfigError, what);
}

}  // namespace

void EngineConfig::validate() const {
  check(M >= 1, "M must be >= 1");
  check(T >= 1, "T must be >= 1");
  check(tau >= 0.0 && tau <= 1.0, "tau must lie in [0,1]");
  check(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0,1]");
  check(beta > 0.0, "beta must be > 0");
  check(H >= 1, "H must be >= 1");
  check(N >= 1, "N must be >= 1");
  check(lambda0 > 0.0, "lambda0 must be > 0");
  check(lambda_d > 0.0, "lambda_d must be > 0");
  check(kto_beta > 0.0, "kto_beta must be > 0");
  check(shallow_cutoff >= 0, "shallow_cutoff must be >= 0");
  check(refine_retries >= 1, "refine_retries must be >= 1");
  check(top_k_iterative >= 1 && top_k_single >= 1, "retrieval depths must be >= 1");
  check(example_cap >= 1, "example_cap must be >= 1");
  check(I >= 0, "I must be >= 0");
  check(max_concurrency >= 1, "max_concurrency must be >= 1");
  check(pem_pairs_per_question >= 1, "pem_pairs_per_question must be >= 1");
  check(questions_per_iteration >= 0, "questions_per_iteration must be >= 0");
  check(backend == "sim" || backend == "http", "backend must be sim or http");
  check(max_retries >= 0 && timeout_ms > 0 && backoff_initial_ms >= 0 && backoff_factor >= 1.0,
        "invalid retry settings");
  check(generator_temperature >= 0.0, "generator_temperature must be >= 0");
}

void EngineConfig::set(std::string_view key, std::string_view value) {
  for (const auto& entry : field_table()) {
    if (entry.name != key) continue;
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(this->*member)>;
          if constexpr (std::is_same_v<T, int>) {
            this->*member = static_cast<int>(parse_int(key, value));
          } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            const auto v = parse_int(key, value);
            check(v >= 0, std::string(key) + " must be non-negative");
            this->*member = static_cast<std::uint64_t>(v);
          } else if constexpr (std::is_same_v<T, double>) {
            this->*member = parse_double(key, value);
          } else {
            this->*member = std::string(value);
          }
        },
        entry.field);
    return;
  }
  throw Error(ErrorKind::kConfigError, "unknown config key '" + std::string(key) + "'");
}

std::string EngineConfig::to_text() const {
  std::ostringstream out;
  for (const auto& entry : field_table()) {
    out << entry.name << " = ";
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(this->*member)>;
          if constexpr (std::is_same_v<T, double>) {
            char buf[32];
            const auto res = std::to_chars(buf, buf + sizeof buf, this->*member);
            out << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
          } else {
            out << this->*member;
          }
        },
        entry.field);
    out << '\n';
  }
  return out.str();
}

EngineConfig parse_config(std::string_view text) {
  EngineConfig config;
  for (const auto& [key, value] : parse_key_values(text)) config.set(key, value);
  config.validate();
  return config;
}

EngineConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error&) {
    throw Error(ErrorKind::kConfigError, "cannot read config " + path.string());
  }
  return parse_config(text);
}

}  // namespace steprag
