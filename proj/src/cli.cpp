#include "steprag/cli.hpp"

#include <chrono>
#include <ctime>
#include <iostream>
#include <memory>
#include <mutex>

#include <CLI11.hpp>

#include "steprag/config.hpp"
#include "steprag/engine.hpp"
#include "steprag/eval.hpp"
#include "steprag/gateway.hpp"
#include "steprag/hashing.hpp"
#include "steprag/http_backend.hpp"
#include "steprag/pem.hpp"
#include "steprag/post_training.hpp"
#include "steprag/serialization.hpp"
#include "steprag/sim_world.hpp"
#include "steprag/supervision.hpp"
#include "steprag/text.hpp"

namespace steprag {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const Error& error) noexcept {
  switch (error.root_kind()) {
    case ErrorKind::kConfigError:
    case ErrorKind::kSpecInfeasible:
      return exit_code::kConfig;
    case ErrorKind::kBackendUnavailable:
    case ErrorKind::kAuthError:
    case ErrorKind::kScoreOutOfRange:
    case ErrorKind::kParseFailure:
    case ErrorKind::kNoCandidates:
    case ErrorKind::kJudgeUnparseable:
      return exit_code::kBackend;
    case ErrorKind::kMalformedLine:
    case ErrorKind::kInvariantViolation:
    case ErrorKind::kIoError:
    case ErrorKind::kUnknownEntity:
      return exit_code::kData;
    default:
      return exit_code::kOther;
  }
}

void to_json(json& j, const RunManifest& m) {
  j = json{{"subcommand", m.subcommand},
           {"config_path", m.config_path},
           {"config_fingerprint", m.config_fingerprint},
           {"effective_config_fingerprint", m.effective_config_fingerprint},
           {"seed", m.seed},
           {"backend", m.backend},
           {"inputs", m.inputs},
           {"outputs", m.outputs},
           {"started_at", m.started_at},
           {"wall_clock_seconds", m.wall_clock_seconds},
           {"calls", m.calls},
           {"exit_code", m.exit_code},
           {"error", m.error ? json(*m.error) : json(nullptr)}};
}

void from_json(const json& j, RunManifest& m) {
  j.at("subcommand").get_to(m.subcommand);
  j.at("config_path").get_to(m.config_path);
  j.at("config_fingerprint").get_to(m.config_fingerprint);
  j.at("effective_config_fingerprint").get_to(m.effective_config_fingerprint);
  j.at("seed").get_to(m.seed);
  j.at("backend").get_to(m.backend);
  j.at("inputs").get_to(m.inputs);
  j.at("outputs").get_to(m.outputs);
  j.at("started_at").get_to(m.started_at);
  j.at("wall_clock_seconds").get_to(m.wall_clock_seconds);
  j.at("calls").get_to(m.calls);
  j.at("exit_code").get_to(m.exit_code);
  const auto& e = j.at("error");
  m.error = e.is_null() ? std::nullopt : std::optional<std::string>(e.get<std::string>());
}

namespace {

struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_concurrency;
  std::string out = ".";
  std::string backend;
  std::string world;
  std::vector<std::string> overrides;  // key=value

  std::string question;
  std::string questions;
  std::string dataset;
  bool judge = false;
  std::string trainer;
  std::optional<int> iterations;
};

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Everything a subcommand needs, built once from config and flags.
class Session {
 public:
  Session(const Flags& flags, RunManifest& manifest, std::ostream& out)
      : flags_(flags), manifest_(manifest), out_(out), log_(std::make_shared<CallLog>()) {
    std::string config_bytes;
    if (!flags.config_path.empty()) {
      try {
        config_bytes = read_file(flags.config_path);
      } catch (const Error&) {
        throw Error(ErrorKind::kConfigError, "cannot read config " + flags.config_path);
      }
      manifest.config_path = flags.config_path;
      manifest.inputs["config"] = flags.config_path;
    }
    manifest.config_fingerprint = hex(fnv1a(config_bytes));
    for (const auto& [key, value] : parse_key_values(config_bytes)) config_.set(key, value);
    for (const auto& kv : flags.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorKind::kConfigError, "--set expects key=value, got '" + kv + "'");
      }
      config_.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (flags.seed) config_.seed = *flags.seed;
    if (flags.max_concurrency) config_.max_concurrency = *flags.max_concurrency;
    if (!flags.backend.empty()) config_.backend = flags.backend;
    if (!flags.world.empty()) config_.world = flags.world;
    config_.validate();
    manifest.effective_config_fingerprint = hex(fnv1a(config_.to_text()));
    manifest.seed = config_.seed;
    manifest.backend = config_.backend;
    out_dir_ = flags.out;
    fs::create_directories(out_dir_);
  }

  const EngineConfig& config() const { return config_; }
  const fs::path& out_dir() const { return out_dir_; }
  std::ostream& out() { return out_; }
  const CallLog& log() const { return *log_; }
  bool sim() const { return config_.backend == "sim"; }

  std::shared_ptr<const sim::World> world() {
    if (!world_) {
      sim::WorldSpec spec;
      if (!config_.world.empty()) {
        spec = sim::load_world_spec(config_.world);
        manifest_.inputs["world"] = config_.world;
      }
      world_ = sim::World::generate(spec);
    }
    return world_;
  }

  Gateway gateway(Strength strength, const std::string& generator_model = "") {
    Backends backends = sim() ? sim::make_backends(world(), config_.seed, strength)
                              : make_http_backends(config_, strength, generator_model);
    return Gateway(std::move(backends), config_.top_k_iterative, log_);
  }

  ReasoningEngine engine(Strength strength) {
    return ReasoningEngine(gateway(strength), SearchOptions::from_config(config_));
  }

  /// --questions file, or the simulated world's own questions.
  std::vector<BenchmarkItem> questions() {
    if (!flags_.questions.empty()) {
      manifest_.inputs["questions"] = flags_.questions;
      return load_benchmark(flags_.questions);
    }
    if (!sim()) throw Error(ErrorKind::kConfigError, "--questions is required with the http backend");
    std::vector<BenchmarkItem> items;
    for (const auto& q : world()->questions()) items.push_back({q.id, q.text, {q.gold}});
    return items;
  }

  fs::path output(const std::string& name) {
    const fs::path p = out_dir_ / name;
    manifest_.outputs.push_back(p.string());
    return p;
  }

 private:
  const Flags& flags_;
  RunManifest& manifest_;
  std::ostream& out_;
  EngineConfig config_;
  fs::path out_dir_;
  std::shared_ptr<CallLog> log_;
  std::shared_ptr<const sim::World> world_;
};

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

int cmd_reason(Session& s, const Flags& flags) {
  if (flags.question.empty()) throw Error(ErrorKind::kConfigError, "--question is required");
  const ReasoningEngine engine = s.engine(Strength::kWeak);
  ChainResult chain;
  try {
    chain = engine.run_chain(flags.question);
  } catch (const ChainAborted& e) {
    s.out() << render_transcript(e.partial()) << "aborted: " << e.what() << '\n';
    throw;
  }
  s.out() << render_transcript({chain.record.question, chain.record.steps})
          << "Answer: " << chain.record.answer << '\n';
  write_decision_trace(s.output("trace.jsonl"), chain.decisions);
  json j = chain.record;
  j["forced_finalization"] = chain.forced_finalization;
  write_json(s.output("chain.json"), j);
  return exit_code::kOk;
}

int cmd_collect_prm(Session& s) {
  const auto questions = s.questions();
  const auto& c = s.config();
  const PlainPolicy weak(s.gateway(Strength::kWeak), c.T, "weak");
  const PlainPolicy strong(s.gateway(Strength::kStrong), c.T, "strong");
  const PrmCollection prm =
      build_prm_dataset(questions, weak, strong, {c.N, c.example_cap, c.max_concurrency});
  write_jsonl_file(s.output("prm.jsonl"), prm.examples);
  write_json(s.output("prm-report.json"), prm.report);
  s.out() << prm.examples.size() << " PRM examples, positive fraction "
          << prm.report.positive_fraction() << ", " << prm.report.failed << " failed\n";
  return exit_code::kOk;
}

int cmd_collect_pem(Session& s) {
  const auto questions = s.questions();
  const auto& c = s.config();
  const PemCollection pem = collect_pem_dataset(
      s.gateway(Strength::kWeak), questions,
      {c.T, c.pem_pairs_per_question, c.seed, c.max_concurrency});
  write_jsonl_file(s.output("pem.jsonl"), pem.examples);
  write_json(s.output("kto-batch.json"),
             kto_batch_json(pem.examples, c.lambda0, c.kto_beta, c.lambda_d));
  write_json(s.output("pem-report.json"), pem.report);
  s.out() << pem.examples.size() << " preference records, " << pem.report.ties << " ties, "
          << pem.report.failed << " failed\n";
  return exit_code::kOk;
}

int cmd_warmup(Session& s) {
  const auto questions = s.questions();
  const WarmupCollection warmup =
      build_warmup_dataset(questions, s.engine(Strength::kStrong), s.config().max_concurrency);
  write_jsonl_file(s.output("warmup.jsonl"), warmup.examples);
  write_json(s.output("warmup-report.json"), warmup.report);
  s.out() << warmup.report.kept << " of " << warmup.report.questions << " chains kept\n";
  return exit_code::kOk;
}

int cmd_iterate(Session& s, const Flags& flags) {
  const auto& c = s.config();
  IterationContext ctx;
  ctx.questions = s.questions();
  ctx.questions_per_iteration = c.questions_per_iteration;
  ctx.out_dir = s.out_dir();
  ctx.warmup_tag = c.warmup_tag;
  ctx.I = flags.iterations.value_or(c.I);
  if (ctx.I < 1) throw Error(ErrorKind::kConfigError, "iterations must be >= 1");
  ctx.collection = {c.N, c.example_cap, c.max_concurrency};
  const std::string trainer = flags.trainer.empty() ? c.trainer_command : flags.trainer;
  ctx.trainer = trainer.empty() ? TrainerHook::noop() : TrainerHook::command(trainer);

  std::map<std::string, std::shared_ptr<RefiningPolicy>> policies;
  ctx.policy_for_tag = [&](const std::string& tag) {
    auto& slot = policies[tag];
    if (!slot) {
      Gateway g = s.gateway(Strength::kWeak, s.sim() ? "" : policy_model_for_tag(c, tag));
      slot = std::make_shared<RefiningPolicy>(std::move(g), c.T, c.tau, tag);
    }
    return slot;
  };
  for (int i = 0; i < ctx.I; ++i) {
    const IterationReport r = run_iteration(i, ctx);
    s.output(r.dataset);
    s.output("iteration-report-" + std::to_string(i) + ".json");
    s.out() << "iteration " << i << ": " << r.examples << " examples, desirable "
            << r.desirable_ratio << ", " << r.base_tag << " -> " << r.trainer_tag << '\n';
  }
  return exit_code::kOk;
}

int cmd_eval(Session& s, const Flags& flags) {
  const auto items = s.questions();
  EvalOptions options;
  options.dataset = !flags.dataset.empty()           ? flags.dataset
                    : !flags.questions.empty()       ? fs::path(flags.questions).stem().string()
                                                     : std::string("sim-world");
  options.config_fingerprint = hex(fnv1a(s.config().to_text()));
  options.judge = flags.judge;
  options.max_concurrency = s.config().max_concurrency;
  const EvalRun run = evaluate(s.engine(Strength::kWeak), items, options);
  write_json(s.output("report.json"), run.report);
  const std::string table = run.report.to_table();
  write_file_atomic(s.output("report.txt"), table);
  std::ostringstream traces;
  for (std::size_t i = 0; i < items.size(); ++i) {
    traces << json{{"id", items[i].id}, {"decisions", run.chains[i].decisions}}.dump() << '\n';
  }
  write_file_atomic(s.output("traces.jsonl"), traces.str());
  s.out() << table;
  return exit_code::kOk;
}

int cmd_simulate(Session& s) {
  const auto world = s.world();
  write_file_atomic(s.output("world.txt"), world->spec().to_text());
  std::vector<BenchmarkItem> items;
  for (const auto& q : world->questions()) items.push_back({q.id, q.text, {q.gold}});
  std::ostringstream out;
  for (const auto& item : items) out << json(item).dump() << '\n';
  write_file_atomic(s.output("questions.jsonl"), out.str());
  s.out() << items.size() << " questions over " << world->entities().size() << " entities\n";
  return exit_code::kOk;
}

void write_manifest(const fs::path& dir, const RunManifest& manifest, std::ostream& err) {
  try {
    fs::create_directories(dir);
    write_json(dir / kManifestName, manifest);
  } catch (const std::exception& e) {
    err << "error: cannot write manifest: " << e.what() << '\n';
  }
}

}  // namespace

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const auto started = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.started_at = utc_now();
  Flags flags;

  CLI::App app{"Retrieval-augmented multi-step reasoning with process rewards", "steprag"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", flags.config_path, "key = value config file");
  app.add_option("--seed", flags.seed, "seed for every random stream");
  app.add_option("--max-concurrency", flags.max_concurrency, "parallel tasks")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", flags.out, "output directory")->capture_default_str();
  app.add_option("--backend", flags.backend, "model backends")->check(CLI::IsMember({"sim", "http"}));
  app.add_option("--world", flags.world, "world spec for the sim backend");
  app.add_option("--set", flags.overrides, "override a config key (key=value)");

  auto* reason = app.add_subcommand("reason", "answer one question and print the chain");
  reason->add_option("--question", flags.question, "question text")->required();
  auto add_questions = [&](CLI::App* sub) {
    sub->add_option("--questions,--benchmark", flags.questions,
                    "JSONL {id, question, golden_answers}; sim default: the world's questions");
  };
  add_questions(app.add_subcommand("collect-prm", "build the process-reward dataset"));
  add_questions(app.add_subcommand("collect-pem", "build PEM preference records and a KTO batch"));
  add_questions(app.add_subcommand("warmup", "collect warm-up chains from the strong policy"));
  auto* iterate = app.add_subcommand("iterate", "offline RL iterations over step preferences");
  add_questions(iterate);
  iterate->add_option("--trainer", flags.trainer, "command called as CMD --dataset P --base-tag A --out-tag B");
  iterate->add_option("--iterations", flags.iterations, "overrides I");
  auto* eval = app.add_subcommand("eval", "run a benchmark and report ACC_R / ACC_L");
  add_questions(eval);
  eval->add_option("--dataset", flags.dataset, "dataset name in the report");
  eval->add_flag("--judge", flags.judge, "also compute ACC_L with the judge");
  app.add_subcommand("simulate", "write a world spec and its questions");

  auto finish = [&](int code, std::optional<std::string> error) {
    manifest.exit_code = code;
    manifest.error = std::move(error);
    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_manifest(flags.out, manifest, err);
    return code;
  };

  try {
    std::vector<std::string> args(argv.rbegin(), argv.rend());
    if (!args.empty()) args.pop_back();  // program name
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_code::kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return finish(exit_code::kUsage, std::string(e.what()));
  }

  const CLI::App* sub = app.get_subcommands().front();
  manifest.subcommand = sub->get_name();
  std::unique_ptr<Session> session;
  int code = exit_code::kOther;
  std::optional<std::string> error;
  try {
    session = std::make_unique<Session>(flags, manifest, out);
    Session& s = *session;
    const std::string& name = manifest.subcommand;
    if (name == "reason") code = cmd_reason(s, flags);
    else if (name == "collect-prm") code = cmd_collect_prm(s);
    else if (name == "collect-pem") code = cmd_collect_pem(s);
    else if (name == "warmup") code = cmd_warmup(s);
    else if (name == "iterate") code = cmd_iterate(s, flags);
    else if (name == "eval") code = cmd_eval(s, flags);
    else code = cmd_simulate(s);
  } catch (const Error& e) {
    code = exit_code_for(e);
    error = e.what();
  } catch (const std::exception& e) {
    code = exit_code::kOther;
    error = e.what();
  }
  if (error) err << "error: " << *error << '\n';
  if (session) {
    for (Role role : {Role::kGenerator, Role::kPrm, Role::kPem, Role::kJudge, Role::kRetriever}) {
      manifest.calls[std::string(to_string(role))] = session->log().count(role);
    }
  }
  return finish(code, std::move(error));
}

int run_command(int argc, const char* const* argv) {
  return run_command(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace steprag
