#include "steprag/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "steprag/error.hpp"
#include "steprag/parallel.hpp"
#include "steprag/text.hpp"

namespace steprag {

using nlohmann::json;

void to_json(json& j, const BenchmarkItem& item) {
  j = json{{"id", item.id}, {"question", item.question}, {"golden_answers", item.golden_answers}};
}

void from_json(const json& j, BenchmarkItem& item) {
  j.at("id").get_to(item.id);
  j.at("question").get_to(item.question);
  j.at("golden_answers").get_to(item.golden_answers);
}

void validate(const BenchmarkItem& item) {
  if (item.question.empty()) throw Error(ErrorKind::kInvariantViolation, "empty question");
  if (item.golden_answers.empty()) {
    throw Error(ErrorKind::kInvariantViolation, "question " + item.id + " has no golden answers");
  }
}

std::vector<BenchmarkItem> read_benchmark(std::istream& in) {
  std::vector<BenchmarkItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    BenchmarkItem item;
    try {
      json j = json::parse(line);
      // Some dumps carry numeric ids.
      if (j.contains("id") && j["id"].is_number()) j["id"] = j["id"].dump();
      item = j.get<BenchmarkItem>();
    } catch (const json::exception& e) {
      throw MalformedLine(line_no, e.what());
    }
    try {
      validate(item);
    } catch (const Error& e) {
      throw MalformedLine(line_no, e.what());
    }
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<BenchmarkItem> load_benchmark(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + path.string());
  return read_benchmark(in);
}

bool acc_r(std::string_view gold, std::string_view predicted) {
  const std::string g = normalize_answer(gold);
  if (g.empty()) throw Error(ErrorKind::kDomainError, "gold answer is empty after normalization");
  return normalize_answer(predicted).find(g) != std::string::npos;
}

bool acc_r(const std::vector<std::string>& golds, std::string_view predicted) {
  return std::any_of(golds.begin(), golds.end(),
                     [&](const std::string& g) { return acc_r(g, predicted); });
}

std::string render_judge_prompt(std::string_view question, std::string_view gold,
                                std::string_view predicted) {
  std::string out;
  std::string_view rest = kJudgePromptTemplate;
  for (std::string_view slot : {question, gold, predicted}) {
    const auto pos = rest.find("{}");
    out += rest.substr(0, pos);
    out += slot;
    rest = rest.substr(pos + 2);
  }
  out += rest;
  return out;
}

bool parse_judge_reply(std::string_view reply) {
  std::string text = trim(reply);
  std::transform(text.begin(), text.end(), text.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (text.rfind("true", 0) == 0) return true;
  if (text.rfind("false", 0) == 0) return false;
  throw JudgeUnparseable(std::string(reply));
}

bool acc_l(const Gateway& gateway, std::string_view question, std::string_view gold,
           std::string_view predicted) {
  return parse_judge_reply(gateway.judge(render_judge_prompt(question, gold, predicted)));
}

std::optional<double> ImprovementCounts::rate() const {
  if (refined == 0) return std::nullopt;
  return static_cast<double>(improved) / static_cast<double>(refined);
}

ImprovementCounts improvement_counts(const std::vector<StepDecision>& decisions) {
  ImprovementCounts counts;
  for (const auto& d : decisions) {
    if (!d.refined) continue;
    ++counts.refined;
    if (d.pre_refine_score && d.post_refine_score && *d.post_refine_score > *d.pre_refine_score) {
      ++counts.improved;
    }
  }
  return counts;
}

std::optional<double> improvement_rate(const std::vector<StepDecision>& decisions) {
  return improvement_counts(decisions).rate();
}

void EvalReport::aggregate() {
  std::size_t correct = 0, judged = 0, judged_true = 0;
  improved = refined = 0;
  for (const auto& r : records) {
    correct += r.acc_r ? 1 : 0;
    if (r.acc_l) {
      ++judged;
      judged_true += *r.acc_l ? 1 : 0;
    }
    improved += r.improved_steps;
    refined += r.refined_steps;
  }
  acc_r = records.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(records.size());
  acc_l = judged == 0 ? std::nullopt
                      : std::optional<double>(static_cast<double>(judged_true) /
                                              static_cast<double>(judged));
}

void EvalReport::check_consistency() const {
  EvalReport copy = *this;
  copy.aggregate();
  const auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  const bool acc_l_ok = copy.acc_l.has_value() == acc_l.has_value() &&
                        (!acc_l || close(*copy.acc_l, *acc_l));
  if (!close(copy.acc_r, acc_r) || !acc_l_ok || copy.improved != improved ||
      copy.refined != refined) {
    throw Error(ErrorKind::kInvariantViolation,
                "report aggregates do not match its per-question records");
  }
}

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

std::string clip(std::string text, std::size_t width) {
  std::replace(text.begin(), text.end(), '\n', ' ');
  if (text.size() > width) text = text.substr(0, width - 3) + "...";
  return text;
}

}  // namespace

std::string EvalReport::to_table() const {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"id", "acc_r", "acc_l", "steps", "refined", "predicted", "gold"});
  for (const auto& r : records) {
    rows.push_back({r.id, r.acc_r ? "1" : "0", r.acc_l ? (*r.acc_l ? "1" : "0") : "-",
                    std::to_string(r.steps), std::to_string(r.refined_steps),
                    clip(r.predicted, 40),
                    clip(r.golden_answers.empty() ? "" : r.golden_answers.front(), 30)});
  }
  std::vector<std::size_t> widths(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += "  ";
      line += row[c];
      if (c + 1 < row.size()) line += std::string(widths[c] - row[c].size(), ' ');
    }
    out << line << '\n';
  }
  out << '\n'
      << "dataset           " << dataset << '\n'
      << "questions         " << records.size() << '\n'
      << "ACC_R             " << fixed(acc_r, 4) << '\n'
      << "ACC_L             " << (acc_l ? fixed(*acc_l, 4) : std::string("-")) << '\n'
      << "improvement rate  "
      << (improvement_rate() ? fixed(*improvement_rate(), 4) : std::string("undefined")) << " ("
      << improved << "/" << refined << ")\n";
  return out.str();
}

void to_json(json& j, const EvalRecord& r) {
  j = json{{"id", r.id},
           {"question", r.question},
           {"golden_answers", r.golden_answers},
           {"predicted", r.predicted},
           {"acc_r", r.acc_r},
           {"acc_l", r.acc_l ? json(*r.acc_l) : json(nullptr)},
           {"steps", r.steps},
           {"refined_steps", r.refined_steps},
           {"improved_steps", r.improved_steps}};
}

void from_json(const json& j, EvalRecord& r) {
  j.at("id").get_to(r.id);
  j.at("question").get_to(r.question);
  j.at("golden_answers").get_to(r.golden_answers);
  j.at("predicted").get_to(r.predicted);
  j.at("acc_r").get_to(r.acc_r);
  const auto& l = j.at("acc_l");
  r.acc_l = l.is_null() ? std::nullopt : std::optional<bool>(l.get<bool>());
  j.at("steps").get_to(r.steps);
  j.at("refined_steps").get_to(r.refined_steps);
  j.at("improved_steps").get_to(r.improved_steps);
}

void to_json(json& j, const EvalReport& report) {
  const auto rate = report.improvement_rate();
  j = json{{"dataset", report.dataset},
           {"config_fingerprint", report.config_fingerprint},
           {"records", report.records},
           {"acc_r", report.acc_r},
           {"acc_l", report.acc_l ? json(*report.acc_l) : json(nullptr)},
           {"improvement", {{"improved", report.improved},
                            {"refined", report.refined},
                            {"rate", rate ? json(*rate) : json(nullptr)}}}};
}

void from_json(const json& j, EvalReport& report) {
  j.at("dataset").get_to(report.dataset);
  j.at("config_fingerprint").get_to(report.config_fingerprint);
  j.at("records").get_to(report.records);
  j.at("acc_r").get_to(report.acc_r);
  const auto& l = j.at("acc_l");
  report.acc_l = l.is_null() ? std::nullopt : std::optional<double>(l.get<double>());
  j.at("improvement").at("improved").get_to(report.improved);
  j.at("improvement").at("refined").get_to(report.refined);
  report.check_consistency();
}

EvalRun evaluate(const ReasoningEngine& engine, const std::vector<BenchmarkItem>& items,
                 const EvalOptions& options) {
  struct Outcome {
    EvalRecord record;
    ChainResult chain;
  };
  auto outcomes = parallel_map(items.size(), options.max_concurrency, [&](std::size_t i) {
    const BenchmarkItem& item = items[i];
    Outcome o;
    o.chain = engine.run_chain(item.question);
    o.record.id = item.id;
    o.record.question = item.question;
    o.record.golden_answers = item.golden_answers;
    o.record.predicted = o.chain.record.answer;
    o.record.acc_r = acc_r(item.golden_answers, o.record.predicted);
    o.chain.record.correct = o.record.acc_r;
    if (options.judge) {
      bool any = false;
      for (const auto& gold : item.golden_answers) {
        if (acc_l(engine.gateway(), item.question, gold, o.record.predicted)) {
          any = true;
          break;
        }
      }
      o.record.acc_l = any;
    }
    o.record.steps = o.chain.record.steps.size();
    const auto counts = improvement_counts(o.chain.decisions);
    o.record.refined_steps = counts.refined;
    o.record.improved_steps = counts.improved;
    return o;
  });

  EvalRun run;
  run.report.dataset = options.dataset;
  run.report.config_fingerprint = options.config_fingerprint;
  for (auto& o : outcomes) {
    run.report.records.push_back(std::move(o.record));
    run.chains.push_back(std::move(o.chain));
  }
  run.report.aggregate();
  return run;
}

}  // namespace steprag
