#include "steprag/serialization.hpp"

#include <sstream>

namespace steprag {

using nlohmann::json;

void to_json(json& j, const ReasoningStep& step) {
  j = json{{"sub_query", step.sub_query},
           {"retrieve", step.retrieve},
           {"document", step.document ? json(*step.document) : json(nullptr)},
           {"thought", step.thought},
           {"is_terminal", step.is_terminal}};
}

void from_json(const json& j, ReasoningStep& step) {
  j.at("sub_query").get_to(step.sub_query);
  j.at("retrieve").get_to(step.retrieve);
  const auto& doc = j.at("document");
  step.document = doc.is_null() ? std::nullopt : std::optional<std::string>(doc.get<std::string>());
  j.at("thought").get_to(step.thought);
  j.at("is_terminal").get_to(step.is_terminal);
}

void to_json(json& j, const ReasoningState& state) {
  j = json{{"question", state.question}, {"steps", state.steps}};
}

void from_json(const json& j, ReasoningState& state) {
  j.at("question").get_to(state.question);
  j.at("steps").get_to(state.steps);
}

void to_json(json& j, const ChainRecord& chain) {
  j = json{{"question", chain.question},
           {"steps", chain.steps},
           {"answer", chain.answer},
           {"correct", chain.correct ? json(*chain.correct) : json(nullptr)}};
}

void from_json(const json& j, ChainRecord& chain) {
  j.at("question").get_to(chain.question);
  j.at("steps").get_to(chain.steps);
  j.at("answer").get_to(chain.answer);
  const auto& correct = j.at("correct");
  chain.correct = correct.is_null() ? std::nullopt : std::optional<bool>(correct.get<bool>());
}

void to_json(json& j, const MaskedSpan& span) {
  j = json{{"step_index", span.step_index}, {"begin", span.begin}, {"end", span.end}};
}

void from_json(const json& j, MaskedSpan& span) {
  j.at("step_index").get_to(span.step_index);
  j.at("begin").get_to(span.begin);
  j.at("end").get_to(span.end);
}

void to_json(json& j, const PrmExample& example) {
  j = json{{"question_id", example.question_id},
           {"state", example.state},
           {"step", example.step},
           {"mc", example.mc},
           {"label", example.label}};
}

void from_json(const json& j, PrmExample& example) {
  j.at("question_id").get_to(example.question_id);
  j.at("state").get_to(example.state);
  j.at("step").get_to(example.step);
  j.at("mc").get_to(example.mc);
  j.at("label").get_to(example.label);
}

void to_json(json& j, const PemPreferenceExample& example) {
  j = json{{"state", example.state},     {"step", example.step}, {"explanation", example.explanation},
           {"r1", example.r1},           {"r2", example.r2},     {"preference", example.preference}};
}

void from_json(const json& j, PemPreferenceExample& example) {
  j.at("state").get_to(example.state);
  j.at("step").get_to(example.step);
  j.at("explanation").get_to(example.explanation);
  j.at("r1").get_to(example.r1);
  j.at("r2").get_to(example.r2);
  j.at("preference").get_to(example.preference);
}

void to_json(json& j, const WarmupExample& example) {
  j = json{{"question", example.question},
           {"steps", example.steps},
           {"answer", example.answer},
           {"masked_spans", example.masked_spans}};
}

void from_json(const json& j, WarmupExample& example) {
  j.at("question").get_to(example.question);
  j.at("steps").get_to(example.steps);
  j.at("answer").get_to(example.answer);
  j.at("masked_spans").get_to(example.masked_spans);
}

void to_json(json& j, const StepPreferenceExample& example) {
  j = json{{"state", example.state},
           {"step", example.step},
           {"mc", example.mc},
           {"desirable", example.desirable},
           {"masked_spans", example.masked_spans}};
}

void from_json(const json& j, StepPreferenceExample& example) {
  j.at("state").get_to(example.state);
  j.at("step").get_to(example.step);
  j.at("mc").get_to(example.mc);
  j.at("desirable").get_to(example.desirable);
  j.at("masked_spans").get_to(example.masked_spans);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIoError, "cannot write " + tmp.string());
    out << contents;
    if (!out) throw Error(ErrorKind::kIoError, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace steprag
