#include "steprag/gateway.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "steprag/error.hpp"
#include "steprag/text.hpp"

namespace steprag {

std::string_view to_string(Role role) {
  switch (role) {
    case Role::kGenerator: return "generator";
    case Role::kPrm: return "prm";
    case Role::kPem: return "pem";
    case Role::kJudge: return "judge";
    case Role::kRetriever: return "retriever";
  }
  return "unknown";
}

void CallLog::add(ModelCallRecord record) {
  std::lock_guard lock(mutex_);
  records_.push_back(std::move(record));
}

std::vector<ModelCallRecord> CallLog::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::size_t CallLog::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

std::size_t CallLog::count(Role role) const {
  std::lock_guard lock(mutex_);
  return static_cast<std::size_t>(std::count_if(
      records_.begin(), records_.end(), [role](const auto& r) { return r.role == role; }));
}

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Returns the value after `tag` when `line` starts with it (case-insensitive).
std::optional<std::string> tagged(std::string_view line, std::string_view tag) {
  if (line.size() < tag.size()) return std::nullopt;
  if (lower(line.substr(0, tag.size())) != tag) return std::nullopt;
  return trim(line.substr(tag.size()));
}

bool is_tag_line(std::string_view line) {
  for (auto tag : {"sub-query:", "retrieve:", "thought:", "final answer:", "document:"}) {
    if (tagged(line, tag)) return true;
  }
  return false;
}

// Runs one backend call, logging it whether it succeeds or throws.
template <class Fn>
auto logged(CallLog& log, Role role, std::string request, Fn&& fn) {
  CallInfo info;
  ModelCallRecord record;
  record.role = role;
  record.request = std::move(request);
  const auto start = std::chrono::steady_clock::now();
  auto finish = [&](std::string response, bool failed) {
    record.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    record.response = std::move(response);
    record.retry_count = info.retry_count;
    record.prompt_tokens = info.prompt_tokens;
    record.completion_tokens = info.completion_tokens;
    record.failed = failed;
    log.add(std::move(record));
  };
  try {
    auto result = fn(info);
    if constexpr (std::is_same_v<decltype(result), std::string>) {
      finish(result, false);
    } else if constexpr (std::is_same_v<decltype(result), double>) {
      std::ostringstream out;
      out << result;
      finish(out.str(), false);
    } else {
      finish(std::to_string(result.size()) + " documents", false);
    }
    return result;
  } catch (const std::exception& e) {
    finish(e.what(), true);
    throw;
  }
}

}  // namespace

ReasoningStep parse_step_output(std::string_view raw) {
  std::optional<std::string> sub_query, retrieve, thought, final_answer;
  std::vector<std::string> lines = split(raw, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (auto v = tagged(line, "final answer:")) {
      final_answer = *v;
    } else if (auto v = tagged(line, "sub-query:")) {
      sub_query = *v;
    } else if (auto v = tagged(line, "retrieve:")) {
      retrieve = *v;
    } else if (auto v = tagged(line, "thought:")) {
      std::string text = *v;
      while (i + 1 < lines.size() && !lines[i + 1].empty() && !is_tag_line(lines[i + 1])) {
        text += "\n" + lines[++i];
      }
      thought = text;
    }
  }

  if (final_answer) {
    if (final_answer->empty()) throw ParseFailure("empty final answer", std::string(raw));
    return ReasoningStep::terminal(*final_answer);
  }
  if (!sub_query || sub_query->empty()) throw ParseFailure("missing Sub-Query", std::string(raw));
  if (!retrieve) throw ParseFailure("missing Retrieve", std::string(raw));
  if (!thought || thought->empty()) throw ParseFailure("missing Thought", std::string(raw));

  std::string indicator = lower(*retrieve);
  while (!indicator.empty() && (indicator.back() == '.' || indicator.back() == '*')) {
    indicator.pop_back();
  }
  ReasoningStep step;
  if (indicator == "yes") {
    step.retrieve = true;
  } else if (indicator != "no") {
    throw ParseFailure("Retrieve must be Yes or No, got '" + *retrieve + "'", std::string(raw));
  }
  step.sub_query = *sub_query;
  step.thought = *thought;
  return step;
}

std::string parse_final_answer(std::string_view raw) {
  for (const auto& line : split(raw, '\n')) {
    if (auto v = tagged(line, "final answer:"); v && !v->empty()) return *v;
  }
  std::string answer = trim(raw);
  if (answer.empty()) throw ParseFailure("empty finalization reply", std::string(raw));
  return answer;
}

Gateway::Gateway(Backends backends, int top_k, std::shared_ptr<CallLog> log)
    : backends_(std::move(backends)),
      top_k_(top_k),
      log_(log ? std::move(log) : std::make_shared<CallLog>()) {}

Gateway Gateway::with_generator(std::shared_ptr<Generator> generator) const {
  Backends b = backends_;
  b.generator = std::move(generator);
  return Gateway(std::move(b), top_k_, log_);
}

ReasoningStep Gateway::complete_step(std::string raw) const {
  ReasoningStep step = parse_step_output(raw);
  if (step.retrieve) {
    const auto docs = retrieve(step.sub_query, top_k_);
    std::string text;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (i) text += "\n";
      text += docs[i].text;
    }
    step.document = std::move(text);
  }
  return step;
}

ReasoningStep Gateway::sample_step(const ReasoningState& state, const SampleRequest& sample) const {
  auto raw = logged(*log_, Role::kGenerator, render_transcript(state), [&](CallInfo& info) {
    return backends_.generator->propose(state, sample, info);
  });
  return complete_step(std::move(raw));
}

std::vector<ReasoningStep> Gateway::propose_steps(const ReasoningState& state, int m,
                                                  std::string_view stream) const {
  std::vector<ReasoningStep> steps;
  steps.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    steps.push_back(sample_step(state, {stream, static_cast<std::uint64_t>(i), false}));
  }
  return steps;
}

std::vector<Gateway::Candidate> Gateway::propose_candidates(const ReasoningState& state, int m,
                                                            std::string_view stream) const {
  std::vector<Candidate> out(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    try {
      out[static_cast<std::size_t>(i)].step =
          sample_step(state, {stream, static_cast<std::uint64_t>(i), false});
    } catch (const ParseFailure& e) {
      out[static_cast<std::size_t>(i)].error = e.what();
    }
  }
  return out;
}

ProcessScore Gateway::score_step(const ReasoningState& state, const ReasoningStep& step) const {
  const double value =
      logged(*log_, Role::kPrm, render_transcript(state) + render_step(step),
             [&](CallInfo& info) { return backends_.prm->score(state, step, info); });
  if (!std::isfinite(value) || value <= 0.0 || value >= 1.0) {
    std::ostringstream out;
    out << "PRM returned " << value << ", outside (0,1)";
    throw Error(ErrorKind::kScoreOutOfRange, out.str());
  }
  return {value, false};
}

std::string Gateway::explain_step(const ReasoningState& state, const ReasoningStep& step,
                                  ProcessScore score) const {
  return logged(*log_, Role::kPem, render_transcript(state) + render_step(step),
                [&](CallInfo& info) { return backends_.pem->explain(state, step, score.value, info); });
}

ReasoningStep Gateway::refine_step(const ReasoningState& state, const ReasoningStep& step,
                                   std::string_view explanation, ProcessScore score) const {
  auto raw = logged(*log_, Role::kGenerator, render_step(step) + std::string(explanation),
                    [&](CallInfo& info) {
                      return backends_.generator->refine(state, step, explanation, score.value,
                                                         info);
                    });
  return complete_step(std::move(raw));
}

std::string Gateway::finalize(const ReasoningState& state) const {
  auto raw = logged(*log_, Role::kGenerator, render_transcript(state),
                    [&](CallInfo& info) { return backends_.generator->finalize(state, info); });
  return parse_final_answer(raw);
}

std::vector<Document> Gateway::retrieve(std::string_view query, int k) const {
  if (k < 1) throw Error(ErrorKind::kDomainError, "retrieval depth must be >= 1");
  auto docs = logged(*log_, Role::kRetriever, std::string(query), [&](CallInfo& info) {
    return backends_.retriever->search(query, k, info);
  });
  if (docs.size() > static_cast<std::size_t>(k)) docs.resize(static_cast<std::size_t>(k));
  return docs;
}

std::string Gateway::judge(std::string_view prompt) const {
  return logged(*log_, Role::kJudge, std::string(prompt),
                [&](CallInfo& info) { return backends_.judge->complete(prompt, info); });
}

}  // namespace steprag
