#include "steprag/error.hpp"

#include <utility>

namespace steprag {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kAppendAfterTerminal: return "AppendAfterTerminal";
    case ErrorKind::kStepLimitExceeded: return "StepLimitExceeded";
    case ErrorKind::kMalformedLine: return "MalformedLine";
    case ErrorKind::kInvariantViolation: return "InvariantViolation";
    case ErrorKind::kParseFailure: return "ParseFailure";
    case ErrorKind::kBackendUnavailable: return "BackendUnavailable";
    case ErrorKind::kAuthError: return "AuthError";
    case ErrorKind::kScoreOutOfRange: return "ScoreOutOfRange";
    case ErrorKind::kNoCandidates: return "NoCandidates";
    case ErrorKind::kChainAborted: return "ChainAborted";
    case ErrorKind::kDomainError: return "DomainError";
    case ErrorKind::kLengthMismatch: return "LengthMismatch";
    case ErrorKind::kAlignmentError: return "AlignmentError";
    case ErrorKind::kTrainerFailed: return "TrainerFailed";
    case ErrorKind::kJudgeUnparseable: return "JudgeUnparseable";
    case ErrorKind::kSpecInfeasible: return "SpecInfeasible";
    case ErrorKind::kUnknownEntity: return "UnknownEntity";
    case ErrorKind::kConfigError: return "ConfigError";
    case ErrorKind::kIoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

bool is_backend_outage(const Error& error) noexcept {
  const ErrorKind kind = error.root_kind();
  return kind == ErrorKind::kBackendUnavailable || kind == ErrorKind::kAuthError;
}

ParseFailure::ParseFailure(const std::string& message, std::string raw)
    : Error(ErrorKind::kParseFailure, message), raw_(std::move(raw)) {}

MalformedLine::MalformedLine(std::size_t line, const std::string& message)
    : Error(ErrorKind::kMalformedLine, "line " + std::to_string(line) + ": " + message),
      line_(line) {}

JudgeUnparseable::JudgeUnparseable(std::string response)
    : Error(ErrorKind::kJudgeUnparseable, "judge response is neither True nor False"),
      response_(std::move(response)) {}

}  // namespace steprag
