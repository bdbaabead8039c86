#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace steprag {

enum class ErrorKind {
  kAppendAfterTerminal,
  kStepLimitExceeded,
  kMalformedLine,
  kInvariantViolation,
  kParseFailure,
  kBackendUnavailable,
  kAuthError,
  kScoreOutOfRange,
  kNoCandidates,
  kChainAborted,
  kDomainError,
  kLengthMismatch,
  kAlignmentError,
  kTrainerFailed,
  kJudgeUnparseable,
  kSpecInfeasible,
  kUnknownEntity,
  kConfigError,
  kIoError,
};

std::string_view to_string(ErrorKind kind);

/// Base exception for every failure the library reports. The kind is stable
/// and is what callers (and the CLI exit-code mapping) switch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }
  /// Kind of the failure underneath any wrapping (ChainAborted).
  virtual ErrorKind root_kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Endpoint down or credentials refused. Collections abort on these instead
/// of recording a per-question failure.
bool is_backend_outage(const Error& error) noexcept;

/// Model output that does not follow the tagged-line step protocol.
/// Keeps the raw text for diagnosis.
class ParseFailure : public Error {
 public:
  ParseFailure(const std::string& message, std::string raw);
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

class MalformedLine : public Error {
 public:
  MalformedLine(std::size_t line, const std::string& message);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class JudgeUnparseable : public Error {
 public:
  explicit JudgeUnparseable(std::string response);
  const std::string& response() const noexcept { return response_; }

 private:
  std::string response_;
};

}  // namespace steprag
