#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/error.hpp"
#include "steprag/types.hpp"

namespace steprag {

inline constexpr int kSchemaVersion = 1;

void to_json(nlohmann::json& j, const ReasoningStep& step);
void from_json(const nlohmann::json& j, ReasoningStep& step);
void to_json(nlohmann::json& j, const ReasoningState& state);
void from_json(const nlohmann::json& j, ReasoningState& state);
void to_json(nlohmann::json& j, const ChainRecord& chain);
void from_json(const nlohmann::json& j, ChainRecord& chain);
void to_json(nlohmann::json& j, const MaskedSpan& span);
void from_json(const nlohmann::json& j, MaskedSpan& span);
void to_json(nlohmann::json& j, const PrmExample& example);
void from_json(const nlohmann::json& j, PrmExample& example);
void to_json(nlohmann::json& j, const PemPreferenceExample& example);
void from_json(const nlohmann::json& j, PemPreferenceExample& example);
void to_json(nlohmann::json& j, const WarmupExample& example);
void from_json(const nlohmann::json& j, WarmupExample& example);
void to_json(nlohmann::json& j, const StepPreferenceExample& example);
void from_json(const nlohmann::json& j, StepPreferenceExample& example);

/// Atomically replaces `path` with `contents` (write to a sibling, then rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

template <class Record>
void write_jsonl(std::ostream& out, const std::vector<Record>& records) {
  for (const auto& record : records) {
    nlohmann::json j = record;
    j["schema_version"] = kSchemaVersion;
    out << j.dump() << '\n';
  }
}

/// Reads one record per line. Blank lines are skipped; a line that is not
/// JSON or lacks a field raises MalformedLine, a record that breaks its
/// type's invariants raises InvariantViolation.
template <class Record>
std::vector<Record> read_jsonl(std::istream& in) {
  std::vector<Record> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Record record;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion) {
        throw MalformedLine(line_no, "unsupported schema_version");
      }
      record = j.get<Record>();
    } catch (const nlohmann::json::exception& e) {
      throw MalformedLine(line_no, e.what());
    }
    try {
      validate(record);
    } catch (const Error& e) {
      throw Error(ErrorKind::kInvariantViolation,
                  "line " + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(std::move(record));
  }
  return records;
}

template <class Record>
void write_jsonl_file(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ostringstream out;
  write_jsonl(out, records);
  write_file_atomic(path, out.str());
}

template <class Record>
std::vector<Record> read_jsonl_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + path.string());
  return read_jsonl<Record>(in);
}

}  // namespace steprag
