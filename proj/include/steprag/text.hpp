#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace steprag {

// Minimal `key = value` format shared by engine configs and world specs:
// one pair per line, '#' starts a comment, surrounding whitespace ignored.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

std::string trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);

double parse_double(std::string_view key, std::string_view value);
long long parse_int(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);

/// Lowercase, punctuation stripped, whitespace collapsed and trimmed.
std::string normalize_answer(std::string_view text);

}  // namespace steprag
