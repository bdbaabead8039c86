#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace steprag {

/// Directory holding the bundled prompt versions (prompts/<version>/*.txt).
std::filesystem::path default_prompt_dir();

/// Prompt templates of one version, loaded eagerly. Placeholders are
/// written {{name}}.
class PromptLibrary {
 public:
  /// Throws ConfigError if a required template is missing.
  PromptLibrary(const std::filesystem::path& dir, const std::string& version);

  const std::string& raw(std::string_view name) const;
  /// Throws ConfigError for a placeholder without a value.
  std::string render(std::string_view name, const std::map<std::string, std::string>& values) const;

 private:
  std::map<std::string, std::string, std::less<>> templates_;
};

/// Fills {{name}} placeholders in `text`.
std::string render_template(std::string_view text, const std::map<std::string, std::string>& values);

/// Fixed three-decimal rendering used wherever a score enters a prompt.
std::string format_score(double score);

}  // namespace steprag
