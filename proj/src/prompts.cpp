#include "steprag/prompts.hpp"

#include <cstdio>

#include "steprag/error.hpp"
#include "steprag/serialization.hpp"

#ifndef STEPRAG_PROMPT_DIR
#define STEPRAG_PROMPT_DIR "prompts"
#endif

namespace steprag {

std::filesystem::path default_prompt_dir() { return STEPRAG_PROMPT_DIR; }

PromptLibrary::PromptLibrary(const std::filesystem::path& dir, const std::string& version) {
  for (const char* name : {"system", "propose", "refine", "finalize", "explain"}) {
    const auto path = dir / version / (std::string(name) + ".txt");
    if (!std::filesystem::exists(path)) {
      throw Error(ErrorKind::kConfigError, "missing prompt template " + path.string());
    }
    templates_.emplace(name, read_file(path));
  }
}

const std::string& PromptLibrary::raw(std::string_view name) const {
  const auto it = templates_.find(name);
  if (it == templates_.end()) {
    throw Error(ErrorKind::kConfigError, "unknown prompt '" + std::string(name) + "'");
  }
  return it->second;
}

std::string PromptLibrary::render(std::string_view name,
                                  const std::map<std::string, std::string>& values) const {
  return render_template(raw(name), values);
}

std::string render_template(std::string_view text, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto open = text.find("{{", pos);
    if (open == std::string_view::npos) break;
    const auto close = text.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    out += text.substr(pos, open - pos);
    const std::string key(text.substr(open + 2, close - open - 2));
    const auto it = values.find(key);
    if (it == values.end()) {
      throw Error(ErrorKind::kConfigError, "no value for prompt placeholder {{" + key + "}}");
    }
    out += it->second;
    pos = close + 2;
  }
  out += text.substr(pos);
  return out;
}

std::string format_score(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", score);
  return buf;
}

}  // namespace steprag
