#include <fstream>
#include <sstream>

#include "grouprag/error.hpp"
#include "grouprag/gateway.hpp"
#include "grouprag/text.hpp"

namespace grouprag::llm {

namespace detail {
const std::map<std::string, std::string>& builtin_prompt_table();
}

PromptTemplate PromptLibrary::parse(std::string_view text) {
  constexpr std::string_view kSystem = "### system";
  constexpr std::string_view kUser = "### user";
  auto sys = text.find(kSystem);
  auto usr = text.find(kUser);
  if (usr == std::string_view::npos) return {"", text::trim(text)};
  PromptTemplate tmpl;
  if (sys != std::string_view::npos && sys < usr) {
    auto start = sys + kSystem.size();
    tmpl.system = text::trim(text.substr(start, usr - start));
  }
  tmpl.user = text::trim(text.substr(usr + kUser.size()));
  return tmpl;
}

PromptLibrary PromptLibrary::builtin() {
  PromptLibrary lib;
  for (const auto& [name, body] : detail::builtin_prompt_table()) lib.templates_[name] = parse(body);
  return lib;
}

PromptLibrary PromptLibrary::with_overrides(const std::filesystem::path& dir) {
  auto lib = builtin();
  if (dir.empty()) return lib;
  if (!std::filesystem::is_directory(dir)) throw InputError("templates_dir is not a directory: " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".txt") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    lib.templates_[entry.path().stem().string()] = parse(ss.str());
  }
  return lib;
}

const PromptTemplate& PromptLibrary::get(const std::string& name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw InputError("no prompt template named '" + name + "'");
  return it->second;
}

void PromptLibrary::set(const std::string& name, PromptTemplate tmpl) {
  templates_[name] = std::move(tmpl);
}

std::string PromptLibrary::render(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    auto open = tmpl.find("{{", i);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(i));
      break;
    }
    auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) {
      out.append(tmpl.substr(i));
      break;
    }
    out.append(tmpl.substr(i, open - i));
    auto key = std::string(tmpl.substr(open + 2, close - open - 2));
    auto it = values.find(key);
    if (it != values.end()) {
      out.append(it->second);
    } else {
      out.append(tmpl.substr(open, close + 2 - open));
    }
    i = close + 2;
  }
  return out;
}

}  // namespace grouprag::llm
