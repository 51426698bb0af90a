#include "emask/cli/ini.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace emask::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((s[i] == ';' || s[i] == '#') && (i == 0 || s[i - 1] == ' ' || s[i - 1] == '\t')) return s.substr(0, i);
  }
  return s;
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
  return true;
}

}  // namespace

IniDocument IniDocument::parse(const std::string& text, const std::string& source) {
  IniDocument doc;
  doc.source_ = source;
  doc.text_ = text;
  std::istringstream in(text);
  std::string current;
  int line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigFileError(source, line_no, "unterminated section header");
      current = trim(line.substr(1, line.size() - 2));
      if (!valid_name(current)) throw ConfigFileError(source, line_no, "invalid section name '" + current + "'");
      if (doc.sections_.count(current)) throw ConfigFileError(source, line_no, "duplicate section [" + current + "]");
      doc.sections_[current];
      doc.order_.push_back(current);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigFileError(source, line_no, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_name(key)) throw ConfigFileError(source, line_no, "invalid key '" + key + "'");
    if (current.empty()) throw ConfigFileError(source, line_no, "key '" + key + "' outside any section");
    auto& sec = doc.sections_[current];
    if (auto it = sec.find(key); it != sec.end())
      throw ConfigFileError(source, line_no,
                            "duplicate key '" + current + "." + key + "' (first at line " +
                                std::to_string(it->second.line) + ")");
    sec[key] = {value, line_no};
    doc.key_order_[current].push_back(key);
  }
  return doc;
}

IniDocument IniDocument::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigFileError(path, 0, "cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

const IniEntry* IniDocument::find(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  return k == s->second.end() ? nullptr : &k->second;
}

void IniDocument::set(const std::string& section, const std::string& key, const std::string& value) {
  if (!sections_.count(section)) order_.push_back(section);
  auto& sec = sections_[section];
  if (!sec.count(key)) key_order_[section].push_back(key);
  sec[key].value = value;
}

std::string IniDocument::render() const {
  std::ostringstream out;
  bool first = true;
  for (const auto& name : order_) {
    if (!first) out << '\n';
    first = false;
    out << '[' << name << "]\n";
    const auto& sec = sections_.at(name);
    auto ko = key_order_.find(name);
    if (ko == key_order_.end()) continue;
    for (const auto& key : ko->second) out << key << " = " << sec.at(key).value << '\n';
  }
  return out.str();
}

}  // namespace emask::cli
