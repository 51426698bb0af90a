#pragma once

// Sectioned key = value documents.
//
//   ; comment
//   [section]
//   key = value   # trailing comment

#include <map>
#include <string>
#include <vector>

#include "emask/error.hpp"

namespace emask::cli {

/// Malformed document or invalid field; carries the source line (0 when unknown).
class ConfigFileError : public ConfigError {
 public:
  ConfigFileError(const std::string& source, int line, const std::string& what)
      : ConfigError(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

struct IniEntry {
  std::string value;
  int line = 0;
};

class IniDocument {
 public:
  using Section = std::map<std::string, IniEntry>;

  static IniDocument parse(const std::string& text, const std::string& source = "<config>");
  static IniDocument load(const std::string& path);

  const std::string& source() const noexcept { return source_; }
  /// Input exactly as read; empty for documents built in memory.
  const std::string& text() const noexcept { return text_; }

  const IniEntry* find(const std::string& section, const std::string& key) const;
  bool has_section(const std::string& section) const { return sections_.count(section) > 0; }
  const std::map<std::string, Section>& sections() const noexcept { return sections_; }
  const std::vector<std::string>& section_order() const noexcept { return order_; }

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::string render() const;

 private:
  std::string source_ = "<config>";
  std::string text_;
  std::map<std::string, Section> sections_;
  std::vector<std::string> order_;
  std::map<std::string, std::vector<std::string>> key_order_;
};

}  // namespace emask::cli
