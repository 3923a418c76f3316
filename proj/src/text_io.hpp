#pragma once

// Helpers shared by the dataset and checkpoint readers/writers. Doubles are
// written in shortest round-trip form, so text files are lossless.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cab/errors.hpp"

namespace cab::detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline std::string format_double(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

inline void append_csv(std::string& out, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    append_double(out, values[i]);
  }
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path) : in_(path), path_(path) {
    if (!in_) throw FileError("cannot open '" + path.string() + "' for reading");
  }

  // Returns false at end of file.
  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  std::string expect_line(std::string_view what) {
    std::string line;
    if (!next(line)) fail(what, "unexpected end of file");
    return line;
  }

  [[noreturn]] void fail(std::string_view field, std::string_view message) const {
    throw ParseError(path_.string() + ": field '" + std::string(field) + "': " +
                         std::string(message),
                     line_ == 0 ? 1 : line_);
  }

  // Parses a line of the form "<key> <value>" and returns the value.
  std::string_view expect_key(const std::string& line, std::string_view key) const {
    const auto sp = line.find(' ');
    if (std::string_view(line).substr(0, sp) != key)
      fail(key, "expected '" + std::string(key) + "', got '" + line + "'");
    if (sp == std::string::npos) fail(key, "missing value");
    return std::string_view(line).substr(sp + 1);
  }

  std::size_t line() const { return line_; }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
  std::size_t line_ = 0;
};

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace cab::detail
