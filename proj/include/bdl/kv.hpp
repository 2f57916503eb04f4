#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bdl/errors.hpp"

namespace bdl {

/// Shortest decimal form that round-trips (17 significant digits).
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, std::string_view what) {
  const std::string str(trim(s));
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(str.c_str(), &end);
  // Underflow to a subnormal is fine; overflow is not.
  if (str.empty() || end != str.c_str() + str.size() || (errno == ERANGE && std::abs(v) == HUGE_VAL)) {
    throw ConfigError("'" + std::string(what) + "': expected a number, got '" + str + "'");
  }
  return v;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view what) {
  s = trim(s);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("'" + std::string(what) + "': expected a non-negative integer, got '" +
                      std::string(s) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view s, std::string_view what) {
  s = trim(s);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("'" + std::string(what) + "': expected true or false, got '" + std::string(s) + "'");
}

/// Flat structured text: `[section]` headers and `key = value` lines; `#`
/// starts a comment line. Order is preserved and duplicate keys are rejected.
class KvDocument {
 public:
  struct Entry {
    std::string section;
    std::string key;
    std::string value;
  };

  void set(const std::string& section, const std::string& key, std::string value) {
    for (Entry& e : entries_) {
      if (e.section == section && e.key == key) {
        e.value = std::move(value);
        return;
      }
    }
    entries_.push_back({section, key, std::move(value)});
  }
  void set(const std::string& section, const std::string& key, double v) { set(section, key, format_double(v)); }
  void set(const std::string& section, const std::string& key, std::uint64_t v) {
    set(section, key, std::to_string(v));
  }
  void set(const std::string& section, const std::string& key, bool v) {
    set(section, key, std::string(v ? "true" : "false"));
  }
  void set(const std::string& section, const std::string& key, const char* v) {
    set(section, key, std::string(v));
  }

  const std::string* find(const std::string& section, const std::string& key) const {
    for (const Entry& e : entries_) {
      if (e.section == section && e.key == key) return &e.value;
    }
    return nullptr;
  }

  const std::string& get(const std::string& section, const std::string& key) const {
    const std::string* v = find(section, key);
    if (!v) throw ConfigError("missing key '" + key + "' in section [" + section + "]");
    return *v;
  }
  double get_double(const std::string& section, const std::string& key) const {
    return parse_double(get(section, key), key);
  }
  std::uint64_t get_u64(const std::string& section, const std::string& key) const {
    return parse_u64(get(section, key), key);
  }
  bool get_bool(const std::string& section, const std::string& key) const {
    return parse_bool(get(section, key), key);
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::vector<Entry> section(const std::string& name) const {
    std::vector<Entry> out;
    for (const Entry& e : entries_) {
      if (e.section == name) out.push_back(e);
    }
    return out;
  }

  /// Root keys first, then each section in order of first appearance.
  void write(std::ostream& out) const {
    std::vector<std::string> order{""};
    for (const Entry& e : entries_) {
      if (std::find(order.begin(), order.end(), e.section) == order.end()) order.push_back(e.section);
    }
    bool any = false;
    for (const std::string& s : order) {
      bool header = false;
      for (const Entry& e : entries_) {
        if (e.section != s) continue;
        if (!header && !s.empty()) out << (any ? "\n" : "") << '[' << s << "]\n";
        header = any = true;
        out << e.key << " = " << e.value << '\n';
      }
    }
  }

  std::string str() const {
    std::ostringstream out;
    write(out);
    return out.str();
  }

  /// Parses lines until EOF or a line equal to `terminator` (if non-empty).
  static KvDocument parse(std::istream& in, std::string_view terminator = {}) {
    KvDocument doc;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string_view t = trim(line);
      if (!terminator.empty() && t == terminator) return doc;
      if (t.empty() || t.front() == '#') continue;
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) {
          throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
        }
        section = std::string(trim(t.substr(1, t.size() - 2)));
        continue;
      }
      const std::size_t eq = t.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key(trim(t.substr(0, eq)));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      if (doc.find(section, key)) {
        throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      doc.entries_.push_back({section, key, std::string(trim(t.substr(eq + 1)))});
    }
    if (!terminator.empty()) throw ConfigError("missing '" + std::string(terminator) + "' line");
    return doc;
  }

  static KvDocument parse(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace bdl
