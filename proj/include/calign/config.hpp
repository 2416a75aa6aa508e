#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "calign/error.hpp"

namespace calign {

/// Flat `key = value` text. Blank lines and lines starting with '#' are
/// ignored. Later assignments override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& origin = "<stream>") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse(in, path.string());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file " + path.string());
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    values_[key] = buf;
  }
  void set(const std::string& key, long long value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }
  void set(const std::string& key, unsigned long long value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, unsigned long value) { values_[key] = std::to_string(value); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Reads `key` into `out` when present; records the key as consumed.
  template <class T>
  void read(const std::string& key, T& out) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return;
    out = convert<T>(key, it->second);
  }

  /// Throws on any key never passed to read().
  void reject_unknown() const {
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) throw ConfigError("unknown config key: " + k);
    }
  }

  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  template <class T>
  static T convert(const std::string& key, const std::string& v) {
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        return v;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw ConfigError("");
        return static_cast<T>(d);
      } else if constexpr (std::is_unsigned_v<T>) {
        std::size_t pos = 0;
        const auto u = std::stoull(v, &pos);
        if (pos != v.size()) throw ConfigError("");
        return static_cast<T>(u);
      } else {
        std::size_t pos = 0;
        const auto i = std::stoll(v, &pos);
        if (pos != v.size()) throw ConfigError("");
        return static_cast<T>(i);
      }
    } catch (const std::exception&) {
      throw ConfigError("invalid value for " + key + ": '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace calign
