#pragma once

// Flat key = value config files. Precedence is defaults < file < flags; the
// CLI writes the fully resolved map back out as the run's audit record.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "nrgpt/common.hpp"

namespace nrgpt {

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    KvConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos)
          throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        continue;
      }
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("empty config key");
    kv_[key] = value;
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }
  long long get_int(const std::string& key, long long fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw ConfigError("key '" + key + "' is not an integer: " + it->second);
    }
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw ConfigError("key '" + key + "' is not a number: " + it->second);
    }
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("key '" + key + "' is not a bool: " + it->second);
  }

  void set_int(const std::string& key, long long v) { set(key, std::to_string(v)); }
  void set_double(const std::string& key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    set(key, buf);
  }
  void set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

  // Entries from `other` win.
  void merge(const KvConfig& other) {
    for (const auto& [k, v] : other.kv_) kv_[k] = v;
  }

  void write_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file: " + path);
    for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  std::map<std::string, std::string> kv_;
};

}  // namespace nrgpt
