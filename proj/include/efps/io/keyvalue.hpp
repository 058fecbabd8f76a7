// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "efps/common.hpp"

namespace efps::io {

/// Line-oriented `key = value` document. `#` starts a comment.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::istream& in, const std::string& origin = "<stream>") {
    KeyValueFile kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string stripped = trim(line);
      if (stripped.empty()) continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos)
        throw Error(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
      const std::string key = trim(stripped.substr(0, eq));
      const std::string value = trim(stripped.substr(eq + 1));
      if (key.empty()) throw Error(origin + ":" + std::to_string(lineno) + ": empty key");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw Error("missing key `" + key + "`");
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  double number(const std::string& key) const { return to_double(key, get(key)); }
  double number_or(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }

  long long integer(const std::string& key) const {
    const std::string& v = get(key);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw Error("key `" + key + "` is not an integer: " + v);
    return out;
  }
  long long integer_or(const std::string& key, long long fallback) const {
    return has(key) ? integer(key) : fallback;
  }

  /// Whitespace- or comma-separated list of numbers.
  std::vector<double> numbers(const std::string& key) const {
    std::string v = get(key);
    for (char& c : v)
      if (c == ',') c = ' ';
    std::istringstream ss(v);
    std::vector<double> out;
    std::string tok;
    while (ss >> tok) out.push_back(to_double(key, tok));
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw Error("");
      return d;
    } catch (const std::exception&) {
      throw Error("key `" + key + "` is not a number: " + v);
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace efps::io
