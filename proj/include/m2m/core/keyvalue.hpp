#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace m2m {

/// `key = value` lines. Blank lines and lines starting with '#' are skipped.
/// Keys are consumed as they are read so leftovers can be reported as unknown.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues read_file(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string take_string(const std::string& key, const std::string& fallback);
  int take_int(const std::string& key, int fallback);
  long long take_int64(const std::string& key, long long fallback);
  double take_double(const std::string& key, double fallback);
  bool take_bool(const std::string& key, bool fallback);
  std::vector<int> take_int_list(const std::string& key, const std::vector<int>& fallback);

  /// Throws ConfigError naming the first key that was never taken.
  void reject_unknown() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> taken_;
};

std::string join_ints(const std::vector<int>& v);

}  // namespace m2m
