#pragma once

#include <iosfwd>
#include <map>
#include <string>

namespace fluxmech {

// Flat key-value config, one `key = value` per line, '#' comments, SI units,
// frequencies in Hz. Used for device configs, trace sidecar metadata and run
// manifests.
class FlatConfig {
 public:
  FlatConfig() = default;

  static FlatConfig parse_file(const std::string& path);
  static FlatConfig parse(std::istream& in);

  void save(const std::string& path) const;
  void write(std::ostream& out) const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, double value);
  void set(const std::string& key, const std::string& value);

  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback = "") const;

  const std::map<std::string, std::string>& items() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

} // namespace fluxmech
