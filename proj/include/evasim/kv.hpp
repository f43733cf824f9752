#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace evasim::kv {

// Ordered `key = value` document. Lines starting with '#' are comments.
using Document = std::map<std::string, std::string>;

Document parse(std::string_view text);
Document read_file(const std::filesystem::path& path);
std::string serialize(const Document& doc);
void write_file(const std::filesystem::path& path, const Document& doc);

// Shortest round-trip text form of a double ("inf"/"-inf"/"nan" for specials).
std::string format_double(double value);
double parse_double(std::string_view text);

// Binds keys to fields so a struct can be loaded from and dumped to a
// Document. Unknown keys are rejected by apply().
class Binder {
 public:
  void bind(std::string key, double& field);
  void bind(std::string key, int& field);
  void bind(std::string key, std::uint64_t& field);
  void bind(std::string key, bool& field);
  void bind(std::string key, std::string& field);
  void bind(std::string key, std::vector<int>& field);
  void bind(std::string key, std::vector<std::string>& field);

  // Assigns every key in `doc`; throws ConfigError on unknown keys or
  // unparsable values.
  void apply(const Document& doc) const;
  Document dump() const;
  bool has(const std::string& key) const { return entries_.count(key) != 0; }

 private:
  struct Entry {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace evasim::kv
