#include "evasim/kv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "evasim/error.hpp"

namespace evasim::kv {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

template <class T>
T parse_integer(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + text + "'");
  }
  return value;
}

}  // namespace

Document parse(std::string_view text) {
  Document doc;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const auto line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    doc[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return doc;
}

Document read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string serialize(const Document& doc) {
  std::string out;
  for (const auto& [key, value] : doc) {
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  }
  return out;
}

void write_file(const std::filesystem::path& path, const Document& doc) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << serialize(doc);
  if (!out) throw InputError("write failed for " + path.string());
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

double parse_double(std::string_view text) {
  text = trim(text);
  if (text == "inf" || text == "+inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  double value = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    throw ConfigError("expected number, got '" + std::string(text) + "'");
  }
  return value;
}

void Binder::bind(std::string key, double& field) {
  entries_[key] = {[&field, key](const std::string& v) {
                     try {
                       field = parse_double(v);
                     } catch (const ConfigError&) {
                       throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
                     }
                   },
                   [&field] { return format_double(field); }};
}

void Binder::bind(std::string key, int& field) {
  entries_[key] = {[&field, key](const std::string& v) { field = parse_integer<int>(key, v); },
                   [&field] { return std::to_string(field); }};
}

void Binder::bind(std::string key, std::uint64_t& field) {
  entries_[key] = {
      [&field, key](const std::string& v) { field = parse_integer<std::uint64_t>(key, v); },
      [&field] { return std::to_string(field); }};
}

void Binder::bind(std::string key, bool& field) {
  entries_[key] = {[&field, key](const std::string& v) {
                     if (v == "true" || v == "1") {
                       field = true;
                     } else if (v == "false" || v == "0") {
                       field = false;
                     } else {
                       throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
                     }
                   },
                   [&field] { return std::string(field ? "true" : "false"); }};
}

void Binder::bind(std::string key, std::string& field) {
  entries_[key] = {[&field](const std::string& v) { field = v; }, [&field] { return field; }};
}

void Binder::bind(std::string key, std::vector<int>& field) {
  entries_[key] = {[&field, key](const std::string& v) {
                     field.clear();
                     for (const auto& item : split_list(v)) field.push_back(parse_integer<int>(key, item));
                   },
                   [&field] {
                     std::string out;
                     for (std::size_t i = 0; i < field.size(); ++i) {
                       if (i) out += ",";
                       out += std::to_string(field[i]);
                     }
                     return out;
                   }};
}

void Binder::bind(std::string key, std::vector<std::string>& field) {
  entries_[key] = {[&field](const std::string& v) { field = split_list(v); },
                   [&field] {
                     std::string out;
                     for (std::size_t i = 0; i < field.size(); ++i) {
                       if (i) out += ",";
                       out += field[i];
                     }
                     return out;
                   }};
}

void Binder::apply(const Document& doc) const {
  for (const auto& [key, value] : doc) {
    const auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(value);
  }
}

Document Binder::dump() const {
  Document doc;
  for (const auto& [key, entry] : entries_) doc[key] = entry.get();
  return doc;
}

}  // namespace evasim::kv
