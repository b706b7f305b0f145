#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "spcontrol/errors.hpp"
#include "spcontrol/experiment.hpp"

namespace spc {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' ||
                    c == '_' || c == '-';
    if (!ok) return false;
  }
  return true;
}

double parse_number(const std::string& key, const std::string& tok) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0')
    throw ConfigInvalid("config value for '" + key + "' is not a number: " + tok);
  return v;
}

}  // namespace

ConfigMap ConfigMap::from_text(const std::string& text) {
  ConfigMap cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigInvalid("config line " + std::to_string(lineno) +
                          ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key))
      throw ConfigInvalid("config line " + std::to_string(lineno) +
                          ": bad key '" + key + "'");
    if (value.empty())
      throw ConfigInvalid("config line " + std::to_string(lineno) +
                          ": empty value for '" + key + "'");
    if (!cfg.kv_.emplace(key, value).second)
      throw ConfigInvalid("config line " + std::to_string(lineno) +
                          ": duplicate key '" + key + "'");
  }
  return cfg;
}

ConfigMap ConfigMap::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

void ConfigMap::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigInvalid("override needs the form key=value: " + assignment);
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  if (!valid_key(key)) throw ConfigInvalid("override has a bad key: " + assignment);
  if (value.empty()) throw ConfigInvalid("override has an empty value: " + assignment);
  kv_[key] = value;
  read_.erase(key);
}

bool ConfigMap::has(const std::string& key) const {
  const bool present = kv_.count(key) != 0;
  if (present) read_.insert(key);
  return present;
}

std::string ConfigMap::get_string(const std::string& key,
                                  const std::string& fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  read_.insert(key);
  return it->second;
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  read_.insert(key);
  return parse_number(key, it->second);
}

std::size_t ConfigMap::get_size(const std::string& key, std::size_t fallback) const {
  const double v = get_double(key, static_cast<double>(fallback));
  const auto n = static_cast<std::size_t>(v);
  if (v < 0.0 || static_cast<double>(n) != v)
    throw ConfigInvalid("config value for '" + key +
                        "' must be a non-negative integer");
  return n;
}

std::vector<double> ConfigMap::get_list(const std::string& key,
                                        const std::vector<double>& fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  read_.insert(key);
  std::istringstream in(it->second);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) out.push_back(parse_number(key, tok));
  if (out.empty())
    throw ConfigInvalid("config value for '" + key + "' is an empty list");
  return out;
}

void ConfigMap::reject_unknown_keys() const {
  std::string unknown;
  for (const auto& kv : kv_) {
    if (read_.count(kv.first)) continue;
    if (!unknown.empty()) unknown += ", ";
    unknown += kv.first;
  }
  if (!unknown.empty())
    throw ConfigInvalid("unknown config keys: " + unknown);
}

}  // namespace spc
