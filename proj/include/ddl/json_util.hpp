#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "ddl/errors.hpp"

namespace ddl {

using json = nlohmann::json;

// Strict reader for one JSON object section: typed lookups, and finish()
// rejects any key that was never asked for.
class SectionReader {
 public:
  SectionReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + qualified(key) + "' has the wrong type: " + e.what());
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& sub(const std::string& key) {
    known_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) throw ConfigError("unknown config key '" + qualified(it.key()) + "'");
  }

  std::string qualified(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> known_;
};

}  // namespace ddl
