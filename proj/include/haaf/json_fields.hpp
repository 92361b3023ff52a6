// SPDX-License-Identifier: Apache-2.0
//
// Strict reading of JSON objects into structs: every key must be known and
// every error names the full key path.
#pragma once

#include <set>
#include <string>

#include "json.hpp"

#include "haaf/tensor.hpp"

namespace haaf {

class ConfigError : public Error {
 public:
  using Error::Error;
};

class JsonFields {
 public:
  JsonFields(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  /// Reads `key` into `out` if present; `out` keeps its value otherwise.
  template <class T>
  bool opt(const std::string& key, T& out) {
    known_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return false;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
    return true;
  }

  /// Marks `key` as known and returns the sub-object, or nullptr.
  const nlohmann::json* sub(const std::string& key) {
    known_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  /// Throws on the first key that no opt()/sub() call asked for.
  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!known_.count(it.key())) throw ConfigError("unknown config key: " + where(it.key()));
  }

 private:
  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> known_;
};

}  // namespace haaf
