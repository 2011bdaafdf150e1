// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cobev/errors.hpp"

namespace cobev::detail {

// Reads optional fields from a JSON object, defaulting what is absent and
// rejecting keys nobody asked for. Errors carry the dotted field path.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(path("") + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const {
    if (prefix_.empty()) return key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key()) + ": unknown field");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace cobev::detail
