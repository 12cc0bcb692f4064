// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "dqoforge/error.hpp"

namespace dqoforge::detail {

/// Visits every key of a config object; `fn` returns false for keys it does
/// not know, which become ConfigError, as do type errors.
template <typename Fn>
void for_keys(const nlohmann::json& j, std::string_view what, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (!fn(key, v)) throw ConfigError("unknown key '" + key + "' in " + std::string(what));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string(what) + "." + key + ": " + e.what());
    }
  }
}

inline void require_keys(const nlohmann::json& j, std::string_view what, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  for (const char* k : keys) {
    if (!j.contains(k)) throw ConfigError("missing required key '" + std::string(k) + "' in " + std::string(what));
  }
}

}  // namespace dqoforge::detail
