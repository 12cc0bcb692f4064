// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

#include <cstdlib>
#include <mutex>
#include <string>

namespace dqoforge::detail {

std::shared_ptr<spdlog::logger> log() {
  static std::once_flag once;
  static std::shared_ptr<spdlog::logger> logger;
  std::call_once(once, [] {
    logger = spdlog::get("dqoforge");
    if (!logger) logger = spdlog::stderr_color_mt("dqoforge");
    spdlog::level::level_enum level = spdlog::level::info;
    if (const char* env = std::getenv("DQOFORGE_LOG")) {
      const std::string name(env);
      const auto parsed = spdlog::level::from_str(name);
      if (parsed != spdlog::level::off || name == "off") level = parsed;
    }
    logger->set_level(level);
  });
  return logger;
}

}  // namespace dqoforge::detail
