// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <spdlog/spdlog.h>

#include <memory>

namespace dqoforge::detail {

/// Library logger "dqoforge"; level from DQOFORGE_LOG (default: info).
std::shared_ptr<spdlog::logger> log();

}  // namespace dqoforge::detail
