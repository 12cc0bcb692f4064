// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit and acceptance suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "dqoforge/seqmodel.hpp"

namespace dqoforge::testing {

/// Parameter block by name; throws if absent.
inline const ParamBlock& block(const PolicyModel& m, const std::string& name) {
  for (const auto& b : m.layout().blocks()) {
    if (b.name == name) return b;
  }
  throw std::out_of_range("no parameter block " + name);
}

/// A model whose logits are the constant `bias` at every step, regardless of
/// source and prefix (all weights zero, output bias set).
inline PolicyModel constant_logit_model(ArchConfig arch, std::span<const double> bias) {
  arch.vocab_size = static_cast<int>(bias.size());
  PolicyModel m(arch, std::vector<double>(ParamLayout(arch).total(), 0.0));
  const ParamBlock& b = block(m, "out.b");
  std::copy(bias.begin(), bias.end(), m.mutable_params().begin() + static_cast<std::ptrdiff_t>(b.offset));
  return m;
}

/// log softmax(logits)[i], computed the textbook way.
inline double log_softmax(std::span<const double> logits, std::size_t i) {
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  return logits[i] - std::log(z);
}

/// Relative agreement used for gradient checks: |a-b| <= rel * max(|a|,|b|),
/// with an absolute floor for entries that are zero up to rounding.
inline bool close_relative(double a, double b, double rel, double abs_floor = 1e-8) {
  const double diff = std::abs(a - b);
  return diff <= abs_floor || diff <= rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace dqoforge::testing
