// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dqoforge {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

/// Symbol inventory shared by source and target sides: ids 0..size-1, with
/// three reserved ids.
struct Vocab {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr int kMinSize = 8;

  int size = kMinSize;

  explicit Vocab(int v);

  bool contains(TokenId t) const noexcept { return t >= 0 && t < size; }

  /// Throws InputError naming `what` if any id is outside the vocabulary.
  void check(std::span<const TokenId> tokens, const char* what) const;
};

/// "3 17 2" style rendering used by corpus files and BLEU.
std::string join_tokens(std::span<const TokenId> tokens);

/// Inverse of join_tokens. Throws InputError on anything but integers.
Tokens parse_tokens(std::string_view text);

}  // namespace dqoforge
