// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/vocab.hpp"

#include <charconv>

#include "dqoforge/error.hpp"

namespace dqoforge {

Vocab::Vocab(int v) : size(v) {
  if (v < kMinSize) {
    throw InputError("vocabulary size " + std::to_string(v) + " is below the minimum of " +
                     std::to_string(kMinSize));
  }
}

void Vocab::check(std::span<const TokenId> tokens, const char* what) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!contains(tokens[i])) {
      throw InputError(std::string("unknown token id ") + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " of " + what);
    }
  }
}

std::string join_tokens(std::span<const TokenId> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += std::to_string(tokens[i]);
  }
  return out;
}

Tokens parse_tokens(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    TokenId value = 0;
    auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + j, value);
    if (ec != std::errc() || ptr != text.data() + j) {
      throw InputError("malformed token id '" + std::string(text.substr(i, j - i)) + "'");
    }
    out.push_back(value);
    i = j;
  }
  return out;
}

}  // namespace dqoforge
