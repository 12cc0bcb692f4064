// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace dqoforge {

/// FNV-1a, used to turn sub-stream names into integers.
constexpr std::uint64_t hash_name(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// A reproducible random stream.
///
/// Streams are keyed by a master seed plus a path of integers, so that e.g.
/// the sample drawn for (round 3, source 17, sample 5) never depends on how
/// many other draws happened before it. Only the engine output is used; the
/// distributions are implemented here because the std:: distributions are
/// not bit-identical across standard libraries.
class RngStream {
 public:
  explicit RngStream(std::uint64_t master_seed) : RngStream(master_seed, std::span<const std::uint64_t>{}) {}

  RngStream(std::uint64_t master_seed, std::initializer_list<std::uint64_t> path)
      : RngStream(master_seed, std::span<const std::uint64_t>(path.begin(), path.size())) {}

  RngStream(std::uint64_t master_seed, std::span<const std::uint64_t> path)
      : seed_(master_seed), path_(path.begin(), path.end()) {
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * path.size());
    auto push = [&words](std::uint64_t v) {
      words.push_back(static_cast<std::uint32_t>(v));
      words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(master_seed);
    for (auto p : path) push(p);
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  /// Child stream; does not advance this stream.
  RngStream child(std::initializer_list<std::uint64_t> path) const {
    std::vector<std::uint64_t> full = path_;
    full.insert(full.end(), path.begin(), path.end());
    return RngStream(seed_, full);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling, so there is no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached spare, so streams stay simple).
  double normal() {
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::uint64_t> path_;
  std::mt19937_64 engine_;
};

}  // namespace dqoforge
