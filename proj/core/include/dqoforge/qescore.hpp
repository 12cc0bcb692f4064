// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Quality-estimation scores r(x, y) in [0, 1]. The oracle knows each toy
// language's ideal translation; the remote scorer talks to a scoring service
// (see qe_remote.hpp). Both sit behind QeScorer so the preference builder
// never knows which one it has.

#pragma once

#include <cstddef>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "dqoforge/synthdata.hpp"
#include "dqoforge/vocab.hpp"

namespace dqoforge {

/// A score in [0, 1]. Construction rejects NaN and out-of-range values.
class QEScore {
 public:
  QEScore() = default;
  explicit QEScore(double v);
  double value() const noexcept { return value_; }
  operator double() const noexcept { return value_; }  // NOLINT: scores read as numbers

 private:
  double value_ = 0.0;
};

/// One scoring request: candidate `candidate` for source `source` in `lang`.
struct QeItem {
  std::string lang;
  Tokens source;     // content tokens, no tag
  Tokens candidate;  // may end with EOS
};

class QeScorer {
 public:
  virtual ~QeScorer() = default;
  /// "oracle" or "remote" (wrappers report what they wrap).
  virtual std::string_view tag() const = 0;
  /// Scores in request order.
  virtual std::vector<QEScore> score_batch(std::span<const QeItem> items) = 0;
  QEScore score(const QeItem& item);
};

/// 1 - Levenshtein(y, ideal) / max(|y|, |ideal|), clamped to [0, 1], with a
/// trailing EOS stripped from both sides. Two empty sequences score 1.
QEScore oracle_qe(std::span<const TokenId> source, std::span<const TokenId> candidate, const LanguageSpec& spec);

/// Token-level Levenshtein distance.
std::size_t token_edit_distance(std::span<const TokenId> a, std::span<const TokenId> b);

class OracleScorer final : public QeScorer {
 public:
  explicit OracleScorer(const LanguageRegistry& registry) : registry_(registry) {}
  std::string_view tag() const override { return "oracle"; }
  std::vector<QEScore> score_batch(std::span<const QeItem> items) override;

 private:
  const LanguageRegistry& registry_;
};

/// Memoizes another scorer by (lang, source, candidate). Thread-safe.
class CachingScorer final : public QeScorer {
 public:
  explicit CachingScorer(QeScorer& inner) : inner_(inner) {}
  std::string_view tag() const override { return inner_.tag(); }
  std::vector<QEScore> score_batch(std::span<const QeItem> items) override;
  void clear();
  std::size_t hits() const;
  std::size_t misses() const;

 private:
  using Key = std::tuple<std::string, Tokens, Tokens>;
  QeScorer& inner_;
  mutable std::mutex mu_;
  std::map<Key, QEScore> cache_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// s1 > s2 + eps. Throws InputError for eps < 0 or NaN.
bool prefer(double s1, double s2, double eps);
bool prefer(const QeItem& y1, const QeItem& y2, QeScorer& scorer, double eps);

}  // namespace dqoforge
