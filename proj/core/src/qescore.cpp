// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/qescore.hpp"

#include <algorithm>
#include <cmath>

#include "dqoforge/error.hpp"

namespace dqoforge {

QEScore::QEScore(double v) : value_(v) {
  if (!(v >= 0.0 && v <= 1.0)) throw InputError("QE score " + std::to_string(v) + " outside [0, 1]");
}

QEScore QeScorer::score(const QeItem& item) { return score_batch(std::span<const QeItem>(&item, 1)).at(0); }

std::size_t token_edit_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace {
std::span<const TokenId> strip_eos(std::span<const TokenId> t) {
  return (!t.empty() && t.back() == Vocab::kEos) ? t.first(t.size() - 1) : t;
}
}  // namespace

QEScore oracle_qe(std::span<const TokenId> source, std::span<const TokenId> candidate, const LanguageSpec& spec) {
  const Tokens ideal_full = ideal_translate(spec, source);
  const auto ideal = strip_eos(ideal_full);
  const auto y = strip_eos(candidate);
  const std::size_t denom = std::max(ideal.size(), y.size());
  if (denom == 0) return QEScore(1.0);
  const double s = 1.0 - static_cast<double>(token_edit_distance(y, ideal)) / static_cast<double>(denom);
  return QEScore(std::clamp(s, 0.0, 1.0));
}

std::vector<QEScore> OracleScorer::score_batch(std::span<const QeItem> items) {
  std::vector<QEScore> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(oracle_qe(it.source, it.candidate, registry_.at(it.lang)));
  return out;
}

std::vector<QEScore> CachingScorer::score_batch(std::span<const QeItem> items) {
  std::vector<QEScore> out(items.size());
  std::vector<std::size_t> missing;
  {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto it = cache_.find(Key{items[i].lang, items[i].source, items[i].candidate});
      if (it != cache_.end()) {
        out[i] = it->second;
        ++hits_;
      } else {
        missing.push_back(i);
      }
    }
  }
  if (missing.empty()) return out;
  // Duplicates inside one batch go to the inner scorer once.
  std::vector<QeItem> request;
  std::map<Key, std::size_t> slot;
  std::vector<std::size_t> slot_of(missing.size());
  for (std::size_t m = 0; m < missing.size(); ++m) {
    const QeItem& item = items[missing[m]];
    auto [it, fresh] = slot.emplace(Key{item.lang, item.source, item.candidate}, request.size());
    if (fresh) request.push_back(item);
    slot_of[m] = it->second;
  }
  const auto scored = inner_.score_batch(request);
  if (scored.size() != request.size()) throw ProtocolError("scorer returned the wrong number of scores");
  std::lock_guard lock(mu_);
  for (std::size_t m = 0; m < missing.size(); ++m) out[missing[m]] = scored[slot_of[m]];
  for (const auto& [key, s] : slot) cache_.emplace(key, scored[s]);
  misses_ += request.size();
  hits_ += missing.size() - request.size();
  return out;
}

void CachingScorer::clear() {
  std::lock_guard lock(mu_);
  cache_.clear();
}

std::size_t CachingScorer::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t CachingScorer::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

bool prefer(double s1, double s2, double eps) {
  if (!(eps >= 0.0)) throw InputError("preference tolerance must be >= 0");
  return s1 > s2 + eps;
}

bool prefer(const QeItem& y1, const QeItem& y2, QeScorer& scorer, double eps) {
  const std::vector<QeItem> both{y1, y2};
  const auto s = scorer.score_batch(both);
  return prefer(s.at(0), s.at(1), eps);
}

}  // namespace dqoforge
