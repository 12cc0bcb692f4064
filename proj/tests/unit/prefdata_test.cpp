// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/prefdata.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "dqoforge/error.hpp"
#include "dqoforge/qe_remote.hpp"

namespace dqoforge {
namespace {

CandidateSet scored(std::vector<double> scores) {
  CandidateSet s;
  s.lang = "xx";
  s.source = {4};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    s.candidates.push_back({static_cast<TokenId>(10 + i), Vocab::kEos});
    s.scores.emplace_back(scores[i]);
  }
  return s;
}

// Independent construction: rank by (score desc, index asc), filter, then
// index the qualifying set (in candidate order) with the same draw.
struct Expected {
  std::size_t winner;
  std::vector<std::size_t> losers;
};

Expected brute_force(const std::vector<double>& s, double eps) {
  std::vector<std::size_t> order(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return s[a] != s[b] ? s[a] > s[b] : a < b;
  });
  Expected e{order.front(), {}};
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[e.winner] - s[i] > eps && s[e.winner] > s[i] + eps) e.losers.push_back(i);
  }
  return e;
}

LanguageRegistry registry() { return make_registry(toy_language_plan(2, 2), 5); }

ArchConfig arch_for(const LanguageRegistry& reg) {
  ArchConfig a;
  a.vocab_size = reg.vocab_size();
  a.d_model = 16;
  a.encoder_layers = 1;
  a.decoder_layers = 1;
  a.heads = 2;
  a.cross_heads = 1;
  a.ffn_dim = 32;
  a.max_len = 24;
  return a;
}

std::vector<Tokens> seed_sources(const LanguageRegistry& reg, int n) {
  std::vector<Tokens> out;
  RngStream rng(77);
  for (int i = 0; i < n; ++i) out.push_back(random_source(reg.layout(), rng, 0.15));
  return out;
}

TEST(BuildPair, LoserMustClearTolerance) {
  RngStream rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto r = build_pair(scored({0.9, 0.898, 0.7}), 0.005, rng);
    ASSERT_EQ(r.outcome, PairOutcome::kPair);
    EXPECT_EQ(r.winner_index, 0u);
    EXPECT_EQ(r.loser_index, 2u);
    EXPECT_DOUBLE_EQ(r.pair->score_l, 0.7);
    EXPECT_TRUE(r.pair->greedy_in_winner);
  }
}

TEST(BuildPair, EqualScoresGiveNoPair) {
  RngStream rng(1);
  const auto r = build_pair(scored({0.5, 0.5, 0.5, 0.5}), 0.005, rng);
  EXPECT_EQ(r.outcome, PairOutcome::kNoLoser);
  EXPECT_FALSE(r.pair.has_value());
}

TEST(BuildPair, TwoCandidatesAlwaysPairInOrder) {
  RngStream rng(2);
  const auto set = scored({1.0, 0.0});
  for (int t = 0; t < 20; ++t) {
    const auto r = build_pair(set, 0.005, rng);
    ASSERT_TRUE(r.pair);
    EXPECT_EQ(r.pair->chosen, set.candidates[0]);
    EXPECT_EQ(r.pair->rejected, set.candidates[1]);
  }
}

TEST(BuildPair, TiesGoToFirstIndexAndDuplicatesAreDiscarded) {
  RngStream rng(3);
  auto set = scored({0.4, 0.9, 0.9, 0.1});
  auto r = build_pair(set, 0.0, rng);
  EXPECT_EQ(r.winner_index, 1u);
  EXPECT_FALSE(r.pair->greedy_in_winner);
  // Only loser has the winner's string.
  set = scored({0.9, 0.1});
  set.candidates[1] = set.candidates[0];
  r = build_pair(set, 0.0, rng);
  EXPECT_EQ(r.outcome, PairOutcome::kIdentical);
  EXPECT_THROW(build_pair(scored({0.5}), -1.0, rng), InputError);
}

TEST(BuildPair, AgreesWithBruteForceOnRandomSets) {
  RngStream gen(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(gen.below(10));
    std::vector<double> s;
    // Coarse grid so ties and near-ties are common.
    for (int i = 0; i < n; ++i) s.push_back(static_cast<double>(gen.below(21)) / 20.0 + 0.004 * gen.below(2));
    for (double& v : s) v = std::min(v, 1.0);
    const double eps = trial % 3 == 0 ? 0.0 : 0.005 * static_cast<double>(trial % 4);
    const Expected e = brute_force(s, eps);
    RngStream a(trial, {1}), b(trial, {1});
    const auto r = build_pair(scored(s), eps, a);
    EXPECT_EQ(r.winner_index, e.winner);
    if (e.losers.empty()) {
      EXPECT_EQ(r.outcome, PairOutcome::kNoLoser);
      continue;
    }
    ASSERT_EQ(r.outcome, PairOutcome::kPair);
    EXPECT_EQ(r.loser_index, e.losers[static_cast<std::size_t>(b.below(e.losers.size()))]);
    EXPECT_TRUE(prefer(r.pair->score_w, r.pair->score_l, eps));
    for (double v : s) EXPECT_LE(v, r.pair->score_w);
  }
}

TEST(BuildPair, LoserIsUniformOverQualifyingSet) {
  const auto set = scored({0.95, 0.2, 0.94, 0.5, 0.3});  // losers: 1, 3, 4
  RngStream rng(4);
  const int n = 10000;
  std::map<std::size_t, int> counts;
  for (int t = 0; t < n; ++t) ++counts[build_pair(set, 0.02, rng).loser_index];
  ASSERT_EQ(counts.size(), 3u);
  const double sigma = std::sqrt(n * (1.0 / 3) * (2.0 / 3));
  for (std::size_t i : {1u, 3u, 4u}) EXPECT_NEAR(counts[i], n / 3.0, 3 * sigma) << i;
}

TEST(Candidates, GreedyFirstAndDeterministic) {
  const auto reg = registry();
  PolicyModel m(arch_for(reg), 3);
  OracleScorer oracle(reg);
  const auto& spec = reg.languages()[0];
  const Tokens src = seed_sources(reg, 1)[0];
  SamplerParams sp{40, 0.8, 24};
  auto s1 = candidate_streams(9, 0, 0, 6);
  auto s2 = candidate_streams(9, 0, 0, 6);
  const auto a = gather_candidates(m, spec, src, 6, sp, oracle, s1);
  const auto b = gather_candidates(m, spec, src, 6, sp, oracle, s2);
  ASSERT_EQ(a.candidates.size(), 7u);
  EXPECT_EQ(a.candidates, b.candidates);
  EXPECT_EQ(a.candidates[0], greedy_decode(m, encoder_input(spec, src), 24));
  for (std::size_t i = 0; i < a.candidates.size(); ++i) {
    EXPECT_DOUBLE_EQ(a.scores[i], oracle_qe(src, a.candidates[i], spec));
  }
}

TEST(Candidates, DegenerateSamplerDuplicatesGreedy) {
  const auto reg = registry();
  PolicyModel m(arch_for(reg), 3);
  OracleScorer oracle(reg);
  const auto& spec = reg.languages()[1];
  const Tokens src = seed_sources(reg, 2)[1];
  auto streams = candidate_streams(1, 0, 0, 1);
  const auto c = gather_candidates(m, spec, src, 1, SamplerParams{1, 0.8, 24}, oracle, streams);
  ASSERT_EQ(c.candidates.size(), 2u);
  EXPECT_EQ(c.candidates[0], c.candidates[1]);
  EXPECT_THROW(gather_candidates(m, spec, src, 0, SamplerParams{}, oracle, streams), InputError);
}

TEST(RoundDataset, CountsLanguagesAndTolerance) {
  const auto reg = registry();
  PolicyModel m(arch_for(reg), 5);
  OracleScorer oracle(reg);
  const auto sources = seed_sources(reg, 80);
  RoundDatasetConfig cfg;
  cfg.langs = {"a1"};
  cfg.d = 40;
  cfg.k = 5;
  cfg.sampler = SamplerParams{40, 0.8, 24};
  cfg.seed = 12;
  const auto ds = build_round_dataset(sources, reg, m, oracle, cfg);
  EXPECT_EQ(ds.stats.candidates_scored, 40u * 6u);
  EXPECT_LE(ds.pairs.size(), 40u);
  EXPECT_EQ(ds.stats.pairs + ds.stats.dropped_no_loser + ds.stats.dropped_identical, 40u);
  for (const auto& p : ds.pairs) {
    EXPECT_EQ(p.lang, "a1");
    EXPECT_TRUE(prefer(p.score_w, p.score_l, cfg.eps));
    EXPECT_NE(p.chosen, p.rejected);
  }
  cfg.eps = 2.0;
  EXPECT_TRUE(build_round_dataset(sources, reg, m, oracle, cfg).pairs.empty());
  cfg.d = 81;
  EXPECT_THROW(build_round_dataset(sources, reg, m, oracle, cfg), InputError);
  cfg.with_replacement = true;
  EXPECT_EQ(build_round_dataset(sources, reg, m, oracle, cfg).stats.sources, 81u);
}

TEST(RoundDataset, LanguagesDrawnUniformlyFromT) {
  const auto reg = registry();
  PolicyModel m(arch_for(reg), 5);
  OracleScorer oracle(reg);
  RoundDatasetConfig cfg;
  cfg.langs = {"a0", "b0"};
  cfg.d = 200;
  cfg.k = 1;
  cfg.eps = 2.0;  // only the draws matter here
  cfg.sampler = SamplerParams{40, 0.8, 24};
  const auto sources = seed_sources(reg, 200);
  const auto ds = build_round_dataset(sources, reg, m, oracle, cfg);
  ASSERT_EQ(ds.draw_langs.size(), 200u);
  const auto a0 = std::count(ds.draw_langs.begin(), ds.draw_langs.end(), "a0");
  EXPECT_EQ(a0 + std::count(ds.draw_langs.begin(), ds.draw_langs.end(), "b0"), 200);
  EXPECT_NEAR(static_cast<double>(a0), 100.0, 3 * std::sqrt(50.0));
  // Without replacement every source is drawn once.
  EXPECT_EQ(std::set<std::size_t>(ds.source_indices.begin(), ds.source_indices.end()).size(), 200u);
}

TEST(RoundDataset, RemoteScorerGivesIdenticalPairs) {
  const auto reg = registry();
  PolicyModel m(arch_for(reg), 8);
  OracleScorer oracle(reg);
  MockQeServer server(reg);
  server.start();
  RemoteQeConfig rc;
  rc.port = server.port();
  rc.max_batch = 64;
  RemoteScorer remote(rc);
  const auto sources = seed_sources(reg, 30);
  RoundDatasetConfig cfg;
  cfg.langs = {"a0", "a1", "b1"};
  cfg.d = 30;
  cfg.k = 4;
  cfg.sampler = SamplerParams{40, 0.8, 24};
  cfg.seed = 3;
  const auto x = build_round_dataset(sources, reg, m, oracle, cfg);
  const auto y = build_round_dataset(sources, reg, m, remote, cfg);
  EXPECT_EQ(x.pairs, y.pairs);
}

TEST(PairFile, JsonlRoundTrip) {
  std::vector<PreferencePair> pairs{{2, "de", {4, 5}, {7, 8, 2}, {7, 2}, 0.9, 0.5, true},
                                    {2, "zh", {6}, {9, 2}, {2}, 0.75, 0.0, false}};
  std::stringstream io;
  write_pairs(io, pairs);
  EXPECT_EQ(read_pairs(io), pairs);
  std::istringstream bad("{\"round\":1}\n");
  EXPECT_THROW(read_pairs(bad), InputError);
}

}  // namespace
}  // namespace dqoforge
