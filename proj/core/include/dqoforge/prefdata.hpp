// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Preference pairs from the policy's own samples: for each source, the best
// scored candidate wins and a uniformly drawn candidate that is worse by more
// than the tolerance loses.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/qescore.hpp"
#include "dqoforge/seqmodel.hpp"
#include "dqoforge/synthdata.hpp"

namespace dqoforge {

struct PreferencePair {
  int round = 0;
  std::string lang;
  Tokens source;    // content tokens
  Tokens chosen;    // y_w, ends with EOS
  Tokens rejected;  // y_l, ends with EOS
  double score_w = 0.0;
  double score_l = 0.0;
  bool greedy_in_winner = false;  // y_w is the greedy candidate (index 0)

  bool operator==(const PreferencePair&) const = default;
};

/// Candidates for one source. Index 0 is the greedy output, 1..k the samples.
/// Duplicates are kept as separate entries.
struct CandidateSet {
  std::string lang;
  Tokens source;
  std::vector<Tokens> candidates;
  std::vector<QEScore> scores;  // parallel to candidates once scored
};

/// Streams for the samples of one (round, source index).
std::vector<RngStream> candidate_streams(std::uint64_t seed, int round, std::size_t source_index, int k);

/// Greedy + k samples, unscored. The model input is encoder_input(spec, source).
CandidateSet generate_candidates(const PolicyModel& model, const LanguageSpec& spec, const Tokens& source, int k,
                                 const SamplerParams& sampler, std::span<RngStream> streams);

/// Scores every candidate of every set in one scorer call.
void score_candidates(std::span<CandidateSet> sets, QeScorer& scorer);

/// generate_candidates followed by score_candidates.
CandidateSet gather_candidates(const PolicyModel& model, const LanguageSpec& spec, const Tokens& source, int k,
                               const SamplerParams& sampler, QeScorer& scorer, std::span<RngStream> streams);

enum class PairOutcome { kPair, kNoLoser, kIdentical };

struct PairResult {
  PairOutcome outcome = PairOutcome::kNoLoser;
  std::optional<PreferencePair> pair;
  std::size_t winner_index = 0;
  std::size_t loser_index = 0;
};

/// y_w is the first maximal-score candidate; losers are candidates scoring
/// below score_w - eps; y_l is uniform over losers. A loser whose string
/// equals y_w is discarded as kIdentical.
PairResult build_pair(const CandidateSet& cands, double eps, RngStream& rng, int round = 0);

struct RoundStats {
  int round = 0;
  std::size_t sources = 0;
  std::size_t candidates_scored = 0;
  std::size_t pairs = 0;
  std::size_t dropped_no_loser = 0;
  std::size_t dropped_identical = 0;
  std::size_t greedy_winners = 0;
  double mean_best_score = 0.0;
  double mean_greedy_score = 0.0;
  double mean_sample_score = 0.0;
};

void to_json(nlohmann::json& j, const RoundStats& s);

struct RoundDatasetConfig {
  std::vector<std::string> langs;  // the language set T
  int d = 8000;                    // sources per round
  int k = 64;                      // samples per source
  double eps = 0.005;
  SamplerParams sampler;
  bool with_replacement = false;   // required when d exceeds the seed corpus
  std::uint64_t seed = 0;
  int round = 0;
};

struct RoundDataset {
  std::vector<PreferencePair> pairs;
  RoundStats stats;
  std::vector<std::size_t> source_indices;  // per draw, into the seed corpus
  std::vector<std::string> draw_langs;      // per draw
};

/// Draws d sources from `seed_sources`, assigns each a language uniformly
/// from T, gathers candidates, and builds at most one pair per source.
/// Pairs are ordered by draw index.
RoundDataset build_round_dataset(const std::vector<Tokens>& seed_sources, const LanguageRegistry& registry,
                                 const PolicyModel& model, QeScorer& scorer, const RoundDatasetConfig& config);

/// One JSON object per line:
/// {"round","lang","src","chosen","rejected","score_w","score_l","greedy_in_winner"}.
void write_pairs(std::ostream& out, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_pairs(std::istream& in);
void save_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> load_pairs(const std::filesystem::path& path);

}  // namespace dqoforge
