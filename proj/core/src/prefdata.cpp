// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/prefdata.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "dqoforge/error.hpp"
#include "log.hpp"

namespace dqoforge {

std::vector<RngStream> candidate_streams(std::uint64_t seed, int round, std::size_t source_index, int k) {
  std::vector<RngStream> out;
  out.reserve(static_cast<std::size_t>(std::max(k, 0)));
  for (int j = 0; j < k; ++j) {
    out.emplace_back(seed, std::initializer_list<std::uint64_t>{hash_name("candidate"), static_cast<std::uint64_t>(round),
                                                                source_index, static_cast<std::uint64_t>(j)});
  }
  return out;
}

CandidateSet generate_candidates(const PolicyModel& model, const LanguageSpec& spec, const Tokens& source, int k,
                                 const SamplerParams& sampler, std::span<RngStream> streams) {
  if (k < 1) throw InputError("k must be >= 1");
  if (streams.size() != static_cast<std::size_t>(k)) throw InputError("need one sampling stream per candidate");
  CandidateSet set;
  set.lang = spec.id;
  set.source = source;
  set.candidates = decode_candidates(model, encoder_input(spec, source), sampler, streams);
  return set;
}

void score_candidates(std::span<CandidateSet> sets, QeScorer& scorer) {
  std::vector<QeItem> items;
  for (const auto& s : sets) {
    for (const auto& c : s.candidates) items.push_back({s.lang, s.source, c});
  }
  const auto scores = scorer.score_batch(items);
  if (scores.size() != items.size()) throw ProtocolError("scorer returned the wrong number of scores");
  std::size_t pos = 0;
  for (auto& s : sets) {
    s.scores.assign(scores.begin() + static_cast<std::ptrdiff_t>(pos),
                    scores.begin() + static_cast<std::ptrdiff_t>(pos + s.candidates.size()));
    pos += s.candidates.size();
  }
}

CandidateSet gather_candidates(const PolicyModel& model, const LanguageSpec& spec, const Tokens& source, int k,
                               const SamplerParams& sampler, QeScorer& scorer, std::span<RngStream> streams) {
  CandidateSet set = generate_candidates(model, spec, source, k, sampler, streams);
  score_candidates(std::span<CandidateSet>(&set, 1), scorer);
  return set;
}

PairResult build_pair(const CandidateSet& cands, double eps, RngStream& rng, int round) {
  if (!(eps >= 0.0)) throw InputError("preference tolerance must be >= 0");
  if (cands.candidates.empty() || cands.scores.size() != cands.candidates.size()) {
    throw InputError("build_pair: candidate set is empty or unscored");
  }
  PairResult r;
  std::size_t w = 0;
  for (std::size_t i = 1; i < cands.scores.size(); ++i) {
    if (cands.scores[i].value() > cands.scores[w].value()) w = i;
  }
  r.winner_index = w;
  const double sw = cands.scores[w];
  std::vector<std::size_t> losers;
  for (std::size_t i = 0; i < cands.scores.size(); ++i) {
    if (prefer(sw, cands.scores[i], eps)) losers.push_back(i);
  }
  if (losers.empty()) return r;
  const std::size_t l = losers[static_cast<std::size_t>(rng.below(losers.size()))];
  r.loser_index = l;
  if (cands.candidates[l] == cands.candidates[w]) {
    r.outcome = PairOutcome::kIdentical;
    return r;
  }
  r.outcome = PairOutcome::kPair;
  r.pair = PreferencePair{round,         cands.lang,           cands.source, cands.candidates[w], cands.candidates[l],
                          sw,            cands.scores[l].value(), w == 0};
  return r;
}

void to_json(nlohmann::json& j, const RoundStats& s) {
  j = {{"round", s.round},
       {"sources", s.sources},
       {"candidates_scored", s.candidates_scored},
       {"pairs", s.pairs},
       {"dropped_no_loser", s.dropped_no_loser},
       {"dropped_identical", s.dropped_identical},
       {"greedy_winners", s.greedy_winners},
       {"mean_best_score", s.mean_best_score},
       {"mean_greedy_score", s.mean_greedy_score},
       {"mean_sample_score", s.mean_sample_score}};
}

RoundDataset build_round_dataset(const std::vector<Tokens>& seed_sources, const LanguageRegistry& registry,
                                 const PolicyModel& model, QeScorer& scorer, const RoundDatasetConfig& config) {
  if (config.langs.empty()) throw InputError("language set T is empty");
  if (config.d < 1) throw InputError("d must be >= 1");
  if (seed_sources.empty()) throw InputError("seed corpus is empty");
  const auto d = static_cast<std::size_t>(config.d);
  if (d > seed_sources.size() && !config.with_replacement) {
    throw InputError("d = " + std::to_string(d) + " exceeds the seed corpus (" + std::to_string(seed_sources.size()) +
                     ") and sampling with replacement is off");
  }
  for (const auto& l : config.langs) registry.at(l);

  // Source draws and language assignment.
  RngStream draw(config.seed, {hash_name("round-sources"), static_cast<std::uint64_t>(config.round)});
  std::vector<std::size_t> picks;
  if (config.with_replacement) {
    for (std::size_t i = 0; i < d; ++i) picks.push_back(static_cast<std::size_t>(draw.below(seed_sources.size())));
  } else {
    std::vector<std::size_t> all(seed_sources.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    draw.shuffle(all);
    picks.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(d));
  }
  std::vector<const LanguageSpec*> langs;
  for (std::size_t i = 0; i < d; ++i) {
    langs.push_back(&registry.at(config.langs[static_cast<std::size_t>(draw.below(config.langs.size()))]));
  }

  std::vector<CandidateSet> sets;
  sets.reserve(d);
  for (std::size_t i = 0; i < d; ++i) {
    auto streams = candidate_streams(config.seed, config.round, i, config.k);
    sets.push_back(generate_candidates(model, *langs[i], seed_sources[picks[i]], config.k, config.sampler, streams));
  }
  score_candidates(sets, scorer);

  RoundDataset out;
  out.source_indices = picks;
  for (const auto* l : langs) out.draw_langs.push_back(l->id);
  RoundStats& st = out.stats;
  st.round = config.round;
  st.sources = d;
  double best = 0.0, greedy = 0.0, sampled = 0.0;
  std::size_t sample_count = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const CandidateSet& s = sets[i];
    st.candidates_scored += s.candidates.size();
    greedy += s.scores[0];
    for (std::size_t j = 1; j < s.scores.size(); ++j) sampled += s.scores[j];
    sample_count += s.scores.size() - 1;
    RngStream rng(config.seed, {hash_name("pair"), static_cast<std::uint64_t>(config.round), i});
    PairResult r = build_pair(s, config.eps, rng, config.round);
    best += s.scores[r.winner_index];
    switch (r.outcome) {
      case PairOutcome::kPair:
        st.greedy_winners += r.pair->greedy_in_winner;
        out.pairs.push_back(std::move(*r.pair));
        break;
      case PairOutcome::kNoLoser: ++st.dropped_no_loser; break;
      case PairOutcome::kIdentical: ++st.dropped_identical; break;
    }
  }
  st.pairs = out.pairs.size();
  st.mean_best_score = best / static_cast<double>(d);
  st.mean_greedy_score = greedy / static_cast<double>(d);
  st.mean_sample_score = sample_count ? sampled / static_cast<double>(sample_count) : 0.0;
  detail::log()->info("round {}: {} pairs from {} sources ({} without a loser, {} identical), {} candidates scored",
                      st.round, st.pairs, st.sources, st.dropped_no_loser, st.dropped_identical,
                      st.candidates_scored);
  return out;
}

void write_pairs(std::ostream& out, const std::vector<PreferencePair>& pairs) {
  for (const auto& p : pairs) {
    const nlohmann::json j{{"round", p.round},
                           {"lang", p.lang},
                           {"src", join_tokens(p.source)},
                           {"chosen", join_tokens(p.chosen)},
                           {"rejected", join_tokens(p.rejected)},
                           {"score_w", p.score_w},
                           {"score_l", p.score_l},
                           {"greedy_in_winner", p.greedy_in_winner}};
    out << j.dump() << '\n';
  }
}

std::vector<PreferencePair> read_pairs(std::istream& in) {
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PreferencePair p;
      p.round = j.at("round").get<int>();
      p.lang = j.at("lang").get<std::string>();
      p.source = parse_tokens(j.at("src").get<std::string>());
      p.chosen = parse_tokens(j.at("chosen").get<std::string>());
      p.rejected = parse_tokens(j.at("rejected").get<std::string>());
      p.score_w = j.at("score_w").get<double>();
      p.score_l = j.at("score_l").get<double>();
      p.greedy_in_winner = j.value("greedy_in_winner", false);
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("pair file line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

void save_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_pairs(out, pairs);
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_pairs(in);
}

}  // namespace dqoforge
