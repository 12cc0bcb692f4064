// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/qescore.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <thread>

#include "dqoforge/error.hpp"
#include "dqoforge/qe_remote.hpp"

namespace dqoforge {
namespace {

// Identity-like language: L=1, F=1, C=2, E=0 -> words 4,5 map to targets 6,7
// in order; the reorder rule swaps pairs.
LanguageSpec small_spec() {
  LanguageSpec s;
  s.id = "xx";
  s.layout = TokenLayout{1, 1, 2, 0};
  s.bijection = {6, 7};
  s.reorder = {1, 0};
  return s;
}

LanguageRegistry registry() { return make_registry(toy_language_plan(2, 2), 5); }

std::vector<QeItem> items_for(const LanguageRegistry& reg, int n, std::uint64_t seed) {
  std::vector<QeItem> items;
  RngStream rng(seed);
  for (int i = 0; i < n; ++i) {
    const auto& spec = reg.languages()[static_cast<std::size_t>(i) % reg.languages().size()];
    Tokens src = random_source(reg.layout(), rng, 0.2);
    Tokens hyp = ideal_translate(spec, src);
    // Damage a prefix of varying length so scores spread over [0, 1].
    for (int j = 0; j < i % 4 && j + 1 < static_cast<int>(hyp.size()); ++j) hyp[static_cast<std::size_t>(j)] = 3;
    items.push_back({spec.id, src, hyp});
  }
  return items;
}

RemoteQeConfig client_config(int port) {
  RemoteQeConfig c;
  c.port = port;
  c.initial_backoff_ms = 1;
  c.max_backoff_ms = 5;
  c.timeout_ms = 5000;
  return c;
}

TEST(QEScore, RejectsOutOfRangeAndNaN) {
  EXPECT_DOUBLE_EQ(QEScore(0.25).value(), 0.25);
  EXPECT_THROW(QEScore(1.5), InputError);
  EXPECT_THROW(QEScore(-1e-9), InputError);
  EXPECT_THROW(QEScore(std::nan("")), InputError);
}

TEST(EditDistance, HandCases) {
  EXPECT_EQ(token_edit_distance(Tokens{}, Tokens{}), 0u);
  EXPECT_EQ(token_edit_distance(Tokens{1, 2, 3}, Tokens{}), 3u);
  EXPECT_EQ(token_edit_distance(Tokens{1, 2, 3}, Tokens{1, 3}), 1u);
  EXPECT_EQ(token_edit_distance(Tokens{1, 2, 3}, Tokens{3, 2, 1}), 2u);
  EXPECT_EQ(token_edit_distance(Tokens{5, 6, 7, 8}, Tokens{6, 7, 8, 9}), 2u);
}

TEST(OracleQe, IdealScoresOne) {
  const auto reg = registry();
  const auto& s = reg.languages()[1];
  const Tokens src{reg.layout().source_word(1), reg.layout().entity(0), reg.layout().source_word(2)};
  EXPECT_DOUBLE_EQ(oracle_qe(src, ideal_translate(s, src), s), 1.0);
}

TEST(OracleQe, DroppedTokenAndEmptyCandidate) {
  // Source (4, 5, 4): rendered (6, 7, 6), pair-swapped -> ideal (7, 6, 6).
  const LanguageSpec s = small_spec();
  const Tokens src{4, 5, 4};
  ASSERT_EQ(ideal_translate(s, src), (Tokens{7, 6, 6, Vocab::kEos}));
  EXPECT_NEAR(oracle_qe(src, Tokens{7, 6, Vocab::kEos}, s), 1.0 - 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(oracle_qe(src, Tokens{7, 6}, s), 0.6667, 5e-5);
  EXPECT_DOUBLE_EQ(oracle_qe(src, Tokens{Vocab::kEos}, s), 0.0);
  EXPECT_DOUBLE_EQ(oracle_qe(src, Tokens{}, s), 0.0);
}

TEST(OracleQe, UniqueMaximumByBruteForce) {
  // Vocabulary of four target-side symbols {PAD.. excluded}: candidates over
  // {6, 7, 3, 4} of length <= |ideal| + 1.
  const LanguageSpec s = small_spec();
  const std::vector<TokenId> alphabet{6, 7, 3, 4};
  for (const Tokens& src : {Tokens{4}, Tokens{4, 5}, Tokens{5, 5}}) {
    const Tokens ideal = ideal_translate(s, src);
    const std::size_t max_len = ideal.size();  // content + 1
    int maxima = 0;
    std::function<void(Tokens&)> walk = [&](Tokens& y) {
      const double q = oracle_qe(src, y, s);
      Tokens with_eos = y;
      with_eos.push_back(Vocab::kEos);
      if (q == 1.0) {
        ++maxima;
        EXPECT_EQ(with_eos, ideal);
      } else {
        EXPECT_LT(q, 1.0);
      }
      if (y.size() == max_len) return;
      for (TokenId t : alphabet) {
        y.push_back(t);
        walk(y);
        y.pop_back();
      }
    };
    Tokens y;
    walk(y);
    EXPECT_EQ(maxima, 1);
  }
}

TEST(Prefer, ToleranceExamples) {
  EXPECT_TRUE(prefer(0.800, 0.790, 0.005));
  EXPECT_FALSE(prefer(0.800, 0.800, 0.005));
  EXPECT_FALSE(prefer(0.800, 0.796, 0.005));
  EXPECT_FALSE(prefer(0.5, 0.5, 0.0));
  EXPECT_THROW(prefer(0.5, 0.4, -0.1), InputError);
}

TEST(Prefer, IrreflexiveAndAsymmetric) {
  RngStream rng(3);
  for (int i = 0; i < 2000; ++i) {
    const double a = rng.uniform(), b = rng.uniform(), eps = 0.01 * rng.uniform();
    EXPECT_FALSE(prefer(a, a, eps));
    EXPECT_FALSE(prefer(a, b, eps) && prefer(b, a, eps));
  }
}

TEST(Prefer, ThroughScorer) {
  const auto reg = registry();
  OracleScorer oracle(reg);
  const auto& s = reg.languages()[0];
  const Tokens src{reg.layout().source_word(0), reg.layout().source_word(1), reg.layout().source_word(2)};
  const QeItem good{s.id, src, ideal_translate(s, src)};
  const QeItem bad{s.id, src, Tokens{Vocab::kEos}};
  EXPECT_TRUE(prefer(good, bad, oracle, 0.005));
  EXPECT_FALSE(prefer(bad, good, oracle, 0.005));
}

TEST(CachingScorer, HitsOnRepeatedKeys) {
  const auto reg = registry();
  OracleScorer oracle(reg);
  CachingScorer cache(oracle);
  auto items = items_for(reg, 10, 1);
  items.push_back(items[0]);
  const auto first = cache.score_batch(items);
  EXPECT_EQ(cache.misses(), 10u);
  EXPECT_EQ(cache.hits(), 1u);
  const auto second = cache.score_batch(items);
  EXPECT_EQ(cache.hits(), 12u);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(first[i].value(), second[i].value());
  EXPECT_EQ(cache.tag(), "oracle");
}

TEST(Remote, WireRoundTrip) {
  const auto reg = registry();
  const auto items = items_for(reg, 3, 2);
  const auto back = decode_score_request(encode_score_request(items).dump());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].lang, items[i].lang);
    EXPECT_EQ(back[i].source, items[i].source);
    EXPECT_EQ(back[i].candidate, items[i].candidate);
  }
  EXPECT_THROW(decode_score_request("{\"items\":[{\"src\":1}]}"), InputError);
  EXPECT_THROW(decode_score_response("{\"scores\":[0.1]}", 2), ProtocolError);
  EXPECT_THROW(decode_score_response("{\"scores\":[\"x\"]}", 1), ProtocolError);
  EXPECT_THROW(decode_score_response("[]", 0), ProtocolError);
}

TEST(Remote, ConfigRejectsUnknownKeys) {
  EXPECT_THROW((nlohmann::json{{"hots", "x"}}.get<RemoteQeConfig>()), ConfigError);
  EXPECT_THROW((nlohmann::json{{"max_batch", 0}}.get<RemoteQeConfig>()), ConfigError);
  const RemoteQeConfig c = nlohmann::json{{"port", 9000}}.get<RemoteQeConfig>();
  EXPECT_EQ(c.port, 9000);
}

TEST(Remote, MatchesOracleAcrossBatchesAndInFlightRequests) {
  const auto reg = registry();
  MockQeServer server(reg);
  server.start();
  auto cfg = client_config(server.port());
  cfg.max_batch = 7;
  cfg.max_in_flight = 3;
  RemoteScorer remote(cfg);
  OracleScorer oracle(reg);
  const auto items = items_for(reg, 50, 4);
  const auto r = remote.score_batch(items);
  const auto o = oracle.score_batch(items);
  ASSERT_EQ(r.size(), o.size());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i].value(), o[i].value()) << i;
  EXPECT_EQ(server.requests(), 8u);  // ceil(50 / 7)
  EXPECT_EQ(remote.client().retries(), 0u);
  EXPECT_TRUE(remote.score_batch(std::span<const QeItem>{}).empty());
}

TEST(Remote, OutOfRangeScoreIsProtocolError) {
  const auto reg = registry();
  MockQeFaults f;
  f.fixed_score = 1.5;
  MockQeServer server(reg, f);
  server.start();
  RemoteQeClient client(client_config(server.port()));
  EXPECT_THROW(client.score_batch(items_for(reg, 2, 1)), ProtocolError);
}

TEST(Remote, MalformedOrMiscountedResponsesAreProtocolErrors) {
  const auto reg = registry();
  for (int variant = 0; variant < 3; ++variant) {
    MockQeFaults f;
    f.garbage_body = variant == 0;
    f.extra_scores = variant == 1 ? 1 : 0;
    f.wrong_request_id = variant == 2;
    MockQeServer server(reg, f);
    server.start();
    RemoteQeClient client(client_config(server.port()));
    EXPECT_THROW(client.score_batch(items_for(reg, 2, 1)), ProtocolError) << variant;
  }
}

TEST(Remote, DroppedConnectionIsRetriedOnce) {
  const auto reg = registry();
  MockQeFaults f;
  f.drop_connections = 1;
  MockQeServer server(reg, f);
  server.start();
  RemoteQeClient client(client_config(server.port()));
  OracleScorer oracle(reg);
  const auto items = items_for(reg, 5, 9);
  const auto r = client.score_batch(items);
  const auto o = oracle.score_batch(items);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i].value(), o[i].value());
  EXPECT_EQ(client.retries(), 1u);
  EXPECT_EQ(server.dropped_connections(), 1u);
  EXPECT_EQ(server.requests(), 1u);
}

TEST(Remote, RetryableStatusesThenSuccess) {
  const auto reg = registry();
  MockQeFaults f;
  f.statuses = {503, 429};
  MockQeServer server(reg, f);
  server.start();
  RemoteQeClient client(client_config(server.port()));
  EXPECT_EQ(client.score_batch(items_for(reg, 3, 2)).size(), 3u);
  EXPECT_EQ(client.retries(), 2u);
  EXPECT_EQ(server.requests(), 3u);
}

TEST(Remote, ClientErrorIsNotRetried) {
  const auto reg = registry();
  MockQeServer server(reg);
  server.start();
  RemoteQeClient client(client_config(server.port()));
  std::vector<QeItem> bad{{"nope", {4}, {2}}};
  EXPECT_THROW(client.score_batch(bad), ProtocolError);
  EXPECT_EQ(client.retries(), 0u);
}

TEST(Remote, ExhaustedRetriesAreTransportErrors) {
  const auto reg = registry();
  MockQeFaults f;
  f.statuses = {500, 500, 500};
  MockQeServer server(reg, f);
  server.start();
  auto cfg = client_config(server.port());
  cfg.max_retries = 2;
  RemoteQeClient client(cfg);
  EXPECT_THROW(client.score_batch(items_for(reg, 1, 1)), TransportError);
  EXPECT_EQ(client.retries(), 2u);

  // Nothing listening.
  const int port = server.port();
  server.stop();
  auto dead = client_config(port);
  dead.max_retries = 1;
  dead.timeout_ms = 500;
  RemoteQeClient gone(dead);
  EXPECT_THROW(gone.score_batch(items_for(reg, 1, 1)), TransportError);
}

TEST(Remote, ServerHandlesConcurrentClients) {
  const auto reg = registry();
  MockQeServer server(reg);
  server.start();
  OracleScorer oracle(reg);
  std::vector<std::thread> threads;
  std::atomic<int> mismatches{0};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      RemoteQeClient client(client_config(server.port()));
      const auto items = items_for(reg, 20, static_cast<std::uint64_t>(100 + t));
      const auto r = client.score_batch(items);
      const auto o = oracle.score_batch(items);
      for (std::size_t i = 0; i < r.size(); ++i) mismatches += r[i].value() != o[i].value();
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(mismatches.load(), 0);
}

}  // namespace
}  // namespace dqoforge
