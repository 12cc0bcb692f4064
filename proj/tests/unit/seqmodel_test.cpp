// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/seqmodel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "dqoforge/error.hpp"
#include "test_util.hpp"

namespace dqoforge {
namespace {

using testing::close_relative;

ArchConfig tiny_arch(int vocab = 12) {
  ArchConfig a;
  a.vocab_size = vocab;
  a.d_model = 8;
  a.encoder_layers = 1;
  a.decoder_layers = 1;
  a.heads = 1;
  a.cross_heads = 1;
  a.ffn_dim = 16;
  a.max_len = 16;
  return a;
}

ArchConfig small_arch() {
  ArchConfig a;
  a.vocab_size = 14;
  a.d_model = 16;
  a.encoder_layers = 2;
  a.decoder_layers = 1;
  a.heads = 2;
  a.cross_heads = 1;
  a.ffn_dim = 32;
  a.max_len = 16;
  return a;
}

TEST(SeqModel, ReferenceArchitectureStaysUnder150kParameters) {
  PolicyModel m(ArchConfig{}, 1);
  EXPECT_LE(m.num_params(), 150000u);
  EXPECT_GT(m.num_params(), 100000u);
}

TEST(SeqModel, UniformModelLogProbIsLengthTimesLogV) {
  std::vector<double> zeros(16, 0.0);
  auto m = testing::constant_logit_model(tiny_arch(), zeros);
  const Tokens src{3, 4, 5};
  const Tokens tgt{6, 7, Vocab::kEos};
  EXPECT_NEAR(sequence_log_prob(m, src, tgt), -3.0 * std::log(16.0), 1e-12);
  EXPECT_NEAR(sequence_log_prob(m, src, tgt), -8.3178, 5e-5);
}

TEST(SeqModel, EmptyOrUnterminatedTargetIsInputError) {
  PolicyModel m(tiny_arch(), 3);
  const Tokens src{3, 4};
  EXPECT_THROW(sequence_log_prob(m, src, Tokens{}), InputError);
  EXPECT_THROW(sequence_log_prob(m, src, Tokens{3, 4}), InputError);
}

TEST(SeqModel, UnknownTokenIsInputError) {
  PolicyModel m(tiny_arch(), 3);
  EXPECT_THROW(sequence_log_prob(m, Tokens{3, 99}, Tokens{Vocab::kEos}), InputError);
  EXPECT_THROW(sequence_log_prob(m, Tokens{3}, Tokens{-1, Vocab::kEos}), InputError);
  EXPECT_THROW(greedy_decode(m, Tokens{}), InputError);
}

TEST(SeqModel, HandSetLogitsMatchPerStepLogSoftmax) {
  // Two content tokens (ids 3 and 4) dominate; the decode is three steps long.
  std::vector<double> bias(8, -1.0);
  bias[3] = 2.0;
  bias[4] = 1.5;
  bias[Vocab::kEos] = 0.5;
  auto m = testing::constant_logit_model(tiny_arch(), bias);
  const Tokens tgt{3, 4, Vocab::kEos};
  double hand = 0.0;
  for (TokenId y : tgt) hand += testing::log_softmax(bias, static_cast<std::size_t>(y));
  EXPECT_NEAR(sequence_log_prob(m, Tokens{5, 6}, tgt), hand, 1e-12);
}

TEST(SeqModel, TapeAndInferencePathsAgree) {
  PolicyModel m(small_arch(), 11);
  const Tokens src{3, 7, 8, 9, Vocab::kEos};
  const Tokens tgt{10, 4, 13, Vocab::kEos};
  const LogProbQuery q{src, tgt};
  auto r = grad_of_scalar(m, std::span<const LogProbQuery>(&q, 1),
                          [](ad::Tape&, std::span<const ad::Var> lps) { return lps[0]; });
  EXPECT_NEAR(r.value, sequence_log_prob(m, src, tgt), 1e-10);
}

TEST(SeqModel, TruncatedEventMassMatchesEnumeration) {
  // exp(log p) summed over every target of length <= 2 equals
  // p(EOS) + sum_t p(t) p(EOS | t), computed from step distributions.
  PolicyModel m(tiny_arch(8), 5);
  const Tokens src{3, 4, 5};
  double via_log_prob = std::exp(sequence_log_prob(m, src, Tokens{Vocab::kEos}));
  const auto first = next_token_distribution(m, src, Tokens{});
  double via_steps = first[Vocab::kEos];
  for (TokenId t = 0; t < 8; ++t) {
    via_log_prob += std::exp(sequence_log_prob(m, src, Tokens{t, Vocab::kEos}));
    const Tokens prefix{t};
    via_steps += first[static_cast<std::size_t>(t)] * next_token_distribution(m, src, prefix)[Vocab::kEos];
  }
  EXPECT_NEAR(via_log_prob, via_steps, 1e-6);
  EXPECT_LE(via_log_prob, 1.0);
}

TEST(SeqModel, StepDistributionIsNormalized) {
  PolicyModel m(small_arch(), 2);
  const auto p = next_token_distribution(m, Tokens{3, 4}, Tokens{5, 6});
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
}

TEST(Greedy, FollowsHandSteppedArgmaxChain) {
  PolicyModel m(small_arch(), 21);
  const Tokens src{3, 9, 4, Vocab::kEos};
  // Independent oracle: recompute the full step distribution for every prefix.
  Tokens chain;
  while (static_cast<int>(chain.size()) < 15) {
    const auto p = next_token_distribution(m, src, chain);
    const auto best = static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
    chain.push_back(best);
    if (best == Vocab::kEos) break;
  }
  if (chain.back() != Vocab::kEos) chain.push_back(Vocab::kEos);
  EXPECT_EQ(greedy_decode(m, src, 16), chain);
}

TEST(Greedy, UniformLogitsRepeatLowestIdUntilMaxLength) {
  std::vector<double> zeros(10, 0.0);
  auto m = testing::constant_logit_model(tiny_arch(), zeros);
  const Tokens out = greedy_decode(m, Tokens{3, 4}, 6);
  EXPECT_EQ(out, (Tokens{0, 0, 0, 0, 0, Vocab::kEos}));
}

TEST(Greedy, IsDeterministic) {
  PolicyModel m(small_arch(), 8);
  const Tokens src{5, 6, 7};
  EXPECT_EQ(greedy_decode(m, src), greedy_decode(m, src));
}

TEST(Greedy, BeatsEveryFirstStepPerturbation) {
  PolicyModel m(small_arch(), 13);
  const Tokens src{4, 5, 6, Vocab::kEos};
  const Tokens g = greedy_decode(m, src, 16);
  const double best = sequence_log_prob(m, src, g);
  // Local argmax property at the first decode step: swapping the first token
  // for any other id cannot raise the first-step term.
  const auto lp = token_log_probs(m, src, g);
  for (TokenId t = 0; t < m.arch().vocab_size; ++t) {
    if (t == g[0]) continue;
    Tokens alt = g;
    alt[0] = t;
    if (t == Vocab::kEos) alt = Tokens{Vocab::kEos};
    EXPECT_GE(lp[0], token_log_probs(m, src, alt)[0]);
  }
  EXPECT_TRUE(std::isfinite(best));
}

TEST(TopKTopP, TwoTokensSurviveKTwo) {
  const std::vector<double> p{0.5, 0.3, 0.2};
  const auto f = top_k_top_p_filter(p, 2, 0.8);
  EXPECT_NEAR(f[0], 0.625, 1e-12);
  EXPECT_NEAR(f[1], 0.375, 1e-12);
  EXPECT_EQ(f[2], 0.0);
}

TEST(TopKTopP, NucleusIsShortestPrefixReachingP) {
  const std::vector<double> p{0.5, 0.3, 0.2};
  // Mass 0.5 does not reach 0.6, so the second token is needed.
  const auto f = top_k_top_p_filter(p, 3, 0.6);
  EXPECT_NEAR(f[0], 0.5 / 0.8, 1e-12);
  EXPECT_NEAR(f[1], 0.3 / 0.8, 1e-12);
  EXPECT_EQ(f[2], 0.0);
  // The boundary is inclusive: mass exactly P stops the prefix.
  const auto g = top_k_top_p_filter(p, 3, 0.5);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1] + g[2], 0.0);
}

TEST(TopKTopP, TiesBreakTowardLowerId) {
  const std::vector<double> p{0.1, 0.3, 0.3, 0.3};
  const auto f = top_k_top_p_filter(p, 2, 1.0);
  EXPECT_EQ(f[1], 0.5);
  EXPECT_EQ(f[2], 0.5);
  EXPECT_EQ(f[3], 0.0);
}

TEST(TopKTopP, RejectsInvalidParams) {
  const std::vector<double> p{0.5, 0.5};
  EXPECT_THROW(top_k_top_p_filter(p, 0, 0.5), InputError);
  EXPECT_THROW(top_k_top_p_filter(p, 1, 0.0), InputError);
  EXPECT_THROW(top_k_top_p_filter(p, 1, 1.5), InputError);
}

TEST(Sampling, TopOneEqualsGreedy) {
  PolicyModel m(small_arch(), 17);
  const Tokens src{3, 8, 12, Vocab::kEos};
  for (std::uint64_t s = 0; s < 5; ++s) {
    RngStream rng(s, {1});
    EXPECT_EQ(sample_top_k_top_p(m, src, SamplerParams{1, 0.3, 16}, rng), greedy_decode(m, src, 16));
  }
}

TEST(Sampling, ReproducibleGivenStream) {
  PolicyModel m(small_arch(), 17);
  const Tokens src{3, 8, 12};
  RngStream a(42, {1, 2, 3});
  RngStream b(42, {1, 2, 3});
  EXPECT_EQ(sample_top_k_top_p(m, src, SamplerParams{5, 0.9, 16}, a),
            sample_top_k_top_p(m, src, SamplerParams{5, 0.9, 16}, b));
}

TEST(Sampling, SharedEncoderCandidatesMatchSeparateDecodes) {
  PolicyModel m(small_arch(), 23);
  const Tokens src{3, 8, 12, 5, Vocab::kEos};
  const SamplerParams params{6, 0.95, 12};
  std::vector<RngStream> streams;
  for (std::uint64_t j = 0; j < 4; ++j) streams.emplace_back(9, std::initializer_list<std::uint64_t>{j});
  const auto all = decode_candidates(m, src, params, streams);
  ASSERT_EQ(all.size(), 5u);
  EXPECT_EQ(all[0], greedy_decode(m, src, 12));
  for (std::uint64_t j = 0; j < 4; ++j) {
    RngStream rng(9, {j});
    EXPECT_EQ(all[j + 1], sample_top_k_top_p(m, src, params, rng));
  }
}

TEST(Sampling, UnfilteredFrequenciesMatchSoftmax) {
  // Chi-square goodness of fit for the first decode step, K = V, P = 1.
  ArchConfig a = small_arch();
  PolicyModel m(a, 23);
  // Flatten the distribution a little so every cell has a usable count.
  for (double& w : m.mutable_params()) w *= 0.3;
  const Tokens src{3, 4, 5};
  const auto p = next_token_distribution(m, src, Tokens{});
  const int n = 10000;
  std::vector<int> counts(p.size(), 0);
  for (int i = 0; i < n; ++i) {
    RngStream rng(99, {static_cast<std::uint64_t>(i)});
    const Tokens out = sample_top_k_top_p(m, src, SamplerParams{a.vocab_size, 1.0, 2}, rng);
    ++counts[static_cast<std::size_t>(out[0])];
  }
  double chi2 = 0.0;
  int cells = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = n * p[i];
    if (e < 5.0) continue;
    chi2 += (counts[i] - e) * (counts[i] - e) / e;
    ++cells;
  }
  ASSERT_GE(cells, 5);
  // 99.9th percentile of chi-square with 13 degrees of freedom is 34.5; fewer
  // cells only lower the critical value's requirement.
  EXPECT_LT(chi2, 34.53) << "cells=" << cells;
}

struct GradCase {
  const char* name;
  ArchConfig arch;
};

class GradCheck : public ::testing::TestWithParam<GradCase> {};

TEST_P(GradCheck, MatchesCentralFiniteDifferences) {
  const ArchConfig a = GetParam().arch;
  PolicyModel m(a, 31);
  const Tokens src{3, 5, 6, 7, Vocab::kEos};
  const Tokens tgt{4, 6, 3, Vocab::kEos};
  const LogProbQuery q{src, tgt};
  const auto r = grad_of_scalar(m, std::span<const LogProbQuery>(&q, 1),
                                [](ad::Tape&, std::span<const ad::Var> lps) { return lps[0]; });
  ASSERT_EQ(r.grad.size(), m.num_params());
  RngStream rng(7, {});
  const double h = 1e-4;
  int nonzero = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto i = static_cast<std::size_t>(rng.below(m.num_params()));
    PolicyModel plus = m;
    PolicyModel minus = m;
    plus.mutable_params()[i] += h;
    minus.mutable_params()[i] -= h;
    const double fd = (sequence_log_prob(plus, src, tgt) - sequence_log_prob(minus, src, tgt)) / (2 * h);
    EXPECT_TRUE(close_relative(r.grad[i], fd, 1e-4))
        << "coordinate " << i << ": analytic " << r.grad[i] << " vs fd " << fd;
    if (std::abs(fd) > 1e-6) ++nonzero;
  }
  EXPECT_GT(nonzero, 0);
}

INSTANTIATE_TEST_SUITE_P(Architectures, GradCheck,
                         ::testing::Values(GradCase{"tiny", tiny_arch()}, GradCase{"small", small_arch()},
                                           GradCase{"reference", ArchConfig{}}),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(GradOfScalar, ConstantFunctionHasZeroGradient) {
  PolicyModel m(small_arch(), 3);
  const Tokens src{3, 4};
  const Tokens tgt{5, Vocab::kEos};
  const LogProbQuery q{src, tgt};
  const auto r = grad_of_scalar(m, std::span<const LogProbQuery>(&q, 1), [](ad::Tape& t, std::span<const ad::Var>) {
    return t.constant(ad::Matrix::Constant(1, 1, 2.5));
  });
  EXPECT_EQ(r.value, 2.5);
  for (double g : r.grad) EXPECT_EQ(g, 0.0);
}

TEST(GradOfScalar, GradientOfSumIsSumOfGradients) {
  PolicyModel m(small_arch(), 3);
  const Tokens s1{3, 4}, t1{5, 6, Vocab::kEos}, s2{7, 8, 9}, t2{10, Vocab::kEos};
  const std::vector<LogProbQuery> both{{s1, t1}, {s2, t2}};
  auto first = [](ad::Tape&, std::span<const ad::Var> v) { return v[0]; };
  const auto sum = grad_of_scalar(m, both, [](ad::Tape& t, std::span<const ad::Var> v) { return t.add(v[0], v[1]); });
  const auto g1 = grad_of_scalar(m, std::span<const LogProbQuery>(both.data(), 1), first);
  const auto g2 = grad_of_scalar(m, std::span<const LogProbQuery>(both.data() + 1, 1), first);
  for (std::size_t i = 0; i < sum.grad.size(); ++i) EXPECT_NEAR(sum.grad[i], g1.grad[i] + g2.grad[i], 1e-12);
}

TEST(Checkpoint, ResaveIsByteIdentical) {
  PolicyModel m(small_arch(), 77);
  std::ostringstream first;
  write_checkpoint(first, m, {{"round", 2}});
  std::istringstream in(first.str());
  const Checkpoint c = read_checkpoint(in);
  EXPECT_EQ(c.model.arch(), m.arch());
  EXPECT_EQ(c.meta.at("round"), 2);
  std::ostringstream second;
  write_checkpoint(second, c.model, c.meta);
  EXPECT_EQ(first.str(), second.str());
}

TEST(Checkpoint, RejectsTruncatedAndForeignFiles) {
  PolicyModel m(tiny_arch(), 1);
  std::ostringstream out;
  write_checkpoint(out, m);
  std::string bytes = out.str();
  std::istringstream truncated(bytes.substr(0, bytes.size() - 8));
  EXPECT_THROW(read_checkpoint(truncated), InputError);
  std::istringstream foreign("hello\n{}\n");
  EXPECT_THROW(read_checkpoint(foreign), InputError);
}

TEST(ReferenceModel, IsAFrozenCopy) {
  PolicyModel m(tiny_arch(), 4);
  ReferenceModel ref(m);
  const Tokens src{3, 4};
  const Tokens tgt{5, Vocab::kEos};
  const double before = sequence_log_prob(ref, src, tgt);
  for (double& w : m.mutable_params()) w += 0.1;
  EXPECT_EQ(sequence_log_prob(ref, src, tgt), before);
  EXPECT_NE(sequence_log_prob(m, src, tgt), before);
  EXPECT_EQ(ref.arch(), m.arch());
}

}  // namespace
}  // namespace dqoforge
