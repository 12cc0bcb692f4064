// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "dqoforge/error.hpp"
#include "test_util.hpp"

namespace dqoforge {
namespace {

namespace fs = std::filesystem;
using testing::close_relative;

// Reference form: -log(1 / (1 + exp(-z))), fine for moderate z.
double naive_dpo(double lw, double rw, double ll, double rl, double beta) {
  const double z = beta * ((lw - rw) - (ll - rl));
  return -std::log(1.0 / (1.0 + std::exp(-z)));
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

std::vector<PreferencePair> toy_pairs(const LanguageRegistry& reg, int n, std::uint64_t seed) {
  std::vector<PreferencePair> out;
  RngStream rng(seed);
  for (int i = 0; i < n; ++i) {
    const auto& spec = reg.languages()[static_cast<std::size_t>(i) % reg.languages().size()];
    Tokens src = random_source(reg.layout(), rng, 0.2, 3, 6);
    Tokens good = ideal_translate(spec, src);
    Tokens bad = good;
    bad.erase(bad.begin());
    out.push_back({1, spec.id, src, good, bad, 1.0, 0.5, false});
  }
  return out;
}

DqoConfig smoke_config() {
  DqoConfig c = DqoConfig::desk();
  c.rounds = 1;
  c.epochs = 1;
  c.d = 4;
  c.k = 2;
  c.sampler.max_len = 24;
  c.langs = {"a0", "b0"};
  c.optim.lr = 1e-3;
  c.seed = 21;
  return c;
}

std::vector<Tokens> seed_sources(const LanguageRegistry& reg, int n) {
  std::vector<Tokens> out;
  RngStream rng(31);
  for (int i = 0; i < n; ++i) out.push_back(random_source(reg.layout(), rng, 0.2, 3, 6));
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dqoforge_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(DpoLoss, ReferencePolicyGivesLogTwo) {
  EXPECT_NEAR(dpo_loss(-3.0, -3.0, -7.5, -7.5, 0.5), std::log(2.0), 1e-12);
  EXPECT_NEAR(dpo_loss(0, 0, 0, 0, 0.1), 0.6931, 5e-5);
}

TEST(DpoLoss, ClosedFormCase) {
  // Winner log-ratio +1, loser -1, beta 0.5 -> z = 1.
  EXPECT_NEAR(dpo_loss(-1.0, -2.0, -3.0, -2.0, 0.5), 0.313262, 1e-6);
  EXPECT_NEAR(dpo_loss(-1.0, -2.0, -3.0, -2.0, 0.5), std::log1p(std::exp(-1.0)), 1e-15);
}

TEST(DpoLoss, SaturatesWithoutOverflow) {
  EXPECT_LT(dpo_loss(80.0, 0.0, 0.0, 0.0, 0.5), 1e-15);
  EXPECT_NEAR(dpo_loss(-800.0, 0.0, 0.0, 0.0, 1.0), 800.0, 1e-9);
  EXPECT_TRUE(std::isfinite(dpo_loss(1e6, 0, -1e6, 0, 1.0)));
}

TEST(DpoLoss, MatchesNaiveForm) {
  RngStream rng(1);
  for (int i = 0; i < 200; ++i) {
    const double lw = -10 * rng.uniform(), rw = -10 * rng.uniform(), ll = -10 * rng.uniform(),
                 rl = -10 * rng.uniform(), b = 0.05 + rng.uniform();
    EXPECT_NEAR(dpo_loss(lw, rw, ll, rl, b), naive_dpo(lw, rw, ll, rl, b), 1e-12);
  }
}

TEST(DpoLoss, GradientMatchesCentralDifferences) {
  RngStream rng(2);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    std::array<double, 4> x{-20 * rng.uniform(), -20 * rng.uniform(), -20 * rng.uniform(), -20 * rng.uniform()};
    const double beta = 0.1 + rng.uniform();
    const auto g = dpo_loss_grad(x[0], x[1], x[2], x[3], beta);
    for (int k = 0; k < 4; ++k) {
      auto up = x, dn = x;
      up[static_cast<std::size_t>(k)] += h;
      dn[static_cast<std::size_t>(k)] -= h;
      const double fd = (dpo_loss(up[0], up[1], up[2], up[3], beta) - dpo_loss(dn[0], dn[1], dn[2], dn[3], beta)) / (2 * h);
      EXPECT_TRUE(close_relative(g[static_cast<std::size_t>(k)], fd, 1e-6, 1e-10))
          << k << ": " << g[static_cast<std::size_t>(k)] << " vs " << fd;
    }
  }
}

TEST(DpoLoss, SymmetricShiftIsExactlyInvariant) {
  // Dyadic inputs keep every subtraction exact.
  for (double c : {0.25, -3.5, 17.0}) {
    EXPECT_EQ(dpo_loss(-4.5 + c, -5.25, -9.0 + c, -7.75, 0.5), dpo_loss(-4.5, -5.25, -9.0, -7.75, 0.5));
  }
  RngStream rng(3);
  for (int i = 0; i < 100; ++i) {
    const double lw = -rng.uniform() * 10, ll = -rng.uniform() * 10, c = rng.uniform() * 5;
    EXPECT_NEAR(dpo_loss(lw + c, -3.0, ll + c, -4.0, 0.5), dpo_loss(lw, -3.0, ll, -4.0, 0.5), 1e-12);
  }
}

TEST(DpoLoss, StrictlyDecreasingInMargin) {
  double prev = dpo_loss(-10, 0, 0, 0, 0.5);
  for (double m = -9.5; m <= 10; m += 0.5) {
    const double cur = dpo_loss(m, 0, 0, 0, 0.5);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(DpoLoss, GradientVanishesAsBetaShrinks) {
  double prev = 1e9;
  for (double beta : {1.0, 1e-1, 1e-2, 1e-3, 1e-6}) {
    const auto g = dpo_loss_grad(-2, -3, -5, -4, beta);
    double n = 0;
    for (double v : g) n += v * v;
    n = std::sqrt(n);
    EXPECT_LT(n, prev);
    prev = n;
  }
  EXPECT_LT(prev, 1e-5);
}

TEST(SftLoss, UniformModelAndPerTokenOracle) {
  ArchConfig a;
  a.d_model = 8;
  a.encoder_layers = 1;
  a.decoder_layers = 1;
  a.heads = 1;
  a.ffn_dim = 8;
  a.max_len = 8;
  const std::vector<double> zeros(16, 0.0);
  PolicyModel uniform = testing::constant_logit_model(a, zeros);
  const Tokens src{5, 6}, tgt{7, 8, Vocab::kEos};
  EXPECT_NEAR(sft_loss(sequence_log_prob(uniform, src, tgt)), 8.3178, 5e-5);
  EXPECT_NEAR(sft_loss(sequence_log_prob(uniform, src, tgt)), 3 * std::log(16.0), 1e-12);
  EXPECT_EQ(sft_loss(0.0), 0.0);

  a.vocab_size = 16;
  PolicyModel m(a, 4);
  double nll = 0.0;
  Tokens prefix;
  for (TokenId y : tgt) {
    const auto p = next_token_distribution(m, src, prefix);
    nll -= std::log(p[static_cast<std::size_t>(y)]);
    prefix.push_back(y);
  }
  EXPECT_NEAR(sft_loss(sequence_log_prob(m, src, tgt)), nll, 1e-10);
}

TEST(Schedule, LinearWarmupThenConstant) {
  OptimConfig c;
  c.lr = 1e-6;
  c.warmup_steps = 150;
  EXPECT_DOUBLE_EQ(c.lr_at(1), 1e-6 / 150);
  EXPECT_DOUBLE_EQ(c.lr_at(75), 1e-6 * 75 / 150);
  EXPECT_DOUBLE_EQ(c.lr_at(150), 1e-6);
  EXPECT_DOUBLE_EQ(c.lr_at(151), 1e-6);
  EXPECT_DOUBLE_EQ(c.lr_at(10000), 1e-6);
  c.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(c.lr_at(1), 1e-6);
}

TEST(Optimizer, ClipsGlobalNormAndSteps) {
  OptimConfig c;
  c.lr = 1.0;
  c.warmup_steps = 0;
  c.clip_norm = 10.0;
  Optimizer sgd(c, 2);
  std::vector<double> p{0.0, 0.0}, g{12.0, 16.0};  // norm 20
  EXPECT_DOUBLE_EQ(sgd.step(p, g, 1), 20.0);
  EXPECT_DOUBLE_EQ(p[0], -6.0);
  EXPECT_DOUBLE_EQ(p[1], -8.0);

  c.optimizer = OptimizerKind::kAdam;
  c.lr = 0.01;
  Optimizer adam(c, 2);
  p = {1.0, 1.0};
  g = {0.5, -2.0};
  adam.step(p, g, 1);
  // First bias-corrected Adam step is lr * g / (|g| + eps).
  EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p[1], 1.0 + 0.01, 1e-9);

  std::vector<double> bad{std::nan(""), 0.0};
  EXPECT_THROW(adam.step(p, bad, 2), NumericError);
}

TEST(Batching, RespectsTokenBudgetAndOrder) {
  std::vector<TrainExample> ex(6);
  const std::vector<std::size_t> lens{5, 5, 5, 30, 2, 2};
  for (std::size_t i = 0; i < ex.size(); ++i) ex[i].chosen.assign(lens[i], 2);
  const std::vector<std::size_t> order{0, 1, 2, 3, 4, 5};
  const auto b = pack_batches(ex, order, 12);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(b[1], (std::vector<std::size_t>{2}));
  EXPECT_EQ(b[2], (std::vector<std::size_t>{3}));  // over budget on its own
  EXPECT_EQ(b[3], (std::vector<std::size_t>{4, 5}));
}

TEST(BatchGradient, DpoThroughModelMatchesFiniteDifferences) {
  const auto reg = registry();
  PolicyModel policy(arch_for(reg), 9);
  PolicyModel ref_model(arch_for(reg), 10);
  const ReferenceModel ref(ref_model);
  const auto ex = make_pair_examples(toy_pairs(reg, 3, 4), reg, &ref);
  const std::vector<std::size_t> batch{0, 1, 2};
  const auto g = batch_loss_grad(policy, ex, batch, UpdateMode::kDpo, 0.5);
  std::vector<TrainExample> sub(ex.begin(), ex.end());
  EXPECT_NEAR(g.value, evaluate_loss(policy, sub, UpdateMode::kDpo, 0.5), 1e-10);
  RngStream pick(6);
  const double h = 1e-4;
  int checked = 0;
  for (int i = 0; i < 40; ++i) {
    const auto c = static_cast<std::size_t>(pick.below(policy.num_params()));
    PolicyModel up = policy, dn = policy;
    up.mutable_params()[c] += h;
    dn.mutable_params()[c] -= h;
    const double fd = (evaluate_loss(up, sub, UpdateMode::kDpo, 0.5) - evaluate_loss(dn, sub, UpdateMode::kDpo, 0.5)) / (2 * h);
    EXPECT_TRUE(close_relative(g.grad[c], fd, 1e-4, 1e-8)) << c << ": " << g.grad[c] << " vs " << fd;
    checked += std::abs(fd) > 1e-6;
  }
  EXPECT_GT(checked, 10);
}

TEST(TrainEpochs, FirstStepIsLogTwoAndLossFalls) {
  const auto reg = registry();
  PolicyModel policy(arch_for(reg), 11);
  const ReferenceModel ref(policy);
  const auto ex = make_pair_examples(toy_pairs(reg, 1, 5), reg, &ref);
  OptimConfig oc;
  oc.lr = 1e-2;
  oc.warmup_steps = 0;
  oc.optimizer = OptimizerKind::kAdam;
  const auto st = train_epochs(policy, ex, UpdateMode::kDpo, 0.5, oc, EpochPlan{30, 1, 3, 1});
  EXPECT_NEAR(st.steps.front().loss, std::log(2.0), 1e-12);
  EXPECT_LT(st.epoch_mean_loss.back(), std::log(2.0));
  EXPECT_LT(evaluate_loss(policy, ex, UpdateMode::kDpo, 0.5), 0.1);
}

TEST(TrainEpochs, RecordsWarmupLrAndGlobalSteps) {
  const auto reg = registry();
  PolicyModel policy(arch_for(reg), 12);
  const auto ex = make_pair_examples(toy_pairs(reg, 12, 6), reg, nullptr);
  OptimConfig oc;
  oc.lr = 1e-3;
  oc.warmup_steps = 4;
  oc.token_batch = 40;
  std::vector<StepRecord> seen;
  const auto st = train_epochs(policy, ex, UpdateMode::kSft, 0.5, oc, EpochPlan{2, 2, 3, 100},
                               [&](const StepRecord& r) { seen.push_back(r); });
  ASSERT_EQ(seen.size(), st.steps.size());
  for (std::size_t i = 0; i < seen.size(); ++i) {
    EXPECT_EQ(seen[i].step, 100 + static_cast<int>(i));
    EXPECT_DOUBLE_EQ(seen[i].lr, oc.lr_at(static_cast<int>(i) + 1));
    EXPECT_LE(seen[i].batch_tokens, 40u + 30u);
    EXPECT_EQ(seen[i].round, 2);
  }
}

TEST(TrainEpochs, ShuffleIsSeededPerEpoch) {
  const auto reg = registry();
  const auto ex = make_pair_examples(toy_pairs(reg, 10, 7), reg, nullptr);
  OptimConfig oc;
  oc.lr = 1e-3;
  oc.token_batch = 30;
  auto run = [&](std::uint64_t seed) {
    PolicyModel p(arch_for(reg), 13);
    train_epochs(p, ex, UpdateMode::kSft, 0.5, oc, EpochPlan{2, 1, seed, 1});
    return std::vector<double>(p.params().begin(), p.params().end());
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_NE(run(1), run(2));
}

TEST(TrainEpochs, NonFiniteLossAborts) {
  const auto reg = registry();
  PolicyModel policy(arch_for(reg), 14);
  auto ex = make_pair_examples(toy_pairs(reg, 2, 8), reg, nullptr);
  ex[1].ref_w = std::numeric_limits<double>::infinity();
  OptimConfig oc;
  oc.token_batch = 1;  // one example per batch
  try {
    train_epochs(policy, ex, UpdateMode::kDpo, 0.5, oc, EpochPlan{1, 3, 1, 7});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("round 3"), std::string::npos) << e.what();
  }
}

TEST(Config, JsonRoundTripAndValidation) {
  const DqoConfig paper = DqoConfig::paper();
  EXPECT_EQ(paper.rounds, 5);
  EXPECT_EQ(paper.epochs, 8);
  EXPECT_EQ(paper.d, 8000);
  EXPECT_EQ(paper.k, 64);
  EXPECT_DOUBLE_EQ(paper.optim.lr, 1e-6);
  EXPECT_DOUBLE_EQ(paper.beta, 0.5);
  EXPECT_DOUBLE_EQ(paper.eps, 0.005);
  EXPECT_EQ(paper.sampler.top_k, 40);
  EXPECT_DOUBLE_EQ(paper.sampler.top_p, 0.8);
  EXPECT_EQ(paper.optim.token_batch, 8192);
  EXPECT_EQ(paper.optim.warmup_steps, 150);
  EXPECT_DOUBLE_EQ(paper.optim.clip_norm, 10.0);
  EXPECT_EQ(paper.optim.optimizer, OptimizerKind::kSgd);
  EXPECT_EQ(paper.langs, (std::vector<std::string>{"de", "es", "hi", "ru", "zh"}));

  const DqoConfig desk = DqoConfig::desk();
  nlohmann::json j = desk;
  const DqoConfig back = j.get<DqoConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.d, 256);
  EXPECT_EQ(back.k, 16);

  j["epoch"] = 3;
  EXPECT_THROW(j.get<DqoConfig>(), ConfigError);
  j.erase("epoch");
  j["beta"] = 0.0;
  EXPECT_THROW(j.get<DqoConfig>(), ConfigError);
  j["beta"] = 0.5;
  j["optim"]["optimizer"] = "lion";
  EXPECT_THROW(j.get<DqoConfig>(), ConfigError);
  EXPECT_THROW(mode_from_name("ppo"), ConfigError);
}

TEST(RunDqo, SmokeRunWritesOneRoundRecord) {
  const auto reg = registry();
  PolicyModel base(arch_for(reg), 15);
  OracleScorer oracle(reg);
  const fs::path dir = fresh_dir("smoke");
  DqoRunOptions opt;
  opt.run_dir = dir;
  int dev_calls = 0;
  opt.dev = [&](int round, const PolicyModel&) {
    ++dev_calls;
    return nlohmann::json{{"round_seen", round}};
  };
  const auto res = run_dqo(base, seed_sources(reg, 10), reg, oracle, smoke_config(), UpdateMode::kDpo, opt);
  ASSERT_EQ(res.rounds.size(), 2u);
  EXPECT_EQ(dev_calls, 2);
  EXPECT_EQ(res.rounds[1].pairs.sources, 4u);
  EXPECT_EQ(res.rounds[1].pairs.candidates_scored, 12u);
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "pairs" / "round_1.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "round_1.ckpt"));
  std::ifstream rounds(dir / "rounds.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(rounds, line)) ++n;
  EXPECT_EQ(n, 2);
}

TEST(RunDqo, ReferenceStaysAtBaselineAcrossRounds) {
  const auto reg = registry();
  PolicyModel base(arch_for(reg), 16);
  OracleScorer oracle(reg);
  DqoConfig c = smoke_config();
  c.rounds = 2;
  c.d = 8;
  c.k = 4;
  c.optim.warmup_steps = 0;
  std::vector<StepRecord> steps;
  DqoRunOptions opt;
  opt.on_step = [&](const StepRecord& s) { steps.push_back(s); };
  run_dqo(base, seed_sources(reg, 20), reg, oracle, c, UpdateMode::kDpo, opt);
  ASSERT_FALSE(steps.empty());
  EXPECT_EQ(steps.front().round, 1);
  EXPECT_NEAR(steps.front().loss, std::log(2.0), 1e-12);  // policy == reference
  const auto second = std::find_if(steps.begin(), steps.end(), [](const StepRecord& s) { return s.round == 2; });
  ASSERT_NE(second, steps.end());
  EXPECT_GT(std::abs(second->loss - std::log(2.0)), 1e-6);  // not re-snapshotted
  EXPECT_EQ(second->step, (second - 1)->step + 1);
}

TEST(RunDqo, BitIdenticalAcrossRunsAndResumable) {
  const auto reg = registry();
  PolicyModel base(arch_for(reg), 17);
  OracleScorer oracle(reg);
  DqoConfig c = smoke_config();
  c.rounds = 2;
  c.d = 6;
  c.k = 3;
  const auto sources = seed_sources(reg, 20);

  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  DqoRunOptions oa, ob;
  oa.run_dir = a;
  ob.run_dir = b;
  const auto ra = run_dqo(base, sources, reg, oracle, c, UpdateMode::kDpo, oa);
  const auto rb = run_dqo(base, sources, reg, oracle, c, UpdateMode::kDpo, ob);
  EXPECT_EQ(std::vector<double>(ra.model.params().begin(), ra.model.params().end()),
            std::vector<double>(rb.model.params().begin(), rb.model.params().end()));
  EXPECT_EQ(slurp(a / "checkpoints" / "round_2.ckpt"), slurp(b / "checkpoints" / "round_2.ckpt"));
  EXPECT_EQ(slurp(a / "stats.jsonl"), slurp(b / "stats.jsonl"));

  // Simulate a crash during round 2: checkpoint gone, torn record.
  fs::remove(b / "checkpoints" / "round_2.ckpt");
  {
    std::string rounds = slurp(b / "rounds.jsonl");
    rounds.resize(rounds.rfind('{'));
    std::ofstream out(b / "rounds.jsonl", std::ios::trunc);
    out << rounds << "{\"round\":2,\"pai";
  }
  const auto rc = run_dqo(base, sources, reg, oracle, c, UpdateMode::kDpo, ob);
  EXPECT_EQ(slurp(a / "checkpoints" / "round_2.ckpt"), slurp(b / "checkpoints" / "round_2.ckpt"));
  EXPECT_EQ(slurp(a / "stats.jsonl"), slurp(b / "stats.jsonl"));
  ASSERT_EQ(rc.rounds.size(), 3u);

  // A different configuration cannot reuse the directory.
  c.beta = 0.25;
  EXPECT_THROW(run_dqo(base, sources, reg, oracle, c, UpdateMode::kDpo, ob), ConfigError);
}

TEST(RunDqo, RaftModeUsesChosenOnly) {
  const auto reg = registry();
  PolicyModel base(arch_for(reg), 18);
  OracleScorer oracle(reg);
  std::vector<StepRecord> steps;
  DqoRunOptions opt;
  opt.on_step = [&](const StepRecord& s) { steps.push_back(s); };
  const auto res = run_dqo(base, seed_sources(reg, 10), reg, oracle, smoke_config(), UpdateMode::kSft, opt);
  ASSERT_FALSE(steps.empty());
  EXPECT_GT(steps.front().loss, 1.0);  // a sequence NLL, not a log-sigmoid near ln 2
  EXPECT_NE(std::vector<double>(res.model.params().begin(), res.model.params().end()),
            std::vector<double>(base.params().begin(), base.params().end()));
}

}  // namespace
}  // namespace dqoforge
