// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dqoforge/error.hpp"
#include "json_util.hpp"
#include "log.hpp"

namespace dqoforge {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double dpo_loss(double lp_w, double ref_w, double lp_l, double ref_l, double beta) {
  const double z = beta * ((lp_w - ref_w) - (lp_l - ref_l));
  return softplus(-z);
}

std::array<double, 4> dpo_loss_grad(double lp_w, double ref_w, double lp_l, double ref_l, double beta) {
  const double z = beta * ((lp_w - ref_w) - (lp_l - ref_l));
  const double dz = -sigmoid(-z);
  return {dz * beta, -dz * beta, -dz * beta, dz * beta};
}

double sft_loss(double lp_w) { return -lp_w; }

std::string_view mode_name(UpdateMode m) { return m == UpdateMode::kDpo ? "dqo" : "raft"; }

UpdateMode mode_from_name(std::string_view name) {
  if (name == "dqo" || name == "dpo") return UpdateMode::kDpo;
  if (name == "raft" || name == "sft") return UpdateMode::kSft;
  throw ConfigError("unknown update mode '" + std::string(name) + "' (expected dqo or raft)");
}

std::string_view optimizer_name(OptimizerKind o) { return o == OptimizerKind::kSgd ? "sgd" : "adam"; }

// ---------------------------------------------------------------------------
// Configuration

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  if (token_batch < 1) throw ConfigError("token_batch must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
}

double OptimConfig::lr_at(int step) const {
  if (warmup_steps > 0 && step <= warmup_steps) return lr * static_cast<double>(step) / warmup_steps;
  return lr;
}

DqoConfig DqoConfig::paper() { return DqoConfig{}; }

DqoConfig DqoConfig::desk() {
  DqoConfig c;
  c.d = 256;
  c.k = 16;
  c.sampler = SamplerParams{40, 0.8, 32};
  c.optim.lr = 1e-4;
  c.optim.warmup_steps = 10;
  c.optim.token_batch = 512;
  c.optim.optimizer = OptimizerKind::kAdam;
  c.langs = {"a0", "b0", "c0"};
  return c;
}

void DqoConfig::validate() const {
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (d < 1) throw ConfigError("d must be >= 1");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(eps >= 0.0)) throw ConfigError("eps must be >= 0");
  if (langs.empty()) throw ConfigError("language set T is empty");
  try {
    sampler.validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  optim.validate();
}

void to_json(nlohmann::json& j, const SamplerParams& c) {
  j = {{"top_k", c.top_k}, {"top_p", c.top_p}, {"max_len", c.max_len}};
}

void from_json(const nlohmann::json& j, SamplerParams& c) {
  c = SamplerParams{};
  detail::for_keys(j, "sampler", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "top_k") c.top_k = v.get<int>();
    else if (k == "top_p") c.top_p = v.get<double>();
    else if (k == "max_len") c.max_len = v.get<int>();
    else return false;
    return true;
  });
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"lr", c.lr},
       {"warmup_steps", c.warmup_steps},
       {"clip_norm", c.clip_norm},
       {"token_batch", c.token_batch},
       {"optimizer", optimizer_name(c.optimizer)},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  c = OptimConfig{};
  detail::for_keys(j, "optim", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "lr") c.lr = v.get<double>();
    else if (k == "warmup_steps") c.warmup_steps = v.get<int>();
    else if (k == "clip_norm") c.clip_norm = v.get<double>();
    else if (k == "token_batch") c.token_batch = v.get<int>();
    else if (k == "optimizer") {
      const auto name = v.get<std::string>();
      if (name == "sgd") c.optimizer = OptimizerKind::kSgd;
      else if (name == "adam") c.optimizer = OptimizerKind::kAdam;
      else throw ConfigError("optim.optimizer must be sgd or adam");
    } else if (k == "adam_beta1") c.adam_beta1 = v.get<double>();
    else if (k == "adam_beta2") c.adam_beta2 = v.get<double>();
    else if (k == "adam_eps") c.adam_eps = v.get<double>();
    else return false;
    return true;
  });
  c.validate();
}

void to_json(nlohmann::json& j, const DqoConfig& c) {
  j = {{"rounds", c.rounds},   {"epochs", c.epochs},   {"d", c.d},
       {"k", c.k},             {"beta", c.beta},       {"eps", c.eps},
       {"sampler", c.sampler}, {"optim", c.optim},     {"seed", c.seed},
       {"langs", c.langs},     {"with_replacement", c.with_replacement}};
}

void from_json(const nlohmann::json& j, DqoConfig& c) {
  c = DqoConfig{};
  detail::for_keys(j, "dqo", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "rounds") c.rounds = v.get<int>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "d") c.d = v.get<int>();
    else if (k == "k") c.k = v.get<int>();
    else if (k == "beta") c.beta = v.get<double>();
    else if (k == "eps") c.eps = v.get<double>();
    else if (k == "sampler") c.sampler = v.get<SamplerParams>();
    else if (k == "optim") c.optim = v.get<OptimConfig>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "langs") c.langs = v.get<std::vector<std::string>>();
    else if (k == "with_replacement") c.with_replacement = v.get<bool>();
    else return false;
    return true;
  });
  c.validate();
}

// ---------------------------------------------------------------------------
// Examples and batching

std::vector<TrainExample> make_pair_examples(const std::vector<PreferencePair>& pairs,
                                             const LanguageRegistry& registry, const ReferenceModel* ref) {
  std::vector<TrainExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    TrainExample e;
    e.input = encoder_input(registry.at(p.lang), p.source);
    e.chosen = p.chosen;
    e.rejected = p.rejected;
    if (ref) {
      e.ref_w = sequence_log_prob(*ref, e.input, e.chosen);
      e.ref_l = sequence_log_prob(*ref, e.input, e.rejected);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<TrainExample> make_corpus_examples(const ParallelCorpus& corpus, const LanguageRegistry& registry) {
  std::vector<TrainExample> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus) {
    TrainExample e;
    e.input = encoder_input(registry.at(r.lang), r.source);
    e.chosen = r.target;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::vector<std::size_t>> pack_batches(const std::vector<TrainExample>& examples,
                                                   std::span<const std::size_t> order, int token_batch) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t tokens = 0;
  const auto budget = static_cast<std::size_t>(token_batch);
  for (std::size_t idx : order) {
    const std::size_t t = examples.at(idx).tokens();
    if (!cur.empty() && tokens + t > budget) {
      batches.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
    cur.push_back(idx);
    tokens += t;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = {{"round", r.round},
       {"epoch", r.epoch},
       {"step", r.step},
       {"loss", r.loss},
       {"lr", r.lr},
       {"grad_norm", r.grad_norm},
       {"batch_examples", r.batch_examples},
       {"batch_tokens", r.batch_tokens}};
}

// ---------------------------------------------------------------------------
// Optimization

Optimizer::Optimizer(const OptimConfig& config, std::size_t num_params) : config_(config) {
  config_.validate();
  if (config_.optimizer == OptimizerKind::kAdam) {
    m_.assign(num_params, 0.0);
    v_.assign(num_params, 0.0);
  }
}

double Optimizer::step(std::span<double> params, std::span<double> grad, int local_step) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("optimizer", "non-finite gradient norm");
  if (norm > config_.clip_norm) {
    const double s = config_.clip_norm / norm;
    for (double& g : grad) g *= s;
  }
  const double lr = config_.lr_at(local_step);
  if (config_.optimizer == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
  } else {
    ++t_;
    const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.adam_eps);
    }
  }
  return norm;
}

namespace {

ScalarBuilder batch_objective(const std::vector<TrainExample>& examples, const std::vector<std::size_t>& batch,
                              UpdateMode mode, double beta) {
  return [&examples, &batch, mode, beta](ad::Tape& t, std::span<const ad::Var> lp) {
    ad::Var total{};
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TrainExample& e = examples[batch[i]];
      ad::Var term{};
      if (mode == UpdateMode::kDpo) {
        ad::Matrix ref(1, 1);
        ref(0, 0) = e.ref_w - e.ref_l;
        const ad::Var margin = t.sub(t.sub(lp[2 * i], lp[2 * i + 1]), t.constant(ref, "ref-margin"));
        term = t.scale(t.log_sigmoid(t.scale(margin, beta)), -1.0);
      } else {
        term = t.scale(lp[i], -1.0);
      }
      total = i == 0 ? term : t.add(total, term);
    }
    return t.scale(total, 1.0 / static_cast<double>(batch.size()));
  };
}

}  // namespace

ScalarGrad batch_loss_grad(const PolicyModel& model, const std::vector<TrainExample>& examples,
                           const std::vector<std::size_t>& batch, UpdateMode mode, double beta) {
  if (batch.empty()) throw InputError("empty batch");
  std::vector<LogProbQuery> queries;
  for (std::size_t idx : batch) {
    const TrainExample& e = examples.at(idx);
    queries.push_back({e.input, e.chosen});
    if (mode == UpdateMode::kDpo) queries.push_back({e.input, e.rejected});
  }
  return grad_of_scalar(model, queries, batch_objective(examples, batch, mode, beta));
}

TrainStats train_epochs(PolicyModel& model, const std::vector<TrainExample>& examples, UpdateMode mode,
                        double beta, const OptimConfig& optim, const EpochPlan& plan, const StepCallback& on_step,
                        const EpochCallback& on_epoch) {
  if (examples.empty()) throw InputError("no training examples");
  if (plan.epochs < 1) throw InputError("epochs must be >= 1");
  if (mode == UpdateMode::kDpo && !(beta > 0.0)) throw InputError("beta must be > 0");
  const auto t0 = std::chrono::steady_clock::now();
  Optimizer opt(optim, model.num_params());
  TrainStats stats;
  int local = 0;
  int global = plan.first_global_step;
  std::vector<std::size_t> order(examples.size());
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle(plan.seed, {hash_name("epoch-order"), static_cast<std::uint64_t>(plan.round),
                                  static_cast<std::uint64_t>(epoch)});
    shuffle.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_examples = 0;
    for (const auto& batch : pack_batches(examples, order, optim.token_batch)) {
      ++local;
      std::size_t tokens = 0;
      for (std::size_t idx : batch) tokens += examples[idx].tokens();
      StepRecord rec{plan.round, epoch, global, 0.0, optim.lr_at(local), 0.0, batch.size(), tokens};
      try {
        ScalarGrad g = batch_loss_grad(model, examples, batch, mode, beta);
        rec.loss = g.value;
        if (!std::isfinite(rec.loss)) throw NumericError("loss", "non-finite loss");
        rec.grad_norm = opt.step(model.mutable_params(), g.grad, local);
      } catch (const NumericError& e) {
        throw TrainingError("training diverged at round " + std::to_string(plan.round) + ", epoch " +
                            std::to_string(epoch) + ", step " + std::to_string(global) + ": " + e.what());
      }
      epoch_loss += rec.loss * static_cast<double>(batch.size());
      epoch_examples += batch.size();
      stats.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++global;
    }
    stats.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_examples));
    if (on_epoch && !on_epoch(epoch, stats.epoch_mean_loss.back())) break;
  }
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

double evaluate_loss(const PolicyModel& model, const std::vector<TrainExample>& examples, UpdateMode mode,
                     double beta) {
  if (examples.empty()) throw InputError("no examples");
  double total = 0.0;
  for (const auto& e : examples) {
    const double lw = sequence_log_prob(model, e.input, e.chosen);
    total += mode == UpdateMode::kDpo ? dpo_loss(lw, e.ref_w, sequence_log_prob(model, e.input, e.rejected), e.ref_l, beta)
                                      : sft_loss(lw);
  }
  return total / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Driver

void to_json(nlohmann::json& j, const RoundRecord& r) {
  j = {{"round", r.round},
       {"pairs", r.pairs},
       {"train_loss_first", r.train_loss_first},
       {"train_loss_last", r.train_loss_last},
       {"steps", r.steps},
       {"seconds", r.seconds},
       {"dev", r.dev}};
}

void from_json(const nlohmann::json& j, RoundRecord& r) {
  r = RoundRecord{};
  r.round = j.at("round").get<int>();
  const auto& p = j.at("pairs");
  r.pairs.round = p.value("round", r.round);
  r.pairs.sources = p.value("sources", std::size_t{0});
  r.pairs.candidates_scored = p.value("candidates_scored", std::size_t{0});
  r.pairs.pairs = p.value("pairs", std::size_t{0});
  r.pairs.dropped_no_loser = p.value("dropped_no_loser", std::size_t{0});
  r.pairs.dropped_identical = p.value("dropped_identical", std::size_t{0});
  r.pairs.greedy_winners = p.value("greedy_winners", std::size_t{0});
  r.pairs.mean_best_score = p.value("mean_best_score", 0.0);
  r.pairs.mean_greedy_score = p.value("mean_greedy_score", 0.0);
  r.pairs.mean_sample_score = p.value("mean_sample_score", 0.0);
  r.train_loss_first = j.value("train_loss_first", 0.0);
  r.train_loss_last = j.value("train_loss_last", 0.0);
  r.steps = j.value("steps", 0);
  r.seconds = j.value("seconds", 0.0);
  r.dev = j.value("dev", nlohmann::json::object());
}

namespace {

namespace fs = std::filesystem;

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception&) {
      break;  // a torn final line from an interrupted run
    }
  }
  return out;
}

void write_jsonl(const fs::path& path, const std::vector<nlohmann::json>& lines) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    for (const auto& l : lines) out << l.dump() << '\n';
  }
  fs::rename(tmp, path);
}

void append_jsonl(const fs::path& path, const nlohmann::json& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << line.dump() << '\n';
}

fs::path checkpoint_path(const fs::path& dir, int round) {
  return dir / "checkpoints" / ("round_" + std::to_string(round) + ".ckpt");
}

}  // namespace

DqoResult run_dqo(const PolicyModel& baseline, const std::vector<Tokens>& seed_sources,
                  const LanguageRegistry& registry, QeScorer& scorer, const DqoConfig& config, UpdateMode mode,
                  const DqoRunOptions& options) {
  config.validate();
  for (const auto& l : config.langs) {
    if (!registry.contains(l)) throw ConfigError("language '" + l + "' in T is not in the registry");
  }
  const ReferenceModel ref(baseline);
  DqoResult result{baseline, {}};
  int start_round = 1;
  int next_step = 1;

  nlohmann::json config_snapshot = config;
  config_snapshot["mode"] = mode_name(mode);
  std::optional<fs::path> dir = options.run_dir;
  if (dir) {
    fs::create_directories(*dir / "checkpoints");
    fs::create_directories(*dir / "pairs");
    const fs::path cfg_path = *dir / "config.json";
    if (fs::exists(cfg_path)) {
      std::ifstream in(cfg_path);
      nlohmann::json existing;
      try {
        in >> existing;
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(cfg_path.string() + ": " + e.what());
      }
      if (existing != config_snapshot) {
        throw ConfigError("run directory " + dir->string() + " holds a different configuration");
      }
      // Resume from the last round whose checkpoint and record both exist.
      std::vector<RoundRecord> kept;
      for (const auto& j : read_jsonl(*dir / "rounds.jsonl")) {
        RoundRecord r = j.get<RoundRecord>();
        if (r.round != static_cast<int>(kept.size())) break;
        if (r.round > 0 && !fs::exists(checkpoint_path(*dir, r.round))) break;
        kept.push_back(std::move(r));
      }
      if (!kept.empty() && kept.back().round > 0) {
        Checkpoint ck = load_checkpoint(checkpoint_path(*dir, kept.back().round));
        if (!(ck.model.arch() == baseline.arch())) throw ConfigError("resumed checkpoint has a different architecture");
        result.model = std::move(ck.model);
      }
      std::vector<nlohmann::json> rounds_json;
      for (const auto& r : kept) rounds_json.push_back(r);
      write_jsonl(*dir / "rounds.jsonl", rounds_json);
      const int last = kept.empty() ? -1 : kept.back().round;
      std::vector<nlohmann::json> steps;
      for (const auto& s : read_jsonl(*dir / "stats.jsonl")) {
        if (s.value("round", 0) <= last) {
          next_step = std::max(next_step, s.value("step", 0) + 1);
          steps.push_back(s);
        }
      }
      write_jsonl(*dir / "stats.jsonl", steps);
      result.rounds = std::move(kept);
      start_round = last + 1;
      if (start_round > 1) detail::log()->info("resuming {} from round {}", dir->string(), start_round);
    } else {
      std::ofstream out(cfg_path);
      out << config_snapshot.dump(2) << '\n';
      write_jsonl(*dir / "rounds.jsonl", {});
      write_jsonl(*dir / "stats.jsonl", {});
    }
  }

  if (result.rounds.empty()) {
    RoundRecord base;
    if (options.dev) base.dev = options.dev(0, baseline);
    if (dir) append_jsonl(*dir / "rounds.jsonl", base);
    result.rounds.push_back(std::move(base));
    start_round = 1;
  }

  for (int round = start_round; round <= config.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string stage = "sampling";
    try {
      RoundDatasetConfig rc;
      rc.langs = config.langs;
      rc.d = config.d;
      rc.k = config.k;
      rc.eps = config.eps;
      rc.sampler = config.sampler;
      rc.with_replacement = config.with_replacement;
      rc.seed = config.seed;
      rc.round = round;
      RoundDataset ds = build_round_dataset(seed_sources, registry, result.model, scorer, rc);
      if (dir) save_pairs(*dir / "pairs" / ("round_" + std::to_string(round) + ".jsonl"), ds.pairs);

      RoundRecord rec;
      rec.round = round;
      rec.pairs = ds.stats;
      if (ds.pairs.empty()) {
        detail::log()->warn("round {}: no preference pairs; parameters unchanged", round);
      } else {
        stage = "training";
        const auto examples = make_pair_examples(ds.pairs, registry, mode == UpdateMode::kDpo ? &ref : nullptr);
        EpochPlan plan{config.epochs, round, config.seed, next_step};
        const StepCallback on_step = [&](const StepRecord& s) {
          if (dir) append_jsonl(*dir / "stats.jsonl", s);
          if (options.on_step) options.on_step(s);
        };
        TrainStats ts = train_epochs(result.model, examples, mode, config.beta, config.optim, plan, on_step);
        rec.steps = static_cast<int>(ts.steps.size());
        rec.train_loss_first = ts.epoch_mean_loss.front();
        rec.train_loss_last = ts.epoch_mean_loss.back();
        next_step += rec.steps;
      }
      stage = "checkpoint";
      if (dir) {
        save_checkpoint(checkpoint_path(*dir, round), result.model,
                        {{"round", round}, {"mode", mode_name(mode)}, {"seed", config.seed}});
      }
      stage = "evaluation";
      if (options.dev) rec.dev = options.dev(round, result.model);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (dir) append_jsonl(*dir / "rounds.jsonl", rec);
      detail::log()->info("round {} done: {} pairs, {} steps, loss {:.4f} -> {:.4f}, {:.1f}s", round,
                          rec.pairs.pairs, rec.steps, rec.train_loss_first, rec.train_loss_last, rec.seconds);
      result.rounds.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw TrainingError("round " + std::to_string(round) + ", " + stage + ": " + e.what());
    }
  }
  return result;
}

}  // namespace dqoforge
