// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Preference and supervised updates, and the multi-round driver.
//
// Sign convention: the optimized DPO objective is the *negated* log-sigmoid,
//   loss = -log sigma(beta * [(lp_w - ref_w) - (lp_l - ref_l)]),
// so that minimizing it raises the chosen output relative to the rejected
// one. Writing the objective without the minus sign and minimizing it would
// push the policy toward the rejected outputs.

#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/prefdata.hpp"
#include "dqoforge/qescore.hpp"
#include "dqoforge/seqmodel.hpp"
#include "dqoforge/synthdata.hpp"

namespace dqoforge {

/// -log sigma(beta * ((lp_w - ref_w) - (lp_l - ref_l))), via a stable softplus.
double dpo_loss(double lp_w, double ref_w, double lp_l, double ref_l, double beta);

/// d loss / d (lp_w, ref_w, lp_l, ref_l).
std::array<double, 4> dpo_loss_grad(double lp_w, double ref_w, double lp_l, double ref_l, double beta);

/// Negative log-likelihood of the chosen output.
double sft_loss(double lp_w);

enum class UpdateMode { kDpo, kSft };
enum class OptimizerKind { kSgd, kAdam };

std::string_view mode_name(UpdateMode m);
UpdateMode mode_from_name(std::string_view name);  // "dqo"/"dpo" or "raft"/"sft"
std::string_view optimizer_name(OptimizerKind o);

/// Everything one call to train_epochs needs.
struct OptimConfig {
  double lr = 1e-6;
  int warmup_steps = 150;
  double clip_norm = 10.0;
  int token_batch = 8192;  // source + chosen + rejected tokens per batch
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  /// Linear warmup: lr * s / warmup for s <= warmup (s is 1-based), then lr.
  double lr_at(int step) const;
};

struct DqoConfig {
  int rounds = 5;         // n
  int epochs = 8;         // m
  int d = 8000;           // sources per round
  int k = 64;             // samples per source
  double beta = 0.5;
  double eps = 0.005;
  SamplerParams sampler{40, 0.8, 64};
  OptimConfig optim;
  std::uint64_t seed = 0;
  std::vector<std::string> langs{"de", "es", "hi", "ru", "zh"};  // T
  bool with_replacement = false;

  /// The published hyperparameters (8192-token batches).
  static DqoConfig paper();
  /// Scaled down for the toy task: n and m kept, d = 256, k = 16.
  static DqoConfig desk();

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);
void to_json(nlohmann::json& j, const DqoConfig& c);
void from_json(const nlohmann::json& j, DqoConfig& c);
void to_json(nlohmann::json& j, const SamplerParams& c);
void from_json(const nlohmann::json& j, SamplerParams& c);

/// One training example: encoder input, chosen output, and (DPO only) the
/// rejected output plus the frozen reference log-probs.
struct TrainExample {
  Tokens input;
  Tokens chosen;
  Tokens rejected;
  double ref_w = 0.0;
  double ref_l = 0.0;

  std::size_t tokens() const noexcept { return input.size() + chosen.size() + rejected.size(); }
};

/// Examples for DPO/SFT updates on preference pairs. Reference log-probs are
/// computed once here.
std::vector<TrainExample> make_pair_examples(const std::vector<PreferencePair>& pairs,
                                             const LanguageRegistry& registry, const ReferenceModel* ref);
/// SFT examples straight from a parallel corpus.
std::vector<TrainExample> make_corpus_examples(const ParallelCorpus& corpus, const LanguageRegistry& registry);

/// Consecutive examples packed while the running token count stays within
/// `token_batch`; an example larger than the budget forms its own batch.
std::vector<std::vector<std::size_t>> pack_batches(const std::vector<TrainExample>& examples,
                                                   std::span<const std::size_t> order, int token_batch);

struct StepRecord {
  int round = 0;
  int epoch = 0;
  int step = 0;         // global, 1-based
  double loss = 0.0;    // batch mean
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  std::size_t batch_examples = 0;
  std::size_t batch_tokens = 0;
};

void to_json(nlohmann::json& j, const StepRecord& r);

using StepCallback = std::function<void(const StepRecord&)>;
/// Called after each epoch with its 0-based index and mean loss; returning
/// false stops training early.
using EpochCallback = std::function<bool(int epoch, double mean_loss)>;

struct TrainStats {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_loss;
  double seconds = 0.0;
};

/// Plain and Adam updates with warmup and global-norm clipping. Optimizer
/// state lives for one train_epochs call.
class Optimizer {
 public:
  Optimizer(const OptimConfig& config, std::size_t num_params);
  /// Clips `grad` in place and applies one update with the lr of `local_step`.
  /// Returns the pre-clipping norm.
  double step(std::span<double> params, std::span<double> grad, int local_step);

 private:
  OptimConfig config_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

struct EpochPlan {
  int epochs = 1;
  int round = 0;
  std::uint64_t seed = 0;
  int first_global_step = 1;
};

/// Runs `plan.epochs` passes over `examples`, reshuffling each epoch with a
/// stream keyed on (seed, round, epoch). The warmup restarts with each call.
/// Throws TrainingError naming round/epoch/step on a non-finite loss or
/// gradient.
TrainStats train_epochs(PolicyModel& model, const std::vector<TrainExample>& examples, UpdateMode mode,
                        double beta, const OptimConfig& optim, const EpochPlan& plan,
                        const StepCallback& on_step = {}, const EpochCallback& on_epoch = {});

/// Mean loss over `batch` and its exact gradient w.r.t. theta.
ScalarGrad batch_loss_grad(const PolicyModel& model, const std::vector<TrainExample>& examples,
                           const std::vector<std::size_t>& batch, UpdateMode mode, double beta);

/// Mean loss of `examples` under the current model, no update.
double evaluate_loss(const PolicyModel& model, const std::vector<TrainExample>& examples, UpdateMode mode,
                     double beta);

// ---------------------------------------------------------------------------
// Multi-round driver

struct RoundRecord {
  int round = 0;
  RoundStats pairs;
  double train_loss_first = 0.0;  // mean loss of the first epoch
  double train_loss_last = 0.0;   // mean loss of the last epoch
  int steps = 0;
  double seconds = 0.0;
  nlohmann::json dev = nlohmann::json::object();  // filled by the dev callback
};

void to_json(nlohmann::json& j, const RoundRecord& r);
void from_json(const nlohmann::json& j, RoundRecord& r);

/// Called after each round (and once with round 0 for the baseline) to log
/// dev metrics.
using DevCallback = std::function<nlohmann::json(int round, const PolicyModel& model)>;

struct DqoResult {
  PolicyModel model;
  std::vector<RoundRecord> rounds;  // index 0 is the baseline record
};

/// Run-directory layout written when `run_dir` is set:
///   config.json, pairs/round_<r>.jsonl, checkpoints/round_<r>.ckpt,
///   stats.jsonl (one line per step), rounds.jsonl (one line per round).
/// An existing directory is resumed from its last complete round.
struct DqoRunOptions {
  std::optional<std::filesystem::path> run_dir;
  DevCallback dev;
  StepCallback on_step;
};

/// The reference is the baseline for every round; each round samples fresh
/// sources and candidates from the current policy, builds pairs, and trains
/// `epochs` passes.
DqoResult run_dqo(const PolicyModel& baseline, const std::vector<Tokens>& seed_sources,
                  const LanguageRegistry& registry, QeScorer& scorer, const DqoConfig& config, UpdateMode mode,
                  const DqoRunOptions& options = {});

}  // namespace dqoforge
