// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale experiments: a corrupted multilingual corpus, a supervised
// baseline trained on it, quality optimization on a subset of languages, and
// directional checks of what happens on the aligned languages, on languages
// from unseen families, on the training data itself, and on a latent
// language-specific feature.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string_view>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/evalsuite.hpp"
#include "dqoforge/seqmodel.hpp"
#include "dqoforge/synthdata.hpp"
#include "dqoforge/trainer.hpp"

namespace dqoforge {

struct RegistryPlan {
  std::string kind = "toy";  // "toy" or "paper"
  int families = 4;          // toy only
  int per_family = 2;        // toy only
  std::uint64_t seed = 1;
  int content_words = 16;
  int entities = 4;

  LanguageRegistry build() const;
};

struct BaselinePlan {
  OptimConfig optim;  // Adam, lr 3e-3, warmup 50, 512-token batches
  int max_epochs = 30;
  int patience = 3;   // epochs without a new best dev loss

  BaselinePlan();
};

struct EvalPlan {
  int max_len = 32;                  // greedy decoding budget
  int ppl_sample = 400;              // corrupted training records for perplexity
  int feature_probe = 500;           // probe sentences for the held-out feature language
  double feature_probe_entity_rate = 0.3;
};

/// Everything one experiment needs. The architecture's vocabulary size is
/// taken from the registry. Serialized as JSON (schema: docs/plan.schema.json);
/// unknown keys are errors.
struct ExperimentPlan {
  int version = 1;
  RegistryPlan registry;
  CorpusSizes corpus;
  CorruptionConfig corruption;
  ArchConfig arch;
  BaselinePlan baseline;
  DqoConfig dqo;  // dqo.langs is the aligned set T
  UpdateMode mode = UpdateMode::kDpo;
  EvalPlan eval;
  std::string held_out_feature_lang = "d0";  // empty: skip the feature check
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int required_seed_passes = 2;
  std::vector<std::string> metrics{"qe", "bleu", "feature_usage"};
  std::vector<std::string> significance{"T", "R^c"};  // groups tested baseline vs final
  std::string out_dir = "runs/desk";

  /// 8 languages in 4 families, T = {a0, b0, c0}, the held-out feature
  /// language in the fourth family, corruption rates 0.2-0.5.
  static ExperimentPlan desk();
  /// Tiny plan for smoke tests: one round, one epoch, a few pairs.
  static ExperimentPlan smoke();

  /// Throws ConfigError when the plan is inconsistent with the registry.
  void validate(const LanguageRegistry& registry) const;
  ArchConfig arch_for(const LanguageRegistry& registry) const;
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);
ExperimentPlan load_plan(const std::filesystem::path& path);
/// 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

/// Sub-seeds of one experiment seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

struct BaselineInfo {
  int epochs = 0;      // epochs trained
  int best_epoch = 0;  // 1-based epoch whose weights were kept
  double best_dev_loss = 0.0;
  std::vector<double> dev_loss;
  bool reused = false;  // loaded from an existing checkpoint
};

struct BaselineResult {
  PolicyModel model;
  BaselineInfo info;
};

/// Supervised training on the (corrupted) train split with early stopping on
/// clean dev loss; the best epoch is kept. When `checkpoint` is given it is
/// written, and an existing checkpoint with the same config hash is reused.
/// A diverging run throws TrainingError.
BaselineResult run_baseline(const ExperimentPlan& plan, const CorpusSplits& splits, const LanguageRegistry& registry,
                            std::uint64_t seed, const std::optional<std::filesystem::path>& checkpoint = {},
                            const StepCallback& on_step = {});

/// Measurements of one model at one point of a run.
struct Snapshot {
  int round = 0;
  MetricTable test;                        // per-language test metrics
  std::vector<double> test_qe;             // per test segment
  double dev_qe_aligned = 0.0;             // mean over T's dev segments
  std::vector<double> train_ppl;           // per sampled training segment
  std::vector<double> feature_probe;       // per probe sentence with entities (rate)
  FeatureCount feature_count;              // pooled over the probe
};

nlohmann::json snapshot_summary(const Snapshot& s, const LangGroups& groups);

/// One directional check for one seed.
struct CheckResult {
  std::string id;           // "a".."e"
  std::string description;
  std::string metric;
  std::string group;
  std::string rounds;       // e.g. "0 vs 5"
  std::string threshold;
  bool asserted = true;     // false: skipped, see note
  bool passed = false;
  double baseline = 0.0;
  double final = 0.0;
  double delta = 0.0;
  double se = 0.0;
  std::string note;
};
void to_json(nlohmann::json& j, const CheckResult& c);

struct SeedReport {
  std::uint64_t seed = 0;
  BaselineInfo baseline;
  std::vector<Snapshot> rounds;  // 0 = baseline
  std::vector<CheckResult> checks;
  nlohmann::json significance = nlohmann::json::object();
  nlohmann::json to_json(const LangGroups& groups) const;
};

struct SuiteReport {
  std::vector<SeedReport> seeds;
  nlohmann::json summary;  // per observation: passes, asserted seeds, verdict
  bool all_passed = false;
  std::string text;        // human-readable summary
};

struct SuiteOptions {
  bool write_files = true;   // under plan.out_dir
  bool reuse_baseline = true;
};

/// Runs the whole pipeline for every seed of the plan and evaluates the
/// checks. Observation failures are reported, not thrown.
SuiteReport run_observation_suite(const ExperimentPlan& plan, const SuiteOptions& options = {});

/// One seed of the pipeline, writing under `dir` when given.
SeedReport run_seed(const ExperimentPlan& plan, const LanguageRegistry& registry, std::uint64_t seed,
                    const std::optional<std::filesystem::path>& dir, bool reuse_baseline = true);

/// The corpus of one seed (deterministic in plan and seed).
CorpusSplits seed_corpus(const ExperimentPlan& plan, const LanguageRegistry& registry, std::uint64_t seed);

/// Evaluates `model` for `round`.
Snapshot take_snapshot(int round, const PolicyModel& model, const ExperimentPlan& plan,
                       const LanguageRegistry& registry, const CorpusSplits& splits, std::uint64_t seed);

/// Checks (a)-(e) from a sequence of snapshots.
std::vector<CheckResult> evaluate_checks(const ExperimentPlan& plan, const LanguageRegistry& registry,
                                         const CorpusSplits& splits, const std::vector<Snapshot>& rounds);

/// Group report CSV rows: one row per group with baseline, final and delta of
/// every metric.
void write_comparison_csv(std::ostream& out, const MetricTable& before, const MetricTable& after,
                          const LangGroups& groups);

/// Mean and standard error of paired differences after - before.
struct PairedDelta {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};
PairedDelta paired_delta(std::span<const double> before, std::span<const double> after);

}  // namespace dqoforge
