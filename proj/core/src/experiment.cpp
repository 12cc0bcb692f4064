// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <set>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dqoforge/error.hpp"
#include "dqoforge/qescore.hpp"
#include "json_util.hpp"
#include "log.hpp"

namespace dqoforge {

namespace fs = std::filesystem;
using nlohmann::json;
using detail::for_keys;

// ---------------------------------------------------------------------------
// Plan

LanguageRegistry RegistryPlan::build() const {
  try {
    if (kind == "toy") return make_registry(toy_language_plan(families, per_family), seed, content_words, entities);
    if (kind == "paper") return make_registry(paper_language_plan(), seed, content_words, entities);
  } catch (const InputError& e) {
    throw ConfigError(std::string("registry: ") + e.what());
  }
  throw ConfigError("registry.kind must be \"toy\" or \"paper\"");
}

BaselinePlan::BaselinePlan() {
  optim.optimizer = OptimizerKind::kAdam;
  optim.lr = 3e-3;
  optim.warmup_steps = 50;
  optim.token_batch = 512;
}

ExperimentPlan ExperimentPlan::desk() {
  ExperimentPlan p;
  p.corruption.misalignment = 0.2;
  p.corruption.omission = 0.2;
  p.corruption.addition = 0.2;
  p.corruption.copy_through = 0.2;
  p.corruption.feature_drop = 0.5;
  p.corruption.skill_noise = 0.2;
  p.arch.max_len = 32;
  p.dqo = DqoConfig::desk();
  return p;
}

ExperimentPlan ExperimentPlan::smoke() {
  ExperimentPlan p = desk();
  p.registry.families = 2;
  p.registry.per_family = 2;
  p.corpus = CorpusSizes{40, 10, 10, 0.2, 3, 8};
  p.arch.d_model = 16;
  p.arch.ffn_dim = 32;
  p.arch.encoder_layers = 1;
  p.baseline.max_epochs = 2;
  p.baseline.optim.warmup_steps = 2;
  p.dqo.rounds = 1;
  p.dqo.epochs = 1;
  p.dqo.d = 4;
  p.dqo.k = 4;
  p.dqo.langs = {"a0"};
  p.eval.ppl_sample = 20;
  p.eval.feature_probe = 20;
  p.held_out_feature_lang = "b0";
  p.seeds = {1};
  p.required_seed_passes = 1;
  p.out_dir = "runs/smoke";
  return p;
}

ArchConfig ExperimentPlan::arch_for(const LanguageRegistry& registry) const {
  ArchConfig a = arch;
  a.vocab_size = registry.vocab_size();
  return a;
}

void ExperimentPlan::validate(const LanguageRegistry& registry) const {
  if (version != 1) throw ConfigError("unsupported plan version " + std::to_string(version));
  try {
    corruption.validate();
    arch_for(registry).validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  if (corpus.train_per_lang < 1 || corpus.dev_per_lang < 1 || corpus.test_per_lang < 1)
    throw ConfigError("corpus sizes must be positive");
  if (corpus.min_len < 1 || corpus.max_len < corpus.min_len) throw ConfigError("corpus length range is empty");
  if (corpus.max_len + 3 > arch.max_len) throw ConfigError("arch.max_len too small for corpus.max_len");
  if (!(corpus.entity_rate >= 0.0 && corpus.entity_rate <= 1.0)) throw ConfigError("corpus.entity_rate outside [0,1]");
  baseline.optim.validate();
  if (baseline.max_epochs < 1 || baseline.patience < 1) throw ConfigError("baseline epochs and patience must be >= 1");
  dqo.validate();
  if (dqo.sampler.max_len > arch.max_len) throw ConfigError("dqo.sampler.max_len exceeds arch.max_len");
  for (const auto& id : dqo.langs) {
    if (!registry.contains(id)) throw ConfigError("dqo.langs: unknown language '" + id + "'");
  }
  if (!held_out_feature_lang.empty()) {
    if (!registry.contains(held_out_feature_lang))
      throw ConfigError("held_out_feature_lang: unknown language '" + held_out_feature_lang + "'");
    const auto& spec = registry.at(held_out_feature_lang);
    if (!spec.features.transliteration) throw ConfigError("held_out_feature_lang must transliterate");
    for (const auto& id : dqo.langs) {
      if (registry.at(id).family == spec.family)
        throw ConfigError("held_out_feature_lang '" + spec.id + "' shares a family with aligned language '" + id + "'");
    }
  }
  if (eval.max_len < 2 || eval.max_len > arch.max_len) throw ConfigError("eval.max_len must be in [2, arch.max_len]");
  if (eval.ppl_sample < 1 || eval.feature_probe < 1) throw ConfigError("eval sample sizes must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds is empty");
  if (required_seed_passes < 1 || required_seed_passes > static_cast<int>(seeds.size()))
    throw ConfigError("required_seed_passes must be in [1, number of seeds]");
  for (const auto& m : metrics) metric_info(m);
  for (const auto& g : significance) {
    if (g != "All" && g != "T" && g != "T^c" && g != "R&T^c" && g != "R^c")
      throw ConfigError("significance: unknown group '" + g + "'");
  }
}

namespace {

json corpus_json(const CorpusSizes& c, const CorruptionConfig& k) {
  return {{"train_per_lang", c.train_per_lang}, {"dev_per_lang", c.dev_per_lang}, {"test_per_lang", c.test_per_lang},
          {"entity_rate", c.entity_rate},       {"min_len", c.min_len},           {"max_len", c.max_len},
          {"corruption", k}};
}

/// `defaults` with the keys of `patch` applied recursively; objects given
/// only in part keep the desk values of their other fields.
template <class T>
json merged(const T& defaults, const json& patch) {
  json j = defaults;
  if (!patch.is_object()) return patch;  // let from_json report the type error
  j.merge_patch(patch);
  return j;
}

json arch_json(const ArchConfig& a) {
  json j = a;
  j.erase("vocab_size");
  return j;
}

}  // namespace

void to_json(json& j, const ExperimentPlan& p) {
  j = json{{"version", p.version},
           {"registry",
            {{"kind", p.registry.kind},
             {"families", p.registry.families},
             {"per_family", p.registry.per_family},
             {"seed", p.registry.seed},
             {"content_words", p.registry.content_words},
             {"entities", p.registry.entities}}},
           {"corpus", corpus_json(p.corpus, p.corruption)},
           {"arch", arch_json(p.arch)},
           {"baseline", {{"optim", p.baseline.optim}, {"max_epochs", p.baseline.max_epochs}, {"patience", p.baseline.patience}}},
           {"dqo", p.dqo},
           {"mode", mode_name(p.mode)},
           {"eval",
            {{"max_len", p.eval.max_len},
             {"ppl_sample", p.eval.ppl_sample},
             {"feature_probe", p.eval.feature_probe},
             {"feature_probe_entity_rate", p.eval.feature_probe_entity_rate}}},
           {"held_out_feature_lang", p.held_out_feature_lang},
           {"seeds", p.seeds},
           {"required_seed_passes", p.required_seed_passes},
           {"metrics", p.metrics},
           {"significance", p.significance},
           {"out_dir", p.out_dir}};
}

void from_json(const json& j, ExperimentPlan& p) {
  p = ExperimentPlan::desk();
  detail::require_keys(j, "plan", {"version", "registry", "corpus", "dqo"});
  for_keys(j, "plan", [&](const std::string& k, const json& v) {
    if (k == "version") {
      p.version = v.get<int>();
    } else if (k == "registry") {
      for_keys(v, "registry", [&](const std::string& rk, const json& rv) {
        if (rk == "kind") p.registry.kind = rv.get<std::string>();
        else if (rk == "families") p.registry.families = rv.get<int>();
        else if (rk == "per_family") p.registry.per_family = rv.get<int>();
        else if (rk == "seed") p.registry.seed = rv.get<std::uint64_t>();
        else if (rk == "content_words") p.registry.content_words = rv.get<int>();
        else if (rk == "entities") p.registry.entities = rv.get<int>();
        else return false;
        return true;
      });
    } else if (k == "corpus") {
      for_keys(v, "corpus", [&](const std::string& ck, const json& cv) {
        if (ck == "train_per_lang") p.corpus.train_per_lang = cv.get<int>();
        else if (ck == "dev_per_lang") p.corpus.dev_per_lang = cv.get<int>();
        else if (ck == "test_per_lang") p.corpus.test_per_lang = cv.get<int>();
        else if (ck == "entity_rate") p.corpus.entity_rate = cv.get<double>();
        else if (ck == "min_len") p.corpus.min_len = cv.get<int>();
        else if (ck == "max_len") p.corpus.max_len = cv.get<int>();
        else if (ck == "corruption") {
          try {
            p.corruption = merged(p.corruption, cv).get<CorruptionConfig>();
          } catch (const InputError& e) {
            throw ConfigError(std::string("corpus.corruption: ") + e.what());
          }
        } else return false;
        return true;
      });
    } else if (k == "arch") {
      for_keys(v, "arch", [&](const std::string& ak, const json& av) {
        if (ak == "d_model") p.arch.d_model = av.get<int>();
        else if (ak == "encoder_layers") p.arch.encoder_layers = av.get<int>();
        else if (ak == "decoder_layers") p.arch.decoder_layers = av.get<int>();
        else if (ak == "heads") p.arch.heads = av.get<int>();
        else if (ak == "cross_heads") p.arch.cross_heads = av.get<int>();
        else if (ak == "ffn_dim") p.arch.ffn_dim = av.get<int>();
        else if (ak == "max_len") p.arch.max_len = av.get<int>();
        else return false;  // vocab_size comes from the registry
        return true;
      });
    } else if (k == "baseline") {
      for_keys(v, "baseline", [&](const std::string& bk, const json& bv) {
        if (bk == "optim") p.baseline.optim = merged(p.baseline.optim, bv).get<OptimConfig>();
        else if (bk == "max_epochs") p.baseline.max_epochs = bv.get<int>();
        else if (bk == "patience") p.baseline.patience = bv.get<int>();
        else return false;
        return true;
      });
    } else if (k == "dqo") {
      p.dqo = merged(p.dqo, v).get<DqoConfig>();
    } else if (k == "mode") {
      p.mode = mode_from_name(v.get<std::string>());
    } else if (k == "eval") {
      for_keys(v, "eval", [&](const std::string& ek, const json& ev) {
        if (ek == "max_len") p.eval.max_len = ev.get<int>();
        else if (ek == "ppl_sample") p.eval.ppl_sample = ev.get<int>();
        else if (ek == "feature_probe") p.eval.feature_probe = ev.get<int>();
        else if (ek == "feature_probe_entity_rate") p.eval.feature_probe_entity_rate = ev.get<double>();
        else return false;
        return true;
      });
    } else if (k == "held_out_feature_lang") {
      p.held_out_feature_lang = v.get<std::string>();
    } else if (k == "seeds") {
      p.seeds = v.get<std::vector<std::uint64_t>>();
    } else if (k == "required_seed_passes") {
      p.required_seed_passes = v.get<int>();
    } else if (k == "metrics") {
      p.metrics = v.get<std::vector<std::string>>();
    } else if (k == "significance") {
      p.significance = v.get<std::vector<std::string>>();
    } else if (k == "out_dir") {
      p.out_dir = v.get<std::string>();
    } else {
      return false;
    }
    return true;
  });
}

ExperimentPlan load_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open plan " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentPlan p = j.get<ExperimentPlan>();
  p.validate(p.registry.build());
  return p;
}

std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return RngStream(seed, {hash_name("experiment"), hash_name(name)}).next_u64();
}

// ---------------------------------------------------------------------------
// Baseline

BaselineResult run_baseline(const ExperimentPlan& plan, const CorpusSplits& splits, const LanguageRegistry& registry,
                            std::uint64_t seed, const std::optional<fs::path>& checkpoint, const StepCallback& on_step) {
  const ArchConfig arch = plan.arch_for(registry);
  const json key{{"registry", json(plan)["registry"]}, {"corpus", json(plan)["corpus"]},
                 {"arch", arch},                       {"baseline", json(plan)["baseline"]},
                 {"seed", seed}};
  const std::string hash = config_hash(key);

  if (checkpoint && fs::exists(*checkpoint)) {
    Checkpoint ck = load_checkpoint(*checkpoint);
    if (ck.meta.value("config_hash", "") == hash && ck.model.arch() == arch) {
      BaselineInfo info;
      const auto& b = ck.meta.at("baseline");
      info.epochs = b.at("epochs").get<int>();
      info.best_epoch = b.at("best_epoch").get<int>();
      info.best_dev_loss = b.at("best_dev_loss").get<double>();
      info.dev_loss = b.at("dev_loss").get<std::vector<double>>();
      info.reused = true;
      detail::log()->info("baseline: reusing {}", checkpoint->string());
      return {std::move(ck.model), info};
    }
    detail::log()->warn("baseline: {} was trained with a different configuration; retraining", checkpoint->string());
  }

  PolicyModel model(arch, derive_seed(seed, "init"));
  const auto train = make_corpus_examples(splits.train, registry);
  const auto dev = make_corpus_examples(splits.dev, registry);
  BaselineInfo info;
  info.best_dev_loss = std::numeric_limits<double>::infinity();
  std::vector<double> best(model.params().begin(), model.params().end());
  int since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();
  train_epochs(model, train, UpdateMode::kSft, 0.5, plan.baseline.optim,
               EpochPlan{plan.baseline.max_epochs, 0, derive_seed(seed, "baseline-order"), 1}, on_step,
               [&](int epoch, double train_loss) {
                 const double d = evaluate_loss(model, dev, UpdateMode::kSft, 0.5);
                 if (!std::isfinite(d)) throw TrainingError("baseline: non-finite dev loss at epoch " + std::to_string(epoch + 1));
                 info.dev_loss.push_back(d);
                 info.epochs = epoch + 1;
                 if (d < info.best_dev_loss) {
                   info.best_dev_loss = d;
                   info.best_epoch = epoch + 1;
                   std::copy(model.params().begin(), model.params().end(), best.begin());
                   since_best = 0;
                 } else {
                   ++since_best;
                 }
                 detail::log()->info("baseline epoch {}: train loss {:.4f}, dev loss {:.4f}{} ({:.0f}s)", epoch + 1,
                                     train_loss, d, since_best == 0 ? " *" : "",
                                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
                 return since_best < plan.baseline.patience;
               });
  PolicyModel kept(arch, std::move(best));
  if (checkpoint) {
    if (checkpoint->has_parent_path()) fs::create_directories(checkpoint->parent_path());
    const json meta{{"kind", "baseline"},
                    {"config_hash", hash},
                    {"seed", seed},
                    {"baseline",
                     {{"epochs", info.epochs},
                      {"best_epoch", info.best_epoch},
                      {"best_dev_loss", info.best_dev_loss},
                      {"dev_loss", info.dev_loss}}}};
    save_checkpoint(*checkpoint, kept, meta);
  }
  return {std::move(kept), info};
}

// ---------------------------------------------------------------------------
// Measurements

CorpusSplits seed_corpus(const ExperimentPlan& plan, const LanguageRegistry& registry, std::uint64_t seed) {
  return gen_corpus(registry, plan.corruption, plan.corpus, derive_seed(seed, "corpus"));
}

namespace {

std::vector<std::size_t> ppl_indices(std::size_t n, int sample, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  RngStream rng(derive_seed(seed, "ppl-sample"));
  rng.shuffle(idx);
  idx.resize(std::min(n, static_cast<std::size_t>(sample)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<Tokens> feature_probe_sources(const ExperimentPlan& plan, const LanguageRegistry& registry,
                                          std::uint64_t seed) {
  std::vector<Tokens> out;
  RngStream rng(derive_seed(seed, "feature-probe"));
  while (static_cast<int>(out.size()) < plan.eval.feature_probe) {
    Tokens s = random_source(registry.layout(), rng, plan.eval.feature_probe_entity_rate, plan.corpus.min_len,
                             plan.corpus.max_len);
    if (std::any_of(s.begin(), s.end(), [&](TokenId t) { return registry.layout().is_entity(t); }))
      out.push_back(std::move(s));
  }
  return out;
}

LangGroups groups_of(const ExperimentPlan& plan, const LanguageRegistry& registry) {
  return LangGroups::from_registry(registry, plan.dqo.langs);
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Per-segment values of `values` restricted to records whose language is in `langs`.
std::vector<double> select(const ParallelCorpus& corpus, std::span<const double> values,
                           const std::set<std::string>& langs) {
  std::vector<double> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (langs.count(corpus[i].lang)) out.push_back(values[i]);
  }
  return out;
}

std::set<std::string> group_members(const LangGroups& g, const std::string& name) {
  for (auto& [n, m] : g.rows()) {
    if (n == name) return m;
  }
  throw ConfigError("unknown group '" + name + "'");
}

}  // namespace

Snapshot take_snapshot(int round, const PolicyModel& model, const ExperimentPlan& plan,
                       const LanguageRegistry& registry, const CorpusSplits& splits, std::uint64_t seed) {
  Snapshot s;
  s.round = round;
  const auto outputs = translate_corpus(model, splits.test, registry, plan.eval.max_len);
  s.test = evaluate_outputs(splits.test, outputs, registry);
  s.test_qe = segment_qe(splits.test, outputs, registry);

  ParallelCorpus dev_t;
  const std::set<std::string> t(plan.dqo.langs.begin(), plan.dqo.langs.end());
  for (const auto& r : splits.dev) {
    if (t.count(r.lang)) dev_t.push_back(r);
  }
  const auto dev_out = translate_corpus(model, dev_t, registry, plan.eval.max_len);
  s.dev_qe_aligned = mean_of(segment_qe(dev_t, dev_out, registry));

  for (std::size_t i : ppl_indices(splits.train.size(), plan.eval.ppl_sample, seed)) {
    const auto& r = splits.train[i];
    const Tokens in = encoder_input(registry.at(r.lang), r.source);
    s.train_ppl.push_back(segment_perplexity(sequence_log_prob(model, in, r.target), r.target.size()));
  }

  if (!plan.held_out_feature_lang.empty()) {
    const auto& spec = registry.at(plan.held_out_feature_lang);
    for (const auto& src : feature_probe_sources(plan, registry, seed)) {
      const Tokens out = greedy_decode(model, encoder_input(spec, src), plan.eval.max_len);
      const std::vector<Tokens> one_src{src}, one_out{out};
      const FeatureCount c = feature_usage(one_src, one_out, spec);
      s.feature_probe.push_back(c.rate());
      s.feature_count.entities += c.entities;
      s.feature_count.marked += c.marked;
    }
  }
  return s;
}

json snapshot_summary(const Snapshot& s, const LangGroups& groups) {
  json j{{"round", s.round}, {"dev_qe_T", s.dev_qe_aligned}, {"train_ppl", mean_of(s.train_ppl)}};
  if (s.feature_count.entities > 0) j["feature_usage_probe"] = s.feature_count.rate();
  json g = json::object();
  for (const auto& [metric, values] : s.test) {
    if (metric == "feature_usage") continue;  // defined on a subset; see the probe
    for (const auto& row : group_aggregate(values, groups)) {
      if (!std::isnan(row.mean)) g[metric][row.group] = row.mean;
    }
  }
  j["test"] = g;
  return j;
}

PairedDelta paired_delta(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw InputError("paired_delta: length mismatch");
  PairedDelta d;
  d.n = before.size();
  if (d.n == 0) return d;
  std::vector<double> diff(d.n);
  for (std::size_t i = 0; i < d.n; ++i) diff[i] = after[i] - before[i];
  d.mean = mean_of(diff);
  if (d.n > 1) {
    double ss = 0.0;
    for (double x : diff) ss += (x - d.mean) * (x - d.mean);
    d.se = std::sqrt(ss / static_cast<double>(d.n - 1) / static_cast<double>(d.n));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Checks

void to_json(json& j, const CheckResult& c) {
  j = json{{"id", c.id},         {"description", c.description}, {"metric", c.metric},     {"group", c.group},
           {"rounds", c.rounds}, {"threshold", c.threshold},     {"asserted", c.asserted}, {"passed", c.passed},
           {"baseline", c.baseline}, {"final", c.final},         {"delta", c.delta},       {"se", c.se},
           {"note", c.note}};
}

namespace {
CheckResult make_check(std::string id, std::string description, std::string metric, std::string group,
                       std::string rounds, std::string threshold) {
  CheckResult c;
  c.id = std::move(id);
  c.description = std::move(description);
  c.metric = std::move(metric);
  c.group = std::move(group);
  c.rounds = std::move(rounds);
  c.threshold = std::move(threshold);
  return c;
}
}  // namespace

std::vector<CheckResult> evaluate_checks(const ExperimentPlan& plan, const LanguageRegistry& registry,
                                         const CorpusSplits& splits, const std::vector<Snapshot>& rounds) {
  if (rounds.size() < 2) throw InputError("evaluate_checks: need the baseline and at least one round");
  const Snapshot& b = rounds.front();
  const Snapshot& f = rounds.back();
  const LangGroups groups = groups_of(plan, registry);
  const std::string span = "0 vs " + std::to_string(f.round);
  const std::string paired = "mean paired delta > 0 and >= 1 standard error";

  auto directional = [&](CheckResult c, std::span<const double> before, std::span<const double> after,
                         int sign) {
    const PairedDelta d = paired_delta(before, after);
    c.baseline = mean_of(before);
    c.final = mean_of(after);
    c.delta = d.mean;
    c.se = d.se;
    const double signed_delta = sign * d.mean;
    c.passed = signed_delta > 0.0 && signed_delta >= d.se;
    return c;
  };

  std::vector<CheckResult> out;
  {
    const auto t = group_members(groups, "T");
    CheckResult c = make_check("a", "test quality on the aligned languages improves", "qe", "T", span, paired);
    out.push_back(directional(c, select(splits.test, b.test_qe, t), select(splits.test, f.test_qe, t), +1));
  }
  {
    const auto rc = groups.unrelated();
    CheckResult c = make_check("b", "test quality on languages from families outside T improves", "qe", "R^c", span, paired);
    if (rc.empty()) {
      c.asserted = false;
      c.note = "skipped: every language shares a family with T, so there is no held-out group";
      out.push_back(c);
    } else {
      out.push_back(directional(c, select(splits.test, b.test_qe, rc), select(splits.test, f.test_qe, rc), +1));
    }
  }
  {
    CheckResult c = make_check("c", "perplexity of the training data increases", "ppl", "train sample", span, paired);
    c = directional(c, b.train_ppl, f.train_ppl, +1);
    if (plan.corruption.all_zero()) {
      c.asserted = false;
      c.passed = false;
      c.note = "not asserted: corruption rates are all zero, so there is no mismatch to move away from";
    }
    out.push_back(c);
  }
  {
    CheckResult c = make_check("d", "feature usage on the held-out feature language increases", "feature_usage",
                  plan.held_out_feature_lang, span, paired);
    if (plan.held_out_feature_lang.empty()) {
      c.asserted = false;
      c.note = "skipped: no held-out feature language configured";
      out.push_back(c);
    } else {
      out.push_back(directional(c, b.feature_probe, f.feature_probe, +1));
    }
  }
  {
    const int transitions = static_cast<int>(rounds.size()) - 1;
    const int required = static_cast<int>(std::ceil(0.8 * transitions));
    int ok = 0;
    std::string series;
    for (std::size_t r = 0; r < rounds.size(); ++r) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s%.4f", r ? " " : "", rounds[r].dev_qe_aligned);
      series += buf;
      if (r > 0 && rounds[r].dev_qe_aligned >= rounds[r - 1].dev_qe_aligned) ++ok;
    }
    CheckResult c = make_check("e", "dev quality on T is non-decreasing round over round", "qe (dev)", "T",
                  "0.." + std::to_string(f.round),
                  "non-decreasing in >= " + std::to_string(required) + " of " + std::to_string(transitions) +
                      " rounds");
    c.baseline = b.dev_qe_aligned;
    c.final = f.dev_qe_aligned;
    c.delta = c.final - c.baseline;
    c.passed = ok >= required;
    c.note = std::to_string(ok) + " of " + std::to_string(transitions) + " non-decreasing; series " + series;
    out.push_back(c);
  }
  return out;
}

void write_comparison_csv(std::ostream& out, const MetricTable& before, const MetricTable& after,
                          const LangGroups& groups) {
  MetricTable merged;
  for (const auto& [metric, values] : before) {
    if (!after.count(metric)) continue;
    merged[metric + "_baseline"] = values;
    merged[metric + "_final"] = after.at(metric);
    auto& delta = merged[metric + "_delta"];
    for (const auto& [lang, v] : values) {
      const auto it = after.at(metric).find(lang);
      if (it != after.at(metric).end()) delta[lang] = it->second - v;
    }
  }
  write_group_csv(out, merged, groups);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

MetricTable filter_metrics(const MetricTable& t, const std::vector<std::string>& names) {
  MetricTable out;
  for (const auto& n : names) {
    if (t.count(n)) out[n] = t.at(n);
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + p.string());
  out << s;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string series_csv(const std::vector<Snapshot>& rounds, const LangGroups& groups) {
  std::ostringstream out;
  const auto rows = groups.rows();
  out << "round,dev_qe_T";
  for (const auto& [name, m] : rows) out << ",test_qe_" << name;
  out << ",train_ppl,feature_usage_probe\n";
  for (const auto& s : rounds) {
    out << s.round << ',' << fmt(s.dev_qe_aligned);
    for (const auto& g : group_aggregate(s.test.at("qe"), groups)) out << ',' << (std::isnan(g.mean) ? "" : fmt(g.mean));
    out << ',' << fmt(mean_of(s.train_ppl)) << ',' << (s.feature_count.entities ? fmt(s.feature_count.rate()) : "")
        << '\n';
  }
  return out.str();
}

}  // namespace

json SeedReport::to_json(const LangGroups& groups) const {
  json j{{"seed", seed},
         {"baseline",
          {{"epochs", baseline.epochs},
           {"best_epoch", baseline.best_epoch},
           {"best_dev_loss", baseline.best_dev_loss},
           {"dev_loss", baseline.dev_loss}}},
         {"checks", checks},
         {"significance", significance}};
  json series = json::array();
  for (const auto& s : rounds) series.push_back(snapshot_summary(s, groups));
  j["rounds"] = series;
  return j;
}

SeedReport run_seed(const ExperimentPlan& plan, const LanguageRegistry& registry, std::uint64_t seed,
                    const std::optional<fs::path>& dir, bool reuse_baseline) {
  plan.validate(registry);
  const LangGroups groups = groups_of(plan, registry);
  SeedReport rep;
  rep.seed = seed;
  detail::log()->info("seed {}: generating corpus", seed);
  const CorpusSplits splits = seed_corpus(plan, registry, seed);
  if (dir) {
    fs::create_directories(*dir / "corpus");
    registry.save(*dir / "corpus" / "registry.json");
    save_corpus(*dir / "corpus" / "train.tsv", splits.train);
    save_corpus(*dir / "corpus" / "dev.tsv", splits.dev);
    save_corpus(*dir / "corpus" / "test.tsv", splits.test);
  }
  std::optional<fs::path> ckpt;
  if (dir) {
    ckpt = *dir / "baseline.ckpt";
    if (!reuse_baseline) fs::remove(*ckpt);
  }
  BaselineResult base = run_baseline(plan, splits, registry, seed, ckpt);
  rep.baseline = base.info;

  DqoConfig cfg = plan.dqo;
  cfg.seed = derive_seed(seed, "dqo");
  std::vector<Tokens> sources;
  sources.reserve(splits.train.size());
  for (const auto& r : splits.train) sources.push_back(r.source);

  DqoRunOptions opt;
  if (dir) {
    opt.run_dir = *dir / "run";
    if (!reuse_baseline) fs::remove_all(*opt.run_dir);
  }
  opt.dev = [&](int round, const PolicyModel& model) {
    Snapshot s = take_snapshot(round, model, plan, registry, splits, seed);
    json j = snapshot_summary(s, groups);
    detail::log()->info("seed {} round {}: dev qe(T) {:.4f}, test qe(T) {:.4f}, ppl {:.3f}", seed, round,
                        s.dev_qe_aligned, j["test"]["qe"].value("T", 0.0), mean_of(s.train_ppl));
    if (static_cast<std::size_t>(round) < rep.rounds.size()) rep.rounds.resize(static_cast<std::size_t>(round));
    rep.rounds.push_back(std::move(s));
    return j;
  };
  OracleScorer oracle(registry);
  CachingScorer scorer(oracle);
  DqoResult res = run_dqo(base.model, sources, registry, scorer, cfg, plan.mode, opt);

  // A resumed run skips the callback for finished rounds; re-measure them.
  if (rep.rounds.size() != res.rounds.size()) {
    rep.rounds.clear();
    rep.rounds.push_back(take_snapshot(0, base.model, plan, registry, splits, seed));
    for (std::size_t r = 1; r < res.rounds.size(); ++r) {
      const fs::path p = *opt.run_dir / "checkpoints" / ("round_" + std::to_string(r) + ".ckpt");
      rep.rounds.push_back(take_snapshot(static_cast<int>(r), load_checkpoint(p).model, plan, registry, splits, seed));
    }
  }

  rep.checks = evaluate_checks(plan, registry, splits, rep.rounds);
  for (const auto& g : plan.significance) {
    const auto members = group_members(groups, g);
    if (members.empty()) continue;
    const auto before = select(splits.test, rep.rounds.front().test_qe, members);
    const auto after = select(splits.test, rep.rounds.back().test_qe, members);
    const auto r = paired_randomization_test(before, after, 10000, derive_seed(seed, "significance"));
    rep.significance[g] = {{"metric", "qe"}, {"p_u", r.p}, {"exact", r.exact}, {"delta", r.observed}};
  }

  if (dir) {
    std::ofstream metrics(*dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    const std::string run_id = "seed-" + std::to_string(seed);
    for (const auto& s : rep.rounds) {
      const auto recs = metric_records(filter_metrics(s.test, plan.metrics), run_id, s.round);
      write_metrics_jsonl(metrics, recs);
    }
    std::ostringstream groups_csv;
    write_comparison_csv(groups_csv, filter_metrics(rep.rounds.front().test, plan.metrics),
                         filter_metrics(rep.rounds.back().test, plan.metrics), groups);
    write_text(*dir / "groups.csv", groups_csv.str());
    write_text(*dir / "series.csv", series_csv(rep.rounds, groups));
    write_text(*dir / "report.json", rep.to_json(groups).dump(2) + "\n");
  }
  return rep;
}

SuiteReport run_observation_suite(const ExperimentPlan& plan, const SuiteOptions& options) {
  const LanguageRegistry registry = plan.registry.build();
  plan.validate(registry);
  const LangGroups groups = groups_of(plan, registry);
  const fs::path out = plan.out_dir;
  if (options.write_files) {
    fs::create_directories(out);
    write_text(out / "plan.json", json(plan).dump(2) + "\n");
  }

  SuiteReport rep;
  for (std::uint64_t seed : plan.seeds) {
    std::optional<fs::path> dir;
    if (options.write_files) dir = out / ("seed_" + std::to_string(seed));
    rep.seeds.push_back(run_seed(plan, registry, seed, dir, options.reuse_baseline));
  }

  std::ostringstream text;
  text << "observation suite: " << plan.seeds.size() << " seed(s), mode " << mode_name(plan.mode) << ", T = {";
  for (std::size_t i = 0; i < plan.dqo.langs.size(); ++i) text << (i ? ", " : "") << plan.dqo.langs[i];
  text << "}, " << plan.dqo.rounds << " rounds\n";

  json summary = json::array();
  rep.all_passed = true;
  const std::size_t n_checks = rep.seeds.front().checks.size();
  for (std::size_t c = 0; c < n_checks; ++c) {
    const CheckResult& first = rep.seeds.front().checks[c];
    int asserted = 0, passed = 0;
    std::vector<double> deltas;
    json per_seed = json::array();
    for (const auto& s : rep.seeds) {
      const CheckResult& r = s.checks[c];
      asserted += r.asserted;
      passed += r.asserted && r.passed;
      deltas.push_back(r.delta);
      per_seed.push_back({{"seed", s.seed}, {"passed", r.passed}, {"asserted", r.asserted}, {"delta", r.delta},
                          {"se", r.se}, {"baseline", r.baseline}, {"final", r.final}, {"note", r.note}});
    }
    const PairedDelta pooled = paired_delta(std::vector<double>(deltas.size(), 0.0), deltas);
    std::string verdict;
    if (asserted == 0) {
      verdict = "skipped";
    } else if (passed >= std::min(plan.required_seed_passes, asserted)) {
      verdict = "pass";
    } else {
      verdict = "fail";
      rep.all_passed = false;
    }
    summary.push_back({{"id", first.id},
                       {"description", first.description},
                       {"metric", first.metric},
                       {"group", first.group},
                       {"rounds", first.rounds},
                       {"threshold", first.threshold},
                       {"required_seed_passes", plan.required_seed_passes},
                       {"seeds_asserted", asserted},
                       {"seeds_passed", passed},
                       {"pooled_delta", pooled.mean},
                       {"pooled_se", pooled.se},
                       {"verdict", verdict},
                       {"per_seed", per_seed}});
    text << "(" << first.id << ") " << first.description << "\n    metric " << first.metric << ", group "
         << first.group << ", rounds " << first.rounds << ", threshold: " << first.threshold << "\n    ";
    for (const auto& s : rep.seeds) {
      const CheckResult& r = s.checks[c];
      text << "seed " << s.seed << ": " << (r.asserted ? (r.passed ? "pass" : "FAIL") : "n/a") << " ("
           << fmt(r.baseline) << " -> " << fmt(r.final) << ", se " << fmt(r.se) << ")  ";
    }
    text << "\n    verdict: " << verdict << " (" << passed << "/" << asserted << " seeds, need "
         << plan.required_seed_passes << ")\n";
    if (!first.note.empty() && !first.asserted) text << "    note: " << first.note << "\n";
  }
  text << (rep.all_passed ? "ALL OBSERVATIONS HOLD\n" : "SOME OBSERVATIONS FAILED\n");
  rep.summary = {{"all_passed", rep.all_passed}, {"observations", summary}};
  rep.text = text.str();

  if (options.write_files) {
    json full = rep.summary;
    full["seeds"] = json::array();
    for (const auto& s : rep.seeds) full["seeds"].push_back(s.to_json(groups));
    write_text(out / "report.json", full.dump(2) + "\n");
    write_text(out / "report.txt", rep.text);
  }
  return rep;
}

}  // namespace dqoforge
