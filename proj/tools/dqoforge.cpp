// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// dqoforge: generate corpora, train baselines, run DQO/RAFT, evaluate,
// plot round series and serve oracle QE over HTTP.
//
// Exit codes: 0 success, 1 I/O (missing or unreadable input, network),
// 2 configuration or usage, 3 training failure.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dqoforge/error.hpp"
#include "dqoforge/evalsuite.hpp"
#include "dqoforge/experiment.hpp"
#include "dqoforge/qe_remote.hpp"
#include "dqoforge/qescore.hpp"
#include "dqoforge/seqmodel.hpp"
#include "dqoforge/synthdata.hpp"
#include "dqoforge/trainer.hpp"
#include "report.hpp"
#include "run_manifest.hpp"

#ifndef DQOFORGE_VERSION
#define DQOFORGE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dqoforge;
using tools::RunManifest;

namespace {

constexpr int kOk = 0;
constexpr int kIoError = 1;
constexpr int kUsage = 2;
constexpr int kTrainingFailed = 3;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const NumericError*>(&e)) return kTrainingFailed;
  return kIoError;
}

struct Options {
  std::vector<std::string> argv;
  std::string config, out, corpus, baseline, checkpoint, compare, aligned, mode, qe, registry;
  std::string host = "127.0.0.1";
  std::string split = "test";
  std::string annotations;
  std::vector<std::string> metrics{"qe", "bleu", "feature_usage"};
  std::vector<std::string> runs, labels;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int port = 8080;
  int log_every = 10;
  int max_len = 0;
  std::size_t segments = 0;
  std::uint64_t trials = 10000;
};

void require_path(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw std::runtime_error(what + " not found: " + p.string());
}

std::uint64_t seed_of(const Options& o, const ExperimentPlan& plan) { return o.seed_set ? o.seed : plan.seeds.front(); }

/// --config, or the plan.json that `gen` left in the corpus directory.
ExperimentPlan plan_for(const Options& o) {
  if (!o.config.empty()) {
    require_path(o.config, "config");
    return load_plan(o.config);
  }
  if (!o.corpus.empty() && fs::exists(fs::path(o.corpus) / "plan.json")) return load_plan(fs::path(o.corpus) / "plan.json");
  throw ConfigError("--config is required (no plan.json in the corpus directory)");
}

struct Corpus {
  LanguageRegistry registry;
  CorpusSplits splits;
};

Corpus load_corpus_dir(const fs::path& dir) {
  require_path(dir, "corpus directory");
  for (const char* f : {"registry.json", "train.tsv", "dev.tsv", "test.tsv"}) require_path(dir / f, "corpus file");
  Corpus c{LanguageRegistry::load(dir / "registry.json"), {}};
  c.splits.train = load_corpus(dir / "train.tsv");
  c.splits.dev = load_corpus(dir / "dev.tsv");
  c.splits.test = load_corpus(dir / "test.tsv");
  for (const auto* s : {&c.splits.train, &c.splits.dev, &c.splits.test}) validate_corpus(*s, c.registry);
  return c;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

// --- manifests ---------------------------------------------------------------

/// Runs `body` with a manifest under `out`. The body fills config and
/// inputs, then calls `begin`; from then on a failure marks the manifest.
void run_tracked(const Options& o, const std::string& command, const fs::path& out,
                 const std::function<void(RunManifest&, const std::function<void()>&)>& body) {
  RunManifest m;
  m.command = command;
  m.argv = o.argv;
  m.tool_version = DQOFORGE_VERSION;
  m.started_at = tools::utc_timestamp();
  const fs::path path = out / "manifest.json";
  bool begun = false;
  auto begin = [&] {
    m.seal();
    fs::create_directories(out);
    m.save(path);
    begun = true;
  };
  try {
    body(m, begin);
  } catch (const std::exception& e) {
    if (begun) {
      m.status = "failed";
      m.error = e.what();
      m.exit_code = exit_code_for(e);
      m.finished_at = tools::utc_timestamp();
      try {
        m.save(path);
      } catch (const std::exception&) {
      }
    }
    throw;
  }
  m.status = "ok";
  m.finished_at = tools::utc_timestamp();
  m.save(path);
}

StepCallback progress(int every) {
  return [every](const StepRecord& s) {
    if (s.step == 1 || (every > 0 && s.step % every == 0)) {
      std::printf("round %d epoch %d step %d loss %.6f lr %.3e\n", s.round, s.epoch + 1, s.step, s.loss, s.lr);
      std::fflush(stdout);
    }
  };
}

// --- gen ---------------------------------------------------------------------

int cmd_gen(const Options& o) {
  require_path(o.config, "config");
  const ExperimentPlan plan = load_plan(o.config);
  const LanguageRegistry registry = plan.registry.build();
  const std::uint64_t seed = seed_of(o, plan);
  const fs::path out = o.out;
  run_tracked(o, "gen", out, [&](RunManifest& m, const std::function<void()>& begin) {
    m.config = {{"plan", plan}, {"seed", seed}};
    m.add_input(o.config);
    begin();
    const CorpusSplits splits = seed_corpus(plan, registry, seed);
    registry.save(out / "registry.json");
    save_corpus(out / "train.tsv", splits.train);
    save_corpus(out / "dev.tsv", splits.dev);
    save_corpus(out / "test.tsv", splits.test);
    write_file(out / "plan.json", json(plan).dump(2) + "\n");

    std::set<int> families;
    for (const auto& l : registry.languages()) families.insert(l.family);
    std::printf("languages: %zu in %zu families\n", registry.languages().size(), families.size());
    for (const auto& [name, split] : {std::pair{"train", &splits.train}, {"dev", &splits.dev}, {"test", &splits.test}}) {
      std::map<std::string, std::size_t> tags;
      std::size_t corrupted = 0;
      for (const auto& r : *split) {
        corrupted += r.corrupted();
        for (const auto& t : r.tags) ++tags[t];
      }
      std::printf("%s: %zu records, %zu corrupted", name, split->size(), corrupted);
      for (const auto& [t, n] : tags) std::printf(", %s %zu", t.c_str(), n);
      std::printf("\n");
    }
  });
  return kOk;
}

// --- train-baseline ----------------------------------------------------------

int cmd_train_baseline(const Options& o) {
  const ExperimentPlan plan = plan_for(o);
  const Corpus c = load_corpus_dir(o.corpus);
  plan.validate(c.registry);
  const std::uint64_t seed = seed_of(o, plan);
  const fs::path out = o.out;
  run_tracked(o, "train-baseline", out, [&](RunManifest& m, const std::function<void()>& begin) {
    m.config = {{"plan", plan}, {"seed", seed}};
    m.add_input(o.corpus);
    begin();
    const auto r = run_baseline(plan, c.splits, c.registry, seed, out / "baseline.ckpt", progress(o.log_every));
    std::printf("baseline: %s epoch %d of %d, dev loss %.6f -> %s\n", r.info.reused ? "reused" : "kept",
                r.info.best_epoch, r.info.epochs, r.info.best_dev_loss, (out / "baseline.ckpt").c_str());
  });
  return kOk;
}

// --- dqo / raft --------------------------------------------------------------

RemoteQeConfig parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("--qe expects HOST:PORT, got '" + s + "'");
  RemoteQeConfig c;
  c.host = s.substr(0, colon);
  try {
    c.port = std::stoi(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--qe expects HOST:PORT, got '" + s + "'");
  }
  c.validate();
  return c;
}

int cmd_dqo(const Options& o, UpdateMode command_mode) {
  ExperimentPlan plan = plan_for(o);
  if (!o.mode.empty()) {
    UpdateMode m;
    try {
      m = mode_from_name(o.mode);
    } catch (const std::exception&) {
      throw ConfigError("--mode must be dqo or raft, got '" + o.mode + "'");
    }
    if (command_mode == UpdateMode::kSft && m != UpdateMode::kSft) throw ConfigError("`raft` cannot run with --mode " + o.mode);
    command_mode = m;
  }
  plan.mode = command_mode;
  const Corpus c = load_corpus_dir(o.corpus);
  plan.validate(c.registry);
  require_path(o.baseline, "baseline checkpoint");
  Checkpoint base = load_checkpoint(o.baseline);
  if (!(base.model.arch() == plan.arch_for(c.registry)))
    throw ConfigError("baseline checkpoint " + o.baseline + " does not match the plan's architecture");

  const std::uint64_t seed = seed_of(o, plan);
  const LangGroups groups = LangGroups::from_registry(c.registry, plan.dqo.langs);
  DqoConfig cfg = plan.dqo;
  cfg.seed = derive_seed(seed, "dqo");

  std::unique_ptr<QeScorer> inner;
  if (o.qe.empty()) {
    inner = std::make_unique<OracleScorer>(c.registry);
  } else {
    inner = std::make_unique<RemoteScorer>(parse_endpoint(o.qe));
  }
  CachingScorer scorer(*inner);

  const fs::path out = o.out;
  const std::string command(command_mode == UpdateMode::kSft ? "raft" : "dqo");
  run_tracked(o, command, out, [&](RunManifest& m, const std::function<void()>& begin) {
    m.config = {{"plan", plan}, {"seed", seed}, {"scorer", o.qe.empty() ? "oracle" : "remote"}};
    m.add_input(o.corpus);
    m.add_input(o.baseline);
    begin();

    std::vector<Tokens> sources;
    sources.reserve(c.splits.train.size());
    for (const auto& r : c.splits.train) sources.push_back(r.source);
    DqoRunOptions opt;
    opt.run_dir = out;
    opt.on_step = progress(o.log_every);
    opt.dev = [&](int round, const PolicyModel& model) {
      const Snapshot s = take_snapshot(round, model, plan, c.registry, c.splits, seed);
      json j = snapshot_summary(s, groups);
      std::printf("round %d: dev qe(T) %.6f, train ppl %.6f\n", round, s.dev_qe_aligned, j["train_ppl"].get<double>());
      std::fflush(stdout);
      return j;
    };
    const DqoResult res = run_dqo(base.model, sources, c.registry, scorer, cfg, plan.mode, opt);
    const auto& last = res.rounds.back();
    std::printf("%s: %zu rounds, final checkpoint %s\n", command.c_str(), res.rounds.size() - 1,
                (out / "checkpoints" / ("round_" + std::to_string(last.round) + ".ckpt")).c_str());
  });
  return kOk;
}

// --- eval --------------------------------------------------------------------

struct SystemEval {
  std::string label;
  int round = 0;
  MetricTable table;
  std::map<std::string, std::vector<double>> segments;  // metric -> per record
};

SystemEval evaluate_system(const std::string& which, const ParallelCorpus& corpus, const LanguageRegistry& registry,
                           const std::vector<std::string>& metrics, int max_len) {
  SystemEval e;
  std::vector<Tokens> outputs;
  std::optional<PolicyModel> model;
  if (which == "ideal") {
    e.label = "ideal";
    for (const auto& r : corpus) outputs.push_back(ideal_translate(registry.at(r.lang), r.source));
  } else {
    require_path(which, "checkpoint");
    Checkpoint ck = load_checkpoint(which);
    if (ck.model.arch().vocab_size != registry.vocab_size())
      throw ConfigError("checkpoint " + which + " was trained for a different vocabulary");
    e.label = fs::path(which).stem().string();
    e.round = ck.meta.value("round", 0);
    model.emplace(std::move(ck.model));
    outputs = translate_corpus(*model, corpus, registry, max_len);
  }
  const MetricTable all = evaluate_outputs(corpus, outputs, registry);
  for (const auto& m : metrics) {
    if (all.count(m)) e.table[m] = all.at(m);
  }
  e.segments["qe"] = segment_qe(corpus, outputs, registry);
  if (std::find(metrics.begin(), metrics.end(), "ppl") != metrics.end()) {
    if (!model) throw ConfigError("metric 'ppl' needs a model checkpoint, not the ideal stub");
    std::map<std::string, std::pair<double, std::size_t>> acc;
    auto& seg = e.segments["ppl"];
    for (const auto& r : corpus) {
      const Tokens in = encoder_input(registry.at(r.lang), r.source);
      const double p = segment_perplexity(sequence_log_prob(*model, in, r.target), r.target.size());
      seg.push_back(p);
      acc[r.lang].first += p;
      acc[r.lang].second += 1;
    }
    for (const auto& [lang, a] : acc) e.table["ppl"][lang] = a.first / static_cast<double>(a.second);
  }
  return e;
}

/// Mean over the group members present in `values`; NaN if none are.
double subset_mean(const std::map<std::string, double>& values, const std::set<std::string>& members) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& l : members) {
    const auto it = values.find(l);
    if (it != values.end()) {
      sum += it->second;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

int cmd_eval(const Options& o) {
  for (const auto& m : o.metrics) {
    metric_info(m);  // ConfigError for an unknown name
    if (m == "mqm") throw ConfigError("metric 'mqm' comes from human annotations; use `dqoforge mqm`");
  }
  if (o.split != "train" && o.split != "dev" && o.split != "test")
    throw ConfigError("--split must be train, dev or test");
  const fs::path dir = o.corpus;
  require_path(dir / "registry.json", "corpus file");
  require_path(dir / (o.split + ".tsv"), "corpus file");
  const LanguageRegistry registry = LanguageRegistry::load(dir / "registry.json");
  const ParallelCorpus corpus = load_corpus(dir / (o.split + ".tsv"));
  validate_corpus(corpus, registry);

  std::vector<std::string> aligned;
  int max_len = o.max_len;
  if (!o.aligned.empty()) {
    std::stringstream ss(o.aligned);
    for (std::string l; std::getline(ss, l, ',');) {
      if (!l.empty()) aligned.push_back(l);
    }
  }
  if (aligned.empty() || max_len <= 0) {
    const ExperimentPlan plan = plan_for(o);
    if (aligned.empty()) aligned = plan.dqo.langs;
    if (max_len <= 0) max_len = plan.eval.max_len;
  }
  for (const auto& l : aligned) {
    if (!registry.contains(l)) throw ConfigError("aligned language '" + l + "' is not in the registry");
  }
  const LangGroups groups = LangGroups::from_registry(registry, aligned);
  const std::uint64_t seed = o.seed_set ? o.seed : 1;

  const fs::path out = o.out;
  run_tracked(o, "eval", out, [&](RunManifest& m, const std::function<void()>& begin) {
    m.config = {{"metrics", o.metrics}, {"split", o.split}, {"aligned", aligned}, {"max_len", max_len},
                {"seed", seed},         {"trials", o.trials}, {"checkpoint", o.checkpoint}};
    if (!o.compare.empty()) m.config["compare"] = o.compare;
    m.add_input(dir / "registry.json");
    m.add_input(dir / (o.split + ".tsv"));
    for (const auto* ck : {&o.checkpoint, &o.compare}) {
      if (!ck->empty() && *ck != "ideal") m.add_input(*ck);
    }
    begin();

    const SystemEval sys = evaluate_system(o.checkpoint, corpus, registry, o.metrics, max_len);
    std::ostringstream metrics_out, groups_out;
    write_metrics_jsonl(metrics_out, metric_records(sys.table, sys.label, sys.round));
    write_group_csv(groups_out, sys.table, groups);
    std::printf("%s", groups_out.str().c_str());

    if (!o.compare.empty()) {
      const SystemEval other = evaluate_system(o.compare, corpus, registry, o.metrics, max_len);
      write_metrics_jsonl(metrics_out, metric_records(other.table, other.label, other.round));
      std::ostringstream cmp_csv;
      write_comparison_csv(cmp_csv, other.table, sys.table, groups);
      write_file(out / "compare.csv", cmp_csv.str());

      json rows = json::array();
      for (const auto& [name, members] : groups.rows()) {
        json row{{"group", name}, {"n", members.size()}, {"delta", json::object()}, {"p_u", json::object()}};
        for (const auto& [metric, values] : sys.table) {
          std::map<std::string, double> delta;
          for (const auto& [lang, v] : values) {
            const auto it = other.table.at(metric).find(lang);
            if (it != other.table.at(metric).end()) delta[lang] = v - it->second;
          }
          row["delta"][metric] = number_or_null(subset_mean(delta, members));
        }
        for (const auto& [metric, seg] : sys.segments) {
          if (!sys.table.count(metric) || members.empty()) continue;
          std::vector<double> a, b;
          for (std::size_t i = 0; i < corpus.size(); ++i) {
            if (members.count(corpus[i].lang)) {
              a.push_back(other.segments.at(metric)[i]);
              b.push_back(seg[i]);
            }
          }
          // H1: this checkpoint is better than the compared one.
          if (!metric_info(metric).higher_is_better) std::swap(a, b);
          const auto r = paired_randomization_test(a, b, o.trials, derive_seed(seed, "significance"));
          row["p_u"][metric] = r.p;
        }
        rows.push_back(row);
      }
      const json cmp{{"checkpoint", sys.label}, {"compare", other.label}, {"groups", rows}};
      write_file(out / "compare.json", cmp.dump(2) + "\n");
      std::printf("vs %s:\n", other.label.c_str());
      for (const auto& r : rows) std::printf("  %-6s delta %s p_u %s\n", r["group"].get<std::string>().c_str(),
                                             r["delta"].dump().c_str(), r["p_u"].dump().c_str());
    }
    write_file(out / "metrics.jsonl", metrics_out.str());
    write_file(out / "groups.csv", groups_out.str());
  });
  return kOk;
}

// --- report ------------------------------------------------------------------

int cmd_report(const Options& o) {
  if (!o.labels.empty() && o.labels.size() != o.runs.size())
    throw ConfigError("--label must be given once per run directory");
  std::vector<tools::RunSeries> runs;
  std::set<std::string> used;
  for (std::size_t i = 0; i < o.runs.size(); ++i) {
    const fs::path dir = fs::path(o.runs[i]).lexically_normal();
    require_path(dir, "run directory");
    std::string label = o.labels.empty() ? "" : o.labels[i];
    if (label.empty()) {
      label = dir.filename().string();
      if (label.empty()) label = dir.parent_path().filename().string();
      if (label == "run" && dir.has_parent_path()) label = dir.parent_path().filename().string();
    }
    const std::string base = label;
    for (int k = 2; used.count(label); ++k) label = base + "-" + std::to_string(k);
    used.insert(label);
    runs.push_back(tools::read_run_series(dir, label));
  }
  for (const auto& p : tools::write_report(runs, o.out)) std::printf("%s\n", p.c_str());
  return kOk;
}

// --- qe-serve ----------------------------------------------------------------

int cmd_qe_serve(const Options& o) {
  fs::path reg = o.registry;
  if (reg.empty()) {
    if (o.corpus.empty()) throw ConfigError("qe-serve needs --registry or --corpus");
    reg = fs::path(o.corpus) / "registry.json";
  }
  require_path(reg, "registry");
  const LanguageRegistry registry = LanguageRegistry::load(reg);

  // Block the signals before the server threads exist so only sigwait sees them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  MockQeServer server(registry);
  server.start(o.host, o.port);
  std::printf("listening on %s:%d\n", o.host.c_str(), server.port());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  std::printf("%s: shut down after %llu requests\n", sig == SIGINT ? "SIGINT" : "SIGTERM",
              static_cast<unsigned long long>(server.requests()));
  return kOk;
}

// --- suite -------------------------------------------------------------------

int cmd_suite(const Options& o) {
  require_path(o.config, "config");
  ExperimentPlan plan = load_plan(o.config);
  if (!o.out.empty()) plan.out_dir = o.out;
  if (o.seed_set) {
    plan.seeds = {o.seed};
    plan.required_seed_passes = 1;
  }
  const SuiteReport r = run_observation_suite(plan);
  std::printf("%s", r.text.c_str());
  return kOk;
}

// --- mqm ---------------------------------------------------------------------

std::vector<MqmError> read_annotations(const std::string& path) {
  require_path(path, "annotations");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_mqm_jsonl(in);
}

json breakdown_json(const MqmBreakdown& b) {
  json j{{"weighted", b.weighted}, {"per_segment", json::object()}};
  for (const auto& [s, v] : b.per_segment_by_severity) j["per_segment"][std::string(severity_name(s))] = v;
  for (const auto& [s, v] : b.per_segment_by_specificity) j["per_segment"][std::string(specificity_name(s))] = v;
  return j;
}

int cmd_mqm(const Options& o) {
  if (o.segments == 0) throw ConfigError("--segments must be positive");
  const auto errors = read_annotations(o.annotations);
  json j = breakdown_json(mqm_breakdown(errors, o.segments));
  if (!o.compare.empty()) {
    const auto other = read_annotations(o.compare);
    j["compare"] = breakdown_json(mqm_breakdown(other, o.segments));
    const auto a = mqm_segment_scores(errors, o.segments);
    const auto b = mqm_segment_scores(other, o.segments);
    // H1: the annotated system has fewer error points than the compared one.
    const auto r = paired_randomization_test(a, b, o.trials, derive_seed(o.seed_set ? o.seed : 1, "significance"));
    j["p_u"] = r.p;
    j["exact"] = r.exact;
  }
  std::printf("%s\n", j.dump(2).c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  o.argv.assign(argv, argv + argc);

  CLI::App app{"Quality-optimization experiments on synthetic multilingual translation.", "dqoforge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DQOFORGE_VERSION);

  auto seed_opt = [&](CLI::App* c, const char* help = "Experiment seed (default: first seed of the plan)") {
    c->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s, o.seed_set = true; }, help);
  };

  auto* gen = app.add_subcommand("gen", "Generate the registry and train/dev/test corpora");
  gen->add_option("--config", o.config, "Experiment plan (JSON)")->required();
  gen->add_option("--out", o.out, "Output directory")->required();
  seed_opt(gen);

  auto* base = app.add_subcommand("train-baseline", "Supervised baseline with early stopping on dev loss");
  base->add_option("--config", o.config, "Experiment plan (default: <corpus>/plan.json)");
  base->add_option("--corpus", o.corpus, "Directory written by `gen`")->required();
  base->add_option("--out", o.out, "Output directory")->required();
  base->add_option("--log-every", o.log_every, "Print every n-th step");
  seed_opt(base);

  auto add_run = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Experiment plan (default: <corpus>/plan.json)");
    c->add_option("--corpus", o.corpus, "Directory written by `gen`")->required();
    c->add_option("--baseline", o.baseline, "Baseline checkpoint")->required();
    c->add_option("--out", o.out, "Run directory (resumed if it exists)")->required();
    c->add_option("--mode", o.mode, "Update step: dqo or raft");
    c->add_option("--qe", o.qe, "Score with a remote QE service at HOST:PORT instead of the in-process oracle");
    c->add_option("--log-every", o.log_every, "Print every n-th step");
    seed_opt(c);
  };
  auto* dqo = app.add_subcommand("dqo", "Multi-round quality optimization (DPO update)");
  add_run(dqo);
  auto* raft = app.add_subcommand("raft", "Same rounds with a supervised update on the chosen output");
  add_run(raft);

  auto* eval = app.add_subcommand("eval", "Per-language and per-group metrics of a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint, or 'ideal' for the ideal-translation stub")->required();
  eval->add_option("--corpus", o.corpus, "Directory written by `gen`")->required();
  eval->add_option("--out", o.out, "Output directory")->required();
  eval->add_option("--split", o.split, "train, dev or test");
  eval->add_option("--metrics", o.metrics, "Comma-separated metric names")->delimiter(',');
  eval->add_option("--compare", o.compare, "Second checkpoint: adds deltas and p_u per group");
  eval->add_option("--config", o.config, "Plan for the aligned set (default: <corpus>/plan.json)");
  eval->add_option("--aligned", o.aligned, "Comma-separated aligned languages (overrides the plan)");
  eval->add_option("--max-len", o.max_len, "Decoding budget (default: from the plan)");
  eval->add_option("--trials", o.trials, "Monte Carlo trials of the randomization test");
  seed_opt(eval);

  auto* report = app.add_subcommand("report", "Round series of run directories as CSV and SVG");
  report->add_option("runs", o.runs, "Run directories")->required();
  report->add_option("--out", o.out, "Output directory")->required();
  report->add_option("--label", o.labels, "Series label, once per run directory");

  auto* serve = app.add_subcommand("qe-serve", "Serve oracle QE over HTTP until SIGINT or SIGTERM");
  serve->add_option("--registry", o.registry, "registry.json");
  serve->add_option("--corpus", o.corpus, "Directory holding registry.json");
  serve->add_option("--host", o.host, "Bind address");
  serve->add_option("--port", o.port, "Port (0 picks a free one)");

  auto* suite = app.add_subcommand("suite", "Run the whole observation suite of a plan");
  suite->add_option("--config", o.config, "Experiment plan (JSON)")->required();
  suite->add_option("--out", o.out, "Output directory (default: the plan's out_dir)");
  seed_opt(suite);

  auto* mqm = app.add_subcommand("mqm", "Weighted MQM score of error annotations");
  mqm->add_option("--annotations", o.annotations, "JSONL {segment_id, category, severity}")->required();
  mqm->add_option("--segments", o.segments, "Number of annotated segments")->required();
  mqm->add_option("--compare", o.compare, "Annotations of a second system: adds p_u");
  mqm->add_option("--trials", o.trials, "Monte Carlo trials of the randomization test");
  seed_opt(mqm, "Seed of the Monte Carlo test (default: 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (app.got_subcommand(gen)) return cmd_gen(o);
    if (app.got_subcommand(base)) return cmd_train_baseline(o);
    if (app.got_subcommand(dqo)) return cmd_dqo(o, UpdateMode::kDpo);
    if (app.got_subcommand(raft)) return cmd_dqo(o, UpdateMode::kSft);
    if (app.got_subcommand(eval)) return cmd_eval(o);
    if (app.got_subcommand(report)) return cmd_report(o);
    if (app.got_subcommand(serve)) return cmd_qe_serve(o);
    if (app.got_subcommand(suite)) return cmd_suite(o);
    if (app.got_subcommand(mqm)) return cmd_mqm(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dqoforge: error: %s\n", e.what());
    return exit_code_for(e);
  }
  return kUsage;
}
