// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Hot paths of a desk-scale round: scoring, decoding, and DPO gradients.

#include <benchmark/benchmark.h>

#include <vector>

#include "dqoforge/evalsuite.hpp"
#include "dqoforge/experiment.hpp"
#include "dqoforge/qescore.hpp"
#include "dqoforge/rng.hpp"
#include "dqoforge/seqmodel.hpp"
#include "dqoforge/synthdata.hpp"
#include "dqoforge/trainer.hpp"

namespace {

using namespace dqoforge;

struct Fixture {
  ExperimentPlan plan = ExperimentPlan::desk();
  LanguageRegistry registry = plan.registry.build();
  CorpusSplits splits = seed_corpus(plan, registry, 1);
  PolicyModel model{plan.arch_for(registry), 7};
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_SequenceLogProb(benchmark::State& state) {
  const auto& f = fixture();
  const auto& r = f.splits.test.front();
  const Tokens in = encoder_input(f.registry.at(r.lang), r.source);
  for (auto _ : state) benchmark::DoNotOptimize(sequence_log_prob(f.model, in, r.target));
}
BENCHMARK(BM_SequenceLogProb);

void BM_GreedyDecode(benchmark::State& state) {
  const auto& f = fixture();
  const auto& r = f.splits.test.front();
  const Tokens in = encoder_input(f.registry.at(r.lang), r.source);
  for (auto _ : state) benchmark::DoNotOptimize(greedy_decode(f.model, in, 32));
}
BENCHMARK(BM_GreedyDecode);

// One source's candidate set: greedy plus k - 1 samples.
void BM_DecodeCandidates(benchmark::State& state) {
  const auto& f = fixture();
  const auto& r = f.splits.test.front();
  const Tokens in = encoder_input(f.registry.at(r.lang), r.source);
  const int k = static_cast<int>(state.range(0));
  for (auto _ : state) {
    std::vector<RngStream> streams;
    for (int i = 0; i < k - 1; ++i) streams.push_back(RngStream(11, {static_cast<std::uint64_t>(i)}));
    benchmark::DoNotOptimize(decode_candidates(f.model, in, f.plan.dqo.sampler, streams));
  }
}
BENCHMARK(BM_DecodeCandidates)->Arg(4)->Arg(16);

void BM_DpoBatchGradient(benchmark::State& state) {
  const auto& f = fixture();
  std::vector<TrainExample> ex;
  for (std::size_t i = 0; i < static_cast<std::size_t>(state.range(0)); ++i) {
    const auto& r = f.splits.train[i];
    TrainExample e;
    e.input = encoder_input(f.registry.at(r.lang), r.source);
    e.chosen = r.target;
    e.rejected = ideal_translate(f.registry.at(r.lang), r.source);
    e.ref_w = sequence_log_prob(f.model, e.input, e.chosen);
    e.ref_l = sequence_log_prob(f.model, e.input, e.rejected);
    ex.push_back(std::move(e));
  }
  std::vector<std::size_t> batch(ex.size());
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
  for (auto _ : state) benchmark::DoNotOptimize(batch_loss_grad(f.model, ex, batch, UpdateMode::kDpo, 0.5));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DpoBatchGradient)->Arg(1)->Arg(16);

void BM_OracleQe(benchmark::State& state) {
  const auto& f = fixture();
  const auto& r = f.splits.test.front();
  const auto& spec = f.registry.at(r.lang);
  for (auto _ : state) benchmark::DoNotOptimize(oracle_qe(r.source, r.target, spec));
}
BENCHMARK(BM_OracleQe);

void BM_CorpusBleu(benchmark::State& state) {
  const auto& f = fixture();
  std::vector<Tokens> hyp, ref;
  for (const auto& r : f.splits.test) {
    ref.push_back(r.target);
    hyp.push_back(ideal_translate(f.registry.at(r.lang), r.source));
  }
  for (auto _ : state) benchmark::DoNotOptimize(corpus_bleu(hyp, ref));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(hyp.size()));
}
BENCHMARK(BM_CorpusBleu);

}  // namespace

BENCHMARK_MAIN();
