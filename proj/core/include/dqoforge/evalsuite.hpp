// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Measurement: corpus BLEU, training-data perplexity, language-group
// aggregation, weighted MQM, the paired approximate-randomization test and
// the transliteration usage rate.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/seqmodel.hpp"
#include "dqoforge/synthdata.hpp"

namespace dqoforge {

// ---------------------------------------------------------------------------
// BLEU

/// Raw statistics of a corpus: clipped n-gram matches and totals for n = 1..4.
struct BleuStats {
  std::array<std::size_t, 4> correct{};
  std::array<std::size_t, 4> total{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references);

/// Corpus BLEU-4 on whitespace-split strings: one reference, exponential
/// smoothing of zero-match orders, no effective order, brevity penalty.
/// Throws InputError on an empty corpus or mismatched lengths.
double corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references);

/// Same on token sequences; a trailing EOS is ignored on either side.
double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references);

std::string tokens_to_text(std::span<const TokenId> tokens);  // "12 7 9", EOS stripped

// ---------------------------------------------------------------------------
// Perplexity

/// exp(-log_prob / length).
double segment_perplexity(double log_prob, std::size_t length);

/// Arithmetic mean over records of the per-token perplexity of the record's
/// target. Throws InputError on an empty sample.
double training_perplexity(const PolicyModel& model, const ParallelCorpus& sample, const LanguageRegistry& registry);

// ---------------------------------------------------------------------------
// Language groups

/// M: all languages; T: aligned; R: languages sharing a family with some
/// member of T (T itself included). Derived: T^c, R^c, R & T^c.
class LangGroups {
 public:
  LangGroups(std::set<std::string> all, std::set<std::string> aligned, std::set<std::string> related);
  static LangGroups from_registry(const LanguageRegistry& registry, std::span<const std::string> aligned);

  const std::set<std::string>& all() const noexcept { return all_; }
  const std::set<std::string>& aligned() const noexcept { return aligned_; }
  const std::set<std::string>& related() const noexcept { return related_; }
  std::set<std::string> unaligned() const;             // T^c
  std::set<std::string> unrelated() const;             // R^c
  std::set<std::string> related_unaligned() const;     // R & T^c

  /// Table rows in display order: All, T, T^c, R&T^c, R^c.
  std::vector<std::pair<std::string, std::set<std::string>>> rows() const;

 private:
  std::set<std::string> all_, aligned_, related_;
};

struct GroupMean {
  std::string group;
  std::size_t size = 0;
  double mean = 0.0;  // NaN for an empty group
};

/// Unweighted mean per group row. Throws InputError if a language of M has no value.
std::vector<GroupMean> group_aggregate(const std::map<std::string, double>& per_language, const LangGroups& groups);

/// metric -> language -> value.
using MetricTable = std::map<std::string, std::map<std::string, double>>;

/// CSV with header "group,n,<metric>..." and one row per group.
void write_group_csv(std::ostream& out, const MetricTable& table, const LangGroups& groups);

// ---------------------------------------------------------------------------
// MQM

enum class Severity { kNonTranslation, kMajor, kMinor, kTrivialPunct };
enum class Specificity { kAgnostic, kSpecific, kOther };

std::string_view severity_name(Severity s);
Severity severity_from_name(std::string_view name);  // InputError if unknown
std::string_view specificity_name(Specificity s);

/// Specificity bucket of an error category such as "Fluency/Grammar".
/// Throws InputError for a category outside the taxonomy.
Specificity mqm_specificity(std::string_view category);
const std::map<std::string, Specificity, std::less<>>& mqm_taxonomy();

double severity_weight(Severity s);  // 25, 5, 1, 0.1

struct MqmError {
  std::size_t segment = 0;
  std::string category;
  Severity severity = Severity::kMinor;
};

/// Weighted error points per segment.
double mqm_weighted_score(std::span<const MqmError> errors, std::size_t n_segments);

/// Weighted points of each segment; the input of the significance test.
std::vector<double> mqm_segment_scores(std::span<const MqmError> errors, std::size_t n_segments);

/// Error counts per segment broken down by severity and by specificity.
struct MqmBreakdown {
  std::map<Severity, double> per_segment_by_severity;
  std::map<Specificity, double> per_segment_by_specificity;
  double weighted = 0.0;
};
MqmBreakdown mqm_breakdown(std::span<const MqmError> errors, std::size_t n_segments);

/// Line-delimited JSON {segment_id, category, severity}.
std::vector<MqmError> read_mqm_jsonl(std::istream& in);

// ---------------------------------------------------------------------------
// Significance

enum class RandomizationMode { kAuto, kExact, kMonteCarlo };

struct RandomizationResult {
  double p = 1.0;
  double observed = 0.0;  // mean(b - a)
  bool exact = false;
  std::uint64_t trials = 0;
  std::uint64_t count = 0;  // flips with statistic >= observed
};

/// One-sided paired approximate randomization: H1 is "a scores lower than b"
/// (lower is better, as with MQM points). Exact sign-flip enumeration for
/// n <= 20 under kAuto, otherwise Monte Carlo with p = (count + 1)/(trials + 1).
RandomizationResult paired_randomization_test(std::span<const double> a, std::span<const double> b,
                                              std::uint64_t trials, std::uint64_t seed,
                                              RandomizationMode mode = RandomizationMode::kAuto);

// ---------------------------------------------------------------------------
// Feature usage

struct FeatureCount {
  std::size_t entities = 0;  // entity tokens in the sources
  std::size_t marked = 0;    // of those, rendered in the language's marked form
  double rate() const noexcept { return entities == 0 ? 0.0 : static_cast<double>(marked) / entities; }
};

/// Counts, per source entity occurrence, whether the output carries the
/// language-specific marked form (multiset matching). Requires a
/// transliterating language.
FeatureCount feature_usage(std::span<const Tokens> sources, std::span<const Tokens> outputs, const LanguageSpec& spec);
double feature_usage_rate(std::span<const Tokens> sources, std::span<const Tokens> outputs, const LanguageSpec& spec);

// ---------------------------------------------------------------------------
// Model evaluation

/// Registered metric names and their direction.
struct MetricInfo {
  std::string name;
  bool higher_is_better = true;
};
const std::vector<MetricInfo>& metric_registry();
const MetricInfo& metric_info(std::string_view name);  // ConfigError if unknown

/// Greedy translations of every record, in corpus order.
std::vector<Tokens> translate_corpus(const PolicyModel& model, const ParallelCorpus& corpus,
                                     const LanguageRegistry& registry, int max_len);

/// Per-segment oracle QE of outputs against the records' sources.
std::vector<double> segment_qe(const ParallelCorpus& corpus, std::span<const Tokens> outputs,
                               const LanguageRegistry& registry);

/// Per-language "qe", "bleu" and "feature_usage" (the last only for
/// languages with entities in the corpus).
MetricTable evaluate_outputs(const ParallelCorpus& corpus, std::span<const Tokens> outputs,
                             const LanguageRegistry& registry);

struct MetricRecord {
  std::string run_id;
  int round = 0;
  std::string lang;
  std::string metric;
  double value = 0.0;
};
void to_json(nlohmann::json& j, const MetricRecord& r);
void from_json(const nlohmann::json& j, MetricRecord& r);

std::vector<MetricRecord> metric_records(const MetricTable& table, const std::string& run_id, int round);
void write_metrics_jsonl(std::ostream& out, std::span<const MetricRecord> records);
std::vector<MetricRecord> read_metrics_jsonl(std::istream& in);

}  // namespace dqoforge
