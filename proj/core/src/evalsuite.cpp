// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <cstdio>
#include <iterator>
#include <sstream>

#include "dqoforge/error.hpp"
#include "dqoforge/qescore.hpp"
#include "dqoforge/rng.hpp"

namespace dqoforge {
namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& words, std::size_t n) {
  NgramCounts c;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++c[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                 words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return c;
}

std::span<const TokenId> strip_eos(std::span<const TokenId> t) {
  if (!t.empty() && t.back() == Vocab::kEos) return t.first(t.size() - 1);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// BLEU

BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  if (hypotheses.size() != references.size()) throw InputError("corpus_bleu: hypothesis/reference count mismatch");
  BleuStats s;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto hyp = split_ws(hypotheses[i]);
    const auto ref = split_ws(references[i]);
    s.hyp_len += hyp.size();
    s.ref_len += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = count_ngrams(hyp, n);
      const auto r = count_ngrams(ref, n);
      for (const auto& [gram, cnt] : h) {
        const auto it = r.find(gram);
        if (it != r.end()) s.correct[n - 1] += std::min(cnt, it->second);
      }
      if (hyp.size() >= n) s.total[n - 1] += hyp.size() - n + 1;
    }
  }
  return s;
}

double corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  if (hypotheses.empty()) throw InputError("corpus_bleu: empty corpus");
  const BleuStats s = bleu_stats(hypotheses, references);

  // Zero-match orders get 1/(2^k * total), k counting such orders so far; an
  // order with no n-grams at all leaves its precision at zero.
  std::array<double, 4> precision{};
  double smooth = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.total[n] == 0) break;
    if (s.correct[n] == 0) {
      smooth *= 2.0;
      precision[n] = 1.0 / (smooth * static_cast<double>(s.total[n]));
    } else {
      precision[n] = static_cast<double>(s.correct[n]) / static_cast<double>(s.total[n]);
    }
  }
  double log_sum = 0.0;
  for (double p : precision) {
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  double bp = 1.0;
  if (s.hyp_len < s.ref_len) {
    bp = s.hyp_len == 0 ? 0.0 : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len));
  }
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

std::string tokens_to_text(std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : strip_eos(tokens)) {
    if (!out.empty()) out += ' ';
    out += std::to_string(t);
  }
  return out;
}

double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references) {
  std::vector<std::string> h, r;
  h.reserve(hypotheses.size());
  r.reserve(references.size());
  for (const auto& t : hypotheses) h.push_back(tokens_to_text(t));
  for (const auto& t : references) r.push_back(tokens_to_text(t));
  return corpus_bleu(std::span<const std::string>(h), std::span<const std::string>(r));
}

// ---------------------------------------------------------------------------
// Perplexity

double segment_perplexity(double log_prob, std::size_t length) {
  if (length == 0) throw InputError("segment_perplexity: empty target");
  return std::exp(-log_prob / static_cast<double>(length));
}

double training_perplexity(const PolicyModel& model, const ParallelCorpus& sample, const LanguageRegistry& registry) {
  if (sample.empty()) throw InputError("training_perplexity: empty sample");
  double sum = 0.0;
  for (const auto& r : sample) {
    const Tokens input = encoder_input(registry.at(r.lang), r.source);
    sum += segment_perplexity(sequence_log_prob(model, input, r.target), r.target.size());
  }
  return sum / static_cast<double>(sample.size());
}

// ---------------------------------------------------------------------------
// Language groups

LangGroups::LangGroups(std::set<std::string> all, std::set<std::string> aligned, std::set<std::string> related)
    : all_(std::move(all)), aligned_(std::move(aligned)), related_(std::move(related)) {
  if (!std::includes(related_.begin(), related_.end(), aligned_.begin(), aligned_.end()))
    throw InputError("LangGroups: aligned set must be contained in the related set");
  if (!std::includes(all_.begin(), all_.end(), related_.begin(), related_.end()))
    throw InputError("LangGroups: related set must be contained in the full set");
}

LangGroups LangGroups::from_registry(const LanguageRegistry& registry, std::span<const std::string> aligned) {
  std::set<std::string> all, t, r;
  std::set<int> families;
  for (const auto& id : aligned) {
    families.insert(registry.at(id).family);  // throws on unknown ids
    t.insert(id);
  }
  for (const auto& spec : registry.languages()) {
    all.insert(spec.id);
    if (families.count(spec.family) != 0) r.insert(spec.id);
  }
  return LangGroups(std::move(all), std::move(t), std::move(r));
}

namespace {
std::set<std::string> set_minus(const std::set<std::string>& a, const std::set<std::string>& b) {
  std::set<std::string> out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
  return out;
}
}  // namespace

std::set<std::string> LangGroups::unaligned() const { return set_minus(all_, aligned_); }
std::set<std::string> LangGroups::unrelated() const { return set_minus(all_, related_); }
std::set<std::string> LangGroups::related_unaligned() const { return set_minus(related_, aligned_); }

std::vector<std::pair<std::string, std::set<std::string>>> LangGroups::rows() const {
  return {{"All", all_}, {"T", aligned_}, {"T^c", unaligned()}, {"R&T^c", related_unaligned()}, {"R^c", unrelated()}};
}

std::vector<GroupMean> group_aggregate(const std::map<std::string, double>& per_language, const LangGroups& groups) {
  for (const auto& id : groups.all()) {
    if (per_language.count(id) == 0) throw InputError("group_aggregate: no value for language '" + id + "'");
  }
  std::vector<GroupMean> out;
  for (const auto& [name, members] : groups.rows()) {
    GroupMean g{name, members.size(), std::numeric_limits<double>::quiet_NaN()};
    if (!members.empty()) {
      double sum = 0.0;
      for (const auto& id : members) sum += per_language.at(id);
      g.mean = sum / static_cast<double>(members.size());
    }
    out.push_back(std::move(g));
  }
  return out;
}

void write_group_csv(std::ostream& out, const MetricTable& table, const LangGroups& groups) {
  out << "group,n";
  std::vector<std::vector<GroupMean>> cols;
  for (const auto& [metric, values] : table) {
    out << ',' << metric;
    // Metrics defined only on a subset (feature usage) aggregate over that subset.
    std::set<std::string> have;
    for (const auto& [lang, v] : values) have.insert(lang);
    std::set<std::string> a, t, r;
    for (const auto& id : groups.all()) if (have.count(id)) a.insert(id);
    for (const auto& id : groups.aligned()) if (have.count(id)) t.insert(id);
    for (const auto& id : groups.related()) if (have.count(id)) r.insert(id);
    cols.push_back(group_aggregate(values, LangGroups(a, t, r)));
  }
  out << '\n';
  const auto rows = groups.rows();
  char buf[64];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].first << ',' << rows[i].second.size();
    for (const auto& col : cols) {
      if (std::isnan(col[i].mean)) {
        out << ',';
      } else {
        std::snprintf(buf, sizeof buf, ",%.6f", col[i].mean);
        out << buf;
      }
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// MQM

std::string_view severity_name(Severity s) {
  switch (s) {
    case Severity::kNonTranslation: return "non_translation";
    case Severity::kMajor: return "major";
    case Severity::kMinor: return "minor";
    case Severity::kTrivialPunct: return "trivial_punct";
  }
  return "?";
}

Severity severity_from_name(std::string_view name) {
  for (Severity s : {Severity::kNonTranslation, Severity::kMajor, Severity::kMinor, Severity::kTrivialPunct}) {
    if (severity_name(s) == name) return s;
  }
  throw InputError("unknown MQM severity '" + std::string(name) + "'");
}

std::string_view specificity_name(Specificity s) {
  switch (s) {
    case Specificity::kAgnostic: return "agnostic";
    case Specificity::kSpecific: return "specific";
    case Specificity::kOther: return "other";
  }
  return "?";
}

const std::map<std::string, Specificity, std::less<>>& mqm_taxonomy() {
  static const std::map<std::string, Specificity, std::less<>> taxonomy = [] {
    std::map<std::string, Specificity, std::less<>> m;
    for (const char* c : {"Accuracy/Creative Reinterpretation", "Accuracy/Mistranslation",
                          "Accuracy/Source language fragment", "Accuracy/Addition", "Accuracy/Omission",
                          "Fluency/Inconsistency", "Terminology/Inconsistent", "Non-translation"}) {
      m.emplace(c, Specificity::kAgnostic);
    }
    for (const char* c : {"Fluency/Grammar", "Fluency/Register", "Fluency/Spelling", "Fluency/Punctuation",
                          "Fluency/Character encoding", "Style/Unnatural or awkward", "Style/Bad sentence structure",
                          "Terminology/Inappropriate for context", "Locale convention/Address format",
                          "Locale convention/Date format", "Locale convention/Currency format",
                          "Locale convention/Telephone format", "Locale convention/Time format",
                          "Locale convention/Name format"}) {
      m.emplace(c, Specificity::kSpecific);
    }
    m.emplace("Other", Specificity::kOther);
    m.emplace("Source issue", Specificity::kOther);
    return m;
  }();
  return taxonomy;
}

Specificity mqm_specificity(std::string_view category) {
  const auto& t = mqm_taxonomy();
  const auto it = t.find(category);
  if (it == t.end()) throw InputError("unknown MQM category '" + std::string(category) + "'");
  return it->second;
}

double severity_weight(Severity s) {
  switch (s) {
    case Severity::kNonTranslation: return 25.0;
    case Severity::kMajor: return 5.0;
    case Severity::kMinor: return 1.0;
    case Severity::kTrivialPunct: return 0.1;
  }
  return 0.0;
}

std::vector<double> mqm_segment_scores(std::span<const MqmError> errors, std::size_t n_segments) {
  if (n_segments == 0) throw InputError("mqm: n_segments must be >= 1");
  std::vector<double> out(n_segments, 0.0);
  for (const auto& e : errors) {
    if (e.segment >= n_segments) throw InputError("mqm: segment id out of range");
    out[e.segment] += severity_weight(e.severity);
  }
  return out;
}

MqmBreakdown mqm_breakdown(std::span<const MqmError> errors, std::size_t n_segments) {
  if (n_segments == 0) throw InputError("mqm: n_segments must be >= 1");
  // Integer counts first so the weighted total does not depend on record order.
  std::map<Severity, std::size_t> by_sev;
  std::map<Specificity, std::size_t> by_spec;
  for (const auto& e : errors) {
    if (e.segment >= n_segments) throw InputError("mqm: segment id out of range");
    ++by_sev[e.severity];
    ++by_spec[mqm_specificity(e.category)];
  }
  const double n = static_cast<double>(n_segments);
  MqmBreakdown b;
  double points = 0.0;
  for (Severity s : {Severity::kNonTranslation, Severity::kMajor, Severity::kMinor, Severity::kTrivialPunct}) {
    b.per_segment_by_severity[s] = static_cast<double>(by_sev[s]) / n;
    points += severity_weight(s) * static_cast<double>(by_sev[s]);
  }
  for (Specificity s : {Specificity::kAgnostic, Specificity::kSpecific, Specificity::kOther}) {
    b.per_segment_by_specificity[s] = static_cast<double>(by_spec[s]) / n;
  }
  b.weighted = points / n;
  return b;
}

double mqm_weighted_score(std::span<const MqmError> errors, std::size_t n_segments) {
  return mqm_breakdown(errors, n_segments).weighted;
}

std::vector<MqmError> read_mqm_jsonl(std::istream& in) {
  std::vector<MqmError> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MqmError e;
      e.segment = j.at("segment_id").get<std::size_t>();
      e.category = j.at("category").get<std::string>();
      e.severity = severity_from_name(j.at("severity").get<std::string>());
      mqm_specificity(e.category);
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw InputError("mqm line " + std::to_string(lineno) + ": " + ex.what());
    } catch (const InputError& ex) {
      throw InputError("mqm line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Significance

RandomizationResult paired_randomization_test(std::span<const double> a, std::span<const double> b,
                                              std::uint64_t trials, std::uint64_t seed, RandomizationMode mode) {
  if (a.size() != b.size()) throw InputError("randomization test: length mismatch");
  if (a.empty()) throw InputError("randomization test: empty input");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = b[i] - a[i];
    scale += std::abs(d[i]);
  }
  double observed = 0.0;
  for (double v : d) observed += v;
  // Sums that are mathematically equal may differ in the last bits; count
  // those as ties, which can only make p larger.
  const double threshold = observed - 1e-12 * scale;

  RandomizationResult r;
  r.observed = observed / static_cast<double>(n);
  const bool exact = mode == RandomizationMode::kExact || (mode == RandomizationMode::kAuto && n <= 20);
  if (exact) {
    if (n > 30) throw InputError("randomization test: exact mode limited to n <= 30");
    const std::uint64_t total = std::uint64_t{1} << n;
    std::uint64_t count = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1U) ? -d[i] : d[i];
      count += s >= threshold;
    }
    r.exact = true;
    r.trials = total;
    r.count = count;
    r.p = static_cast<double>(count) / static_cast<double>(total);
    return r;
  }
  if (trials == 0) throw InputError("randomization test: trials must be >= 1");
  RngStream rng(seed, {hash_name("randomization")});
  std::uint64_t count = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    double s = 0.0;
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i % 64 == 0) bits = rng.next_u64();
      s += (bits & 1U) ? -d[i] : d[i];
      bits >>= 1;
    }
    count += s >= threshold;
  }
  r.trials = trials;
  r.count = count;
  r.p = static_cast<double>(count + 1) / static_cast<double>(trials + 1);
  return r;
}

// ---------------------------------------------------------------------------
// Feature usage

FeatureCount feature_usage(std::span<const Tokens> sources, std::span<const Tokens> outputs, const LanguageSpec& spec) {
  if (sources.size() != outputs.size()) throw InputError("feature_usage: source/output count mismatch");
  if (!spec.features.transliteration) throw InputError("feature_usage: language '" + spec.id + "' does not transliterate");
  const TokenLayout& L = spec.layout;
  FeatureCount c;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    std::map<TokenId, std::size_t> marked_in_output;
    for (TokenId t : outputs[i]) ++marked_in_output[t];
    for (TokenId t : sources[i]) {
      if (!L.is_entity(t)) continue;
      ++c.entities;
      auto& avail = marked_in_output[L.marked(spec.index, t - L.entity(0))];
      if (avail > 0) {
        --avail;
        ++c.marked;
      }
    }
  }
  return c;
}

double feature_usage_rate(std::span<const Tokens> sources, std::span<const Tokens> outputs, const LanguageSpec& spec) {
  return feature_usage(sources, outputs, spec).rate();
}

// ---------------------------------------------------------------------------
// Model evaluation

const std::vector<MetricInfo>& metric_registry() {
  static const std::vector<MetricInfo> reg{
      {"qe", true}, {"bleu", true}, {"feature_usage", true}, {"ppl", false}, {"mqm", false}};
  return reg;
}

const MetricInfo& metric_info(std::string_view name) {
  for (const auto& m : metric_registry()) {
    if (m.name == name) return m;
  }
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

std::vector<Tokens> translate_corpus(const PolicyModel& model, const ParallelCorpus& corpus,
                                     const LanguageRegistry& registry, int max_len) {
  std::vector<Tokens> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus) out.push_back(greedy_decode(model, encoder_input(registry.at(r.lang), r.source), max_len));
  return out;
}

std::vector<double> segment_qe(const ParallelCorpus& corpus, std::span<const Tokens> outputs,
                               const LanguageRegistry& registry) {
  if (corpus.size() != outputs.size()) throw InputError("segment_qe: corpus/output count mismatch");
  std::vector<double> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.push_back(oracle_qe(corpus[i].source, outputs[i], registry.at(corpus[i].lang)).value());
  }
  return out;
}

MetricTable evaluate_outputs(const ParallelCorpus& corpus, std::span<const Tokens> outputs,
                             const LanguageRegistry& registry) {
  const auto qe = segment_qe(corpus, outputs, registry);
  struct Acc {
    double qe = 0.0;
    std::vector<Tokens> hyp, ref, src;
  };
  std::map<std::string, Acc> by_lang;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto& a = by_lang[corpus[i].lang];
    a.qe += qe[i];
    a.hyp.push_back(outputs[i]);
    a.ref.push_back(corpus[i].target);
    a.src.push_back(corpus[i].source);
  }
  MetricTable t;
  for (const auto& [lang, a] : by_lang) {
    t["qe"][lang] = a.qe / static_cast<double>(a.hyp.size());
    t["bleu"][lang] = corpus_bleu(std::span<const Tokens>(a.hyp), std::span<const Tokens>(a.ref));
    const auto& spec = registry.at(lang);
    if (spec.features.transliteration) {
      const auto fc = feature_usage(a.src, a.hyp, spec);
      if (fc.entities > 0) t["feature_usage"][lang] = fc.rate();
    }
  }
  return t;
}

void to_json(nlohmann::json& j, const MetricRecord& r) {
  j = nlohmann::json{{"run_id", r.run_id}, {"round", r.round}, {"lang", r.lang}, {"metric", r.metric},
                     {"value", r.value}};
}

void from_json(const nlohmann::json& j, MetricRecord& r) {
  j.at("run_id").get_to(r.run_id);
  j.at("round").get_to(r.round);
  j.at("lang").get_to(r.lang);
  j.at("metric").get_to(r.metric);
  j.at("value").get_to(r.value);
}

std::vector<MetricRecord> metric_records(const MetricTable& table, const std::string& run_id, int round) {
  std::vector<MetricRecord> out;
  for (const auto& [metric, values] : table) {
    for (const auto& [lang, v] : values) out.push_back({run_id, round, lang, metric, v});
  }
  return out;
}

void write_metrics_jsonl(std::ostream& out, std::span<const MetricRecord> records) {
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
}

std::vector<MetricRecord> read_metrics_jsonl(std::istream& in) {
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<MetricRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("metrics.jsonl: ") + e.what());
    }
  }
  return out;
}

}  // namespace dqoforge
