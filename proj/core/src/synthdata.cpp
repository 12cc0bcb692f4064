// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/synthdata.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dqoforge/error.hpp"

namespace dqoforge {

void TokenLayout::validate() const {
  if (num_languages < 1) throw InputError("token layout: need at least one language");
  if (num_families < 1) throw InputError("token layout: need at least one family");
  if (content_words < 2) throw InputError("token layout: need at least two content words");
  if (entities < 0) throw InputError("token layout: negative entity count");
}

std::vector<int> family_reorder_rule(int family) {
  RngStream rng(hash_name("family-reorder"), {static_cast<std::uint64_t>(family)});
  const int block = 2 + static_cast<int>(rng.below(2));
  std::vector<int> perm(static_cast<std::size_t>(block));
  std::iota(perm.begin(), perm.end(), 0);
  const std::vector<int> identity = perm;
  while (perm == identity) rng.shuffle(perm);
  return perm;
}

LanguageSpec make_language(const TokenLayout& layout, int index, std::string id, std::uint64_t seed, int family,
                           FeatureFlags flags, std::string group) {
  layout.validate();
  if (family < 0 || family >= layout.num_families) {
    throw InputError("family id " + std::to_string(family) + " outside [0, " + std::to_string(layout.num_families) + ")");
  }
  if (index < 0 || index >= layout.num_languages) throw InputError("language index out of range");
  LanguageSpec spec;
  spec.id = std::move(id);
  spec.index = index;
  spec.family = family;
  spec.group = std::move(group);
  spec.features = flags;
  spec.reorder = family_reorder_rule(family);
  spec.layout = layout;

  // Family base permutation, then a language-specific reshuffle of a third
  // of the words.
  RngStream family_rng(hash_name("family-bijection"), {static_cast<std::uint64_t>(family)});
  std::vector<int> base(static_cast<std::size_t>(layout.content_words));
  std::iota(base.begin(), base.end(), 0);
  family_rng.shuffle(base);

  RngStream rng(seed, {hash_name("language")});
  std::vector<int> positions(base.size());
  std::iota(positions.begin(), positions.end(), 0);
  rng.shuffle(positions);
  const std::size_t moved = std::max<std::size_t>(2, base.size() / 3);
  positions.resize(moved);
  std::vector<int> values;
  for (int p : positions) values.push_back(base[static_cast<std::size_t>(p)]);
  const std::vector<int> before = values;
  rng.shuffle(values);
  if (values == before) std::swap(values[0], values[1]);
  std::vector<int> perm = base;
  for (std::size_t i = 0; i < moved; ++i) perm[static_cast<std::size_t>(positions[i])] = values[i];

  spec.bijection.reserve(perm.size());
  for (int p : perm) spec.bijection.push_back(layout.target_word(p));
  return spec;
}

Tokens encoder_input(const LanguageSpec& spec, std::span<const TokenId> source) {
  Tokens out;
  out.reserve(source.size() + 2);
  out.push_back(spec.layout.lang_tag(spec.index));
  out.insert(out.end(), source.begin(), source.end());
  out.push_back(Vocab::kEos);
  return out;
}

namespace {

void apply_reorder(const std::vector<int>& rule, Tokens& tokens) {
  const std::size_t b = rule.size();
  Tokens block(b);
  for (std::size_t start = 0; start + b <= tokens.size(); start += b) {
    for (std::size_t j = 0; j < b; ++j) block[j] = tokens[start + static_cast<std::size_t>(rule[j])];
    std::copy(block.begin(), block.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start));
  }
}

void check_source(const TokenLayout& layout, std::span<const TokenId> source) {
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!layout.is_content_source(source[i])) {
      throw InputError("token " + std::to_string(source[i]) + " at position " + std::to_string(i) +
                       " is not in the source content vocabulary");
    }
  }
}

/// Renders content (no EOS). Positions in `untranslated` are copied
/// verbatim; `skip_transliteration` copies every entity verbatim.
Tokens render(const LanguageSpec& spec, std::span<const TokenId> source, const std::vector<bool>& untranslated,
              bool skip_transliteration) {
  const TokenLayout& L = spec.layout;
  Tokens out;
  out.reserve(source.size() + 2);
  for (std::size_t i = 0; i < source.size(); ++i) {
    const TokenId t = source[i];
    if (!untranslated.empty() && untranslated[i]) {
      out.push_back(t);
    } else if (L.is_source_word(t)) {
      out.push_back(spec.bijection[static_cast<std::size_t>(t - L.source_word(0))]);
    } else if (spec.features.transliteration && !skip_transliteration) {
      out.push_back(L.marked(spec.index, t - L.entity(0)));
    } else {
      out.push_back(t);
    }
  }
  apply_reorder(spec.reorder, out);
  if (spec.features.suffixing) out.push_back(L.suffix_marker(spec.family));
  return out;
}

TokenId random_target_word(const TokenLayout& L, RngStream& rng) {
  return L.target_word(static_cast<int>(rng.below(static_cast<std::uint64_t>(L.content_words))));
}

int effect_count(std::size_t n, int divisor, RngStream& rng) {
  const int hi = std::max(1, static_cast<int>(n) / divisor);
  return rng.uniform_int(1, hi);
}

}  // namespace

Tokens ideal_translate(const LanguageSpec& spec, std::span<const TokenId> source) {
  check_source(spec.layout, source);
  Tokens out = render(spec, source, {}, false);
  out.push_back(Vocab::kEos);
  return out;
}

// ---------------------------------------------------------------------------
// Registry

LanguageRegistry::LanguageRegistry(TokenLayout layout, std::vector<LanguageSpec> languages)
    : layout_(layout), languages_(std::move(languages)) {
  layout_.validate();
  for (std::size_t i = 0; i < languages_.size(); ++i) {
    const LanguageSpec& s = languages_[i];
    if (s.index != static_cast<int>(i)) throw InputError("language " + s.id + " has index out of order");
    if (!(s.layout == layout_)) throw InputError("language " + s.id + " uses a different token layout");
    if (!by_id_.emplace(s.id, i).second) throw InputError("duplicate language id " + s.id);
  }
  if (static_cast<int>(languages_.size()) != layout_.num_languages) {
    throw InputError("registry size does not match token layout");
  }
}

const LanguageSpec& LanguageRegistry::at(std::string_view id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw InputError("unknown language '" + std::string(id) + "'");
  return languages_[it->second];
}

bool LanguageRegistry::contains(std::string_view id) const { return by_id_.find(id) != by_id_.end(); }

std::vector<std::string> LanguageRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& l : languages_) out.push_back(l.id);
  return out;
}

nlohmann::json LanguageRegistry::to_json() const {
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& s : languages_) {
    langs.push_back({{"id", s.id},
                     {"index", s.index},
                     {"family", s.family},
                     {"group", s.group},
                     {"transliteration", s.features.transliteration},
                     {"suffixing", s.features.suffixing},
                     {"bijection", s.bijection},
                     {"reorder", s.reorder}});
  }
  return {{"layout",
           {{"num_languages", layout_.num_languages},
            {"num_families", layout_.num_families},
            {"content_words", layout_.content_words},
            {"entities", layout_.entities}}},
          {"languages", langs}};
}

LanguageRegistry LanguageRegistry::from_json(const nlohmann::json& j) {
  try {
    TokenLayout layout;
    const auto& l = j.at("layout");
    layout.num_languages = l.at("num_languages").get<int>();
    layout.num_families = l.at("num_families").get<int>();
    layout.content_words = l.at("content_words").get<int>();
    layout.entities = l.at("entities").get<int>();
    std::vector<LanguageSpec> specs;
    for (const auto& e : j.at("languages")) {
      LanguageSpec s;
      s.id = e.at("id").get<std::string>();
      s.index = e.at("index").get<int>();
      s.family = e.at("family").get<int>();
      s.group = e.value("group", "");
      s.features.transliteration = e.at("transliteration").get<bool>();
      s.features.suffixing = e.at("suffixing").get<bool>();
      s.bijection = e.at("bijection").get<std::vector<TokenId>>();
      s.reorder = e.at("reorder").get<std::vector<int>>();
      s.layout = layout;
      if (static_cast<int>(s.bijection.size()) != layout.content_words) {
        throw InputError("language " + s.id + ": bijection size mismatch");
      }
      specs.push_back(std::move(s));
    }
    return LanguageRegistry(layout, std::move(specs));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed language registry: ") + e.what());
  }
}

void LanguageRegistry::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

LanguageRegistry LanguageRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

LanguageRegistry make_registry(const std::vector<LanguagePlanEntry>& plan, std::uint64_t seed, int content_words,
                               int entities) {
  if (plan.empty()) throw InputError("language plan is empty");
  TokenLayout layout;
  layout.num_languages = static_cast<int>(plan.size());
  layout.num_families = 0;
  for (const auto& p : plan) layout.num_families = std::max(layout.num_families, p.family + 1);
  layout.content_words = content_words;
  layout.entities = entities;
  std::vector<LanguageSpec> specs;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& p = plan[i];
    const std::uint64_t lang_seed = RngStream(seed, {hash_name("language-seed"), i}).next_u64();
    specs.push_back(make_language(layout, static_cast<int>(i), p.id, lang_seed, p.family, p.features, p.group));
  }
  return LanguageRegistry(layout, std::move(specs));
}

std::vector<LanguagePlanEntry> paper_language_plan() {
  const std::vector<std::pair<std::string, std::vector<std::string>>> groups{
      {"Baltic", {"lt", "lv"}},
      {"Germanic", {"da", "de", "nl", "no", "sv"}},
      {"Romance", {"es", "fr", "it", "pt", "ro"}},
      {"Slavic", {"bg", "cs", "hr", "pl", "ru", "sl", "uk"}},
      {"Uralic", {"et", "fi", "hu"}},
      {"Other", {"el", "hi", "id", "ja", "ko", "tr", "vi", "zh"}},
  };
  std::vector<LanguagePlanEntry> plan;
  int family = 0;
  for (const auto& [group, ids] : groups) {
    const bool isolates = group == "Other";
    for (const auto& id : ids) {
      plan.push_back({id, family, group, FeatureFlags{true, false}});
      if (isolates) ++family;
    }
    if (!isolates) ++family;
  }
  return plan;
}

std::vector<LanguagePlanEntry> toy_language_plan(int families, int per_family) {
  if (families < 1 || per_family < 1 || families > 26) throw InputError("toy plan: bad family counts");
  std::vector<LanguagePlanEntry> plan;
  for (int f = 0; f < families; ++f) {
    const std::string letter(1, static_cast<char>('a' + f));
    for (int i = 0; i < per_family; ++i) {
      plan.push_back({letter + std::to_string(i), f, "family-" + letter, FeatureFlags{true, f % 2 == 1}});
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Corruption

std::string_view channel_name(Channel c) {
  switch (c) {
    case Channel::kMisalignment: return "misalignment";
    case Channel::kOmission: return "omission";
    case Channel::kAddition: return "addition";
    case Channel::kCopyThrough: return "copy_through";
    case Channel::kFeatureDrop: return "feature_drop";
    case Channel::kSkillNoise: return "skill_noise";
  }
  return "unknown";
}

std::optional<Channel> channel_from_name(std::string_view name) {
  for (Channel c : kAllChannels) {
    if (channel_name(c) == name) return c;
  }
  return std::nullopt;
}

double CorruptionConfig::rate(Channel c) const { return const_cast<CorruptionConfig*>(this)->rate(c); }

double& CorruptionConfig::rate(Channel c) {
  switch (c) {
    case Channel::kMisalignment: return misalignment;
    case Channel::kOmission: return omission;
    case Channel::kAddition: return addition;
    case Channel::kCopyThrough: return copy_through;
    case Channel::kFeatureDrop: return feature_drop;
    case Channel::kSkillNoise: return skill_noise;
  }
  return misalignment;
}

bool CorruptionConfig::all_zero() const {
  return std::all_of(kAllChannels.begin(), kAllChannels.end(), [this](Channel c) { return rate(c) == 0.0; });
}

void CorruptionConfig::validate() const {
  for (Channel c : kAllChannels) {
    const double r = rate(c);
    if (!(r >= 0.0 && r <= 1.0)) {
      throw InputError("corruption rate for " + std::string(channel_name(c)) + " must lie in [0, 1]");
    }
  }
}

void to_json(nlohmann::json& j, const CorruptionConfig& c) {
  j = nlohmann::json::object();
  for (Channel ch : kAllChannels) j[std::string(channel_name(ch))] = c.rate(ch);
}

void from_json(const nlohmann::json& j, CorruptionConfig& c) {
  c = CorruptionConfig{};
  for (const auto& [key, value] : j.items()) {
    auto ch = channel_from_name(key);
    if (!ch) throw ConfigError("unknown corruption channel '" + key + "'");
    c.rate(*ch) = value.get<double>();
  }
  c.validate();
}

bool CorpusRecord::has_tag(std::string_view t) const {
  return std::find(tags.begin(), tags.end(), t) != tags.end();
}

Tokens random_source(const TokenLayout& layout, RngStream& rng, double entity_rate, int min_len, int max_len) {
  if (min_len < 1 || max_len < min_len) throw InputError("random_source: bad length range");
  const int n = rng.uniform_int(min_len, max_len);
  Tokens out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (layout.entities > 0 && rng.bernoulli(entity_rate)) {
      out.push_back(layout.entity(static_cast<int>(rng.below(static_cast<std::uint64_t>(layout.entities)))));
    } else {
      out.push_back(layout.source_word(static_cast<int>(rng.below(static_cast<std::uint64_t>(layout.content_words)))));
    }
  }
  return out;
}

CorpusRecord corrupt(const CorpusRecord& record, const LanguageSpec& spec, const CorruptionConfig& config,
                     RngStream& rng) {
  config.validate();
  const TokenLayout& L = spec.layout;
  const Tokens clean = ideal_translate(spec, record.source);
  if (record.target != clean) throw InputError("corrupt: record is not clean");

  // Every decision is drawn up front so that channels are independent.
  std::array<bool, kAllChannels.size()> fires{};
  for (std::size_t i = 0; i < kAllChannels.size(); ++i) fires[i] = rng.bernoulli(config.rate(kAllChannels[i]));
  auto on = [&](Channel c) { return fires[static_cast<std::size_t>(c)]; };

  CorpusRecord out = record;
  out.tags.clear();
  auto tag_if_changed = [&](Channel c, const Tokens& before, const Tokens& after) {
    if (before != after) out.tags.emplace_back(channel_name(c));
  };

  const Tokens baseline = render(spec, record.source, {}, false);
  Tokens content = baseline;

  if (on(Channel::kCopyThrough)) {
    std::vector<std::size_t> words;
    for (std::size_t i = 0; i < record.source.size(); ++i) {
      if (L.is_source_word(record.source[i])) words.push_back(i);
    }
    if (!words.empty()) {
      rng.shuffle(words);
      const auto k = static_cast<std::size_t>(effect_count(words.size(), 3, rng));
      std::vector<bool> untranslated(record.source.size(), false);
      for (std::size_t j = 0; j < k && j < words.size(); ++j) untranslated[words[j]] = true;
      content = render(spec, record.source, untranslated, false);
    }
    tag_if_changed(Channel::kCopyThrough, baseline, content);
  }

  if (on(Channel::kFeatureDrop)) {
    if (content != baseline) {
      // Keep copy-through decisions: positions already verbatim stay verbatim.
      const Tokens again = render(spec, record.source, {}, true);
      Tokens merged = content;
      for (std::size_t i = 0; i < merged.size(); ++i) {
        if (L.is_marked(merged[i])) merged[i] = again[i];
      }
      tag_if_changed(Channel::kFeatureDrop, content, merged);
      content = std::move(merged);
    } else {
      Tokens dropped = render(spec, record.source, {}, true);
      tag_if_changed(Channel::kFeatureDrop, content, dropped);
      content = std::move(dropped);
    }
  }

  if (on(Channel::kMisalignment)) {
    Tokens other = record.source;
    while (other == record.source) other = random_source(L, rng, 0.15);
    Tokens replaced = render(spec, other, {}, false);
    tag_if_changed(Channel::kMisalignment, content, replaced);
    content = std::move(replaced);
  }

  if (on(Channel::kSkillNoise) && !content.empty()) {
    Tokens noisy = content;
    const int k = effect_count(noisy.size(), 4, rng);
    for (int j = 0; j < k; ++j) {
      const auto pos = static_cast<std::size_t>(rng.below(noisy.size()));
      TokenId replacement = random_target_word(L, rng);
      while (replacement == noisy[pos]) replacement = random_target_word(L, rng);
      noisy[pos] = replacement;
    }
    tag_if_changed(Channel::kSkillNoise, content, noisy);
    content = std::move(noisy);
  }

  if (on(Channel::kOmission) && !content.empty()) {
    Tokens shorter = content;
    const int k = effect_count(shorter.size(), 4, rng);
    for (int j = 0; j < k && !shorter.empty(); ++j) {
      shorter.erase(shorter.begin() + static_cast<std::ptrdiff_t>(rng.below(shorter.size())));
    }
    tag_if_changed(Channel::kOmission, content, shorter);
    content = std::move(shorter);
  }

  if (on(Channel::kAddition)) {
    Tokens longer = content;
    const int k = effect_count(std::max<std::size_t>(content.size(), 1), 4, rng);
    for (int j = 0; j < k; ++j) {
      const auto pos = static_cast<std::size_t>(rng.below(longer.size() + 1));
      longer.insert(longer.begin() + static_cast<std::ptrdiff_t>(pos), random_target_word(L, rng));
    }
    tag_if_changed(Channel::kAddition, content, longer);
    content = std::move(longer);
  }

  content.push_back(Vocab::kEos);
  out.target = std::move(content);
  return out;
}

CorpusSplits gen_corpus(const LanguageRegistry& registry, const CorruptionConfig& config, const CorpusSizes& sizes,
                        std::uint64_t seed) {
  config.validate();
  if (sizes.train_per_lang < 1 || sizes.dev_per_lang < 1 || sizes.test_per_lang < 1) {
    throw InputError("corpus sizes must be positive");
  }
  const TokenLayout& L = registry.layout();
  std::set<Tokens> used;
  CorpusSplits splits;
  std::array<ParallelCorpus*, 3> targets{&splits.train, &splits.dev, &splits.test};
  const std::array<int, 3> counts{sizes.train_per_lang, sizes.dev_per_lang, sizes.test_per_lang};
  for (const LanguageSpec& spec : registry.languages()) {
    for (std::size_t split = 0; split < 3; ++split) {
      for (int i = 0; i < counts[split]; ++i) {
        RngStream rng(seed, {hash_name("source"), static_cast<std::uint64_t>(spec.index), split,
                             static_cast<std::uint64_t>(i)});
        Tokens src = random_source(L, rng, sizes.entity_rate, sizes.min_len, sizes.max_len);
        while (!used.insert(src).second) src = random_source(L, rng, sizes.entity_rate, sizes.min_len, sizes.max_len);
        CorpusRecord rec{spec.id, src, ideal_translate(spec, src), {}};
        if (split == 0 && !config.all_zero()) {
          RngStream crng(seed, {hash_name("corrupt"), static_cast<std::uint64_t>(spec.index),
                                static_cast<std::uint64_t>(i)});
          rec = corrupt(rec, spec, config, crng);
        }
        targets[split]->push_back(std::move(rec));
      }
    }
  }
  return splits;
}

void write_corpus(std::ostream& out, const ParallelCorpus& corpus) {
  for (const auto& r : corpus) {
    out << r.lang << '\t' << join_tokens(r.source) << '\t' << join_tokens(r.target) << '\t';
    if (r.tags.empty()) {
      out << '-';
    } else {
      for (std::size_t i = 0; i < r.tags.size(); ++i) out << (i ? "," : "") << r.tags[i];
    }
    out << '\n';
  }
}

ParallelCorpus read_corpus(std::istream& in) {
  ParallelCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4) {
      throw InputError("corpus line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
    }
    CorpusRecord r;
    r.lang = fields[0];
    r.source = parse_tokens(fields[1]);
    r.target = parse_tokens(fields[2]);
    if (fields[3] != "-" && !fields[3].empty()) {
      std::stringstream ss(fields[3]);
      std::string tag;
      while (std::getline(ss, tag, ',')) r.tags.push_back(tag);
    }
    corpus.push_back(std::move(r));
  }
  return corpus;
}

void save_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_corpus(out, corpus);
}

ParallelCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_corpus(in);
}

void validate_corpus(const ParallelCorpus& corpus, const LanguageRegistry& registry) {
  const Vocab vocab(registry.vocab_size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& r = corpus[i];
    const LanguageSpec& spec = registry.at(r.lang);
    vocab.check(r.source, "corpus source");
    vocab.check(r.target, "corpus target");
    if (!r.corrupted() && r.target != ideal_translate(spec, r.source)) {
      throw InputError("corpus record " + std::to_string(i) + " is untagged but differs from the ideal translation");
    }
  }
}

}  // namespace dqoforge
