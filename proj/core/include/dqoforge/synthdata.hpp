// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy target languages with known ideal translations, and corrupted parallel
// corpora built from them. Each corruption channel stands for one kind of
// supervised-data defect (misaligned pairs, dropped or invented content,
// untranslated source fragments, skipped transliteration, sloppy translators).

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/rng.hpp"
#include "dqoforge/vocab.hpp"

namespace dqoforge {

/// Vocabulary regions shared by every language of an inventory.
///
///   0..2            PAD BOS EOS
///   language tags   one per language, first source token
///   source words    `content_words` ids
///   entities        `entities` ids; copied verbatim unless transliterated
///   target words    `content_words` ids, the image of each bijection
///   marked forms    languages x entities, the transliterated entity forms
///   suffix markers  one per family
struct TokenLayout {
  int num_languages = 0;
  int num_families = 0;
  int content_words = 16;
  int entities = 4;

  TokenId lang_tag(int lang) const { return 3 + lang; }
  TokenId source_word(int i) const { return 3 + num_languages + i; }
  TokenId entity(int e) const { return source_word(content_words) + e; }
  TokenId target_word(int i) const { return entity(entities) + i; }
  TokenId marked(int lang, int e) const { return target_word(content_words) + lang * entities + e; }
  TokenId suffix_marker(int family) const { return marked(num_languages, 0) + family; }
  int vocab_size() const { return suffix_marker(num_families); }

  bool is_source_word(TokenId t) const { return t >= source_word(0) && t < source_word(content_words); }
  bool is_entity(TokenId t) const { return t >= entity(0) && t < entity(entities); }
  bool is_target_word(TokenId t) const { return t >= target_word(0) && t < target_word(content_words); }
  bool is_marked(TokenId t) const { return t >= marked(0, 0) && t < marked(num_languages, 0); }
  bool is_content_source(TokenId t) const { return is_source_word(t) || is_entity(t); }

  void validate() const;
  bool operator==(const TokenLayout&) const = default;
};

struct FeatureFlags {
  bool transliteration = false;  // entities map to a language-specific marked form
  bool suffixing = false;        // a family marker closes every sentence
  bool operator==(const FeatureFlags&) const = default;
};

struct LanguageSpec {
  std::string id;
  int index = 0;   // position in the inventory; selects the tag and marked forms
  int family = 0;  // languages in one family share the reorder rule
  std::string group;  // display group (e.g. "Slavic"); isolates share "Other"
  FeatureFlags features;
  std::vector<TokenId> bijection;  // source word i -> target word
  std::vector<int> reorder;        // permutation applied to each full block
  TokenLayout layout;

  bool operator==(const LanguageSpec&) const = default;
};

/// Deterministic reorder pattern of a family.
std::vector<int> family_reorder_rule(int family);

/// Builds a language. Same (layout, index, seed, family, flags) -> same spec;
/// same family -> same reorder rule; different seeds -> different bijections.
LanguageSpec make_language(const TokenLayout& layout, int index, std::string id, std::uint64_t seed, int family,
                           FeatureFlags flags, std::string group = {});

/// Encoder input for translating `source` into `spec`: tag, content, EOS.
Tokens encoder_input(const LanguageSpec& spec, std::span<const TokenId> source);

/// The oracle translation: bijection and transliteration per token, block
/// reordering, optional suffix marker, then EOS. Throws InputError on any
/// token outside the source content vocabulary.
Tokens ideal_translate(const LanguageSpec& spec, std::span<const TokenId> source);

/// Language inventory with lookup by id.
class LanguageRegistry {
 public:
  LanguageRegistry() = default;
  LanguageRegistry(TokenLayout layout, std::vector<LanguageSpec> languages);

  const TokenLayout& layout() const noexcept { return layout_; }
  const std::vector<LanguageSpec>& languages() const noexcept { return languages_; }
  const LanguageSpec& at(std::string_view id) const;
  bool contains(std::string_view id) const;
  std::vector<std::string> ids() const;
  int vocab_size() const { return layout_.vocab_size(); }

  nlohmann::json to_json() const;
  static LanguageRegistry from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static LanguageRegistry load(const std::filesystem::path& path);

 private:
  TokenLayout layout_;
  std::vector<LanguageSpec> languages_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
};

/// One language entry of an inventory description.
struct LanguagePlanEntry {
  std::string id;
  int family = 0;
  std::string group;
  FeatureFlags features;
};

LanguageRegistry make_registry(const std::vector<LanguagePlanEntry>& plan, std::uint64_t seed, int content_words = 16,
                               int entities = 4);

/// The 30-language inventory of the multilingual model studied in the
/// experiments, with its six display groups. Members of the "Other" group are
/// the sole representatives of their families, so each gets its own family id.
std::vector<LanguagePlanEntry> paper_language_plan();

/// Desk-scale inventory: `families` families of `per_family` languages each
/// (ids like "a0", "a1", "b0", ...), every language transliterating.
std::vector<LanguagePlanEntry> toy_language_plan(int families, int per_family);

// ---------------------------------------------------------------------------
// Corruption

enum class Channel { kMisalignment, kOmission, kAddition, kCopyThrough, kFeatureDrop, kSkillNoise };
inline constexpr std::array<Channel, 6> kAllChannels{Channel::kMisalignment, Channel::kOmission,
                                                     Channel::kAddition,     Channel::kCopyThrough,
                                                     Channel::kFeatureDrop,  Channel::kSkillNoise};
std::string_view channel_name(Channel c);
std::optional<Channel> channel_from_name(std::string_view name);

struct CorruptionConfig {
  double misalignment = 0.0;
  double omission = 0.0;
  double addition = 0.0;
  double copy_through = 0.0;
  double feature_drop = 0.0;
  double skill_noise = 0.0;

  double rate(Channel c) const;
  double& rate(Channel c);
  bool all_zero() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const CorruptionConfig& c);
void from_json(const nlohmann::json& j, CorruptionConfig& c);

struct CorpusRecord {
  std::string lang;
  Tokens source;  // content tokens only
  Tokens target;  // ends with EOS
  std::vector<std::string> tags;  // channels that changed the target

  bool corrupted() const noexcept { return !tags.empty(); }
  bool has_tag(std::string_view t) const;
  bool operator==(const CorpusRecord&) const = default;
};

using ParallelCorpus = std::vector<CorpusRecord>;

/// Random source sentence: length uniform in [min_len, max_len] content
/// tokens, each an entity with probability `entity_rate`.
Tokens random_source(const TokenLayout& layout, RngStream& rng, double entity_rate, int min_len = 3,
                     int max_len = 12);

/// Applies each channel independently with its rate. Only channels that
/// changed the target are tagged. `record` must be clean.
CorpusRecord corrupt(const CorpusRecord& record, const LanguageSpec& spec, const CorruptionConfig& config,
                     RngStream& rng);

struct CorpusSizes {
  int train_per_lang = 400;
  int dev_per_lang = 50;
  int test_per_lang = 50;
  double entity_rate = 0.15;
  int min_len = 3;
  int max_len = 12;
};

struct CorpusSplits {
  ParallelCorpus train, dev, test;
};

/// Generates the three splits. Source sentences are unique across all splits
/// and languages; dev and test are clean; train is corrupted per `config`.
CorpusSplits gen_corpus(const LanguageRegistry& registry, const CorruptionConfig& config, const CorpusSizes& sizes,
                        std::uint64_t seed);

/// Line format: lang TAB source-ids TAB target-ids TAB tags, ids separated by
/// spaces, tags by commas ("-" when clean).
void write_corpus(std::ostream& out, const ParallelCorpus& corpus);
ParallelCorpus read_corpus(std::istream& in);
void save_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus);
ParallelCorpus load_corpus(const std::filesystem::path& path);

/// Checks every record against the registry: known language, in-vocabulary
/// ids, and target == ideal_translate for clean records.
void validate_corpus(const ParallelCorpus& corpus, const LanguageRegistry& registry);

}  // namespace dqoforge
