#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sani/rng.hpp"

namespace sani {

using TokenId = std::int32_t;

enum class Category { Direct, Indirect, Conf };

std::string_view to_string(Category cat);
Category category_from_string(std::string_view s);

/// Splits a word into its tokens. Hyphenated words become several tokens:
/// "follow-up" -> {"follow", "##up"}. Everything else is a single token.
std::vector<std::string> split_word(std::string_view word);

/// Inverse of split_word.
std::string join_tokens(std::span<const std::string> pieces);

class Vocab {
 public:
  static constexpr TokenId kMask = 0;
  static constexpr TokenId kPad = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kBos = 3;
  static constexpr TokenId kNumSpecial = 4;

  Vocab();

  /// Adds a corpus token; returns its id. Spellings of special tokens are
  /// never added and map to UNK.
  TokenId add(const std::string& token);

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return id_to_token_.size(); }
  bool contains(std::string_view token) const;

  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

  /// Word -> token ids (one per piece).
  std::vector<TokenId> encode_word(std::string_view word) const;
  /// Token ids -> words; consecutive "##" pieces are rejoined.
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

struct Annotation {
  std::size_t start = 0;  // word index
  std::size_t len = 0;    // words
  Category cat = Category::Direct;

  bool operator==(const Annotation&) const = default;
};

/// A document at word granularity plus, once tokenized, its token ids.
/// word_offsets has words.size()+1 entries; word i owns tokens
/// [word_offsets[i], word_offsets[i+1]).
struct AnnotatedDocument {
  std::string id;
  std::vector<std::string> words;
  std::vector<Annotation> annotations;
  std::vector<TokenId> token_ids;
  std::vector<std::size_t> word_offsets;

  std::size_t num_words() const { return words.size(); }
  std::size_t num_tokens() const { return token_ids.size(); }
  bool tokenized() const { return word_offsets.size() == words.size() + 1; }
  std::size_t word_of_token(std::size_t token_pos) const;
};

using Corpus = std::vector<AnnotatedDocument>;

/// Throws ConfigError when spans overlap or fall outside the document.
void validate(const AnnotatedDocument& doc);

void tokenize(AnnotatedDocument& doc, const Vocab& vocab);
void tokenize(Corpus& docs, const Vocab& vocab);

/// Every token with frequency >= min_freq gets an id (lexicographic order
/// after the four specials); rarer tokens map to UNK.
Vocab build_vocab(const Corpus& docs, std::size_t min_freq = 1);

struct BlacklistTerm {
  std::vector<std::string> words;
  std::vector<TokenId> tokens;             // flattened over words
  std::vector<std::size_t> word_lengths;   // tokens per word
  bool has_unk = false;                    // contains an out-of-vocabulary word
};

/// A set of sensitive n-grams resolved into token space, with their
/// occurrence counts in a reference corpus.
class Blacklist {
 public:
  Blacklist() = default;

  /// Builds from word-level terms; duplicates are collapsed (first kept).
  static Blacklist from_terms(const std::vector<std::vector<std::string>>& terms, const Vocab& vocab,
                              const Corpus& reference);

  /// Union of two blacklists, repetitions recounted against reference.
  static Blacklist merge(const Blacklist& a, const Blacklist& b, const Vocab& vocab, const Corpus& reference);

  const std::vector<BlacklistTerm>& terms() const { return terms_; }
  std::size_t size() const { return terms_.size(); }
  bool empty() const { return terms_.empty(); }

  std::size_t repetitions(std::size_t term) const { return repetitions_[term]; }
  const std::vector<std::size_t>& repetitions() const { return repetitions_; }
  std::size_t total_repetitions() const;

  /// Membership in the union of term tokens (specials excluded).
  bool contains_token(TokenId id) const;
  const std::vector<TokenId>& token_set() const { return token_set_; }

  /// Lowest-index term containing the token, if any.
  std::optional<std::size_t> owner(TokenId id) const;

  std::string term_text(std::size_t term) const;

  /// Indices of terms whose first token is id.
  std::span<const std::size_t> terms_starting_with(TokenId id) const;

  /// Recounts repetitions by exact n-gram scan over docs (tokenized).
  void count_repetitions(const Corpus& docs);

 private:
  void index(std::size_t vocab_size);

  std::vector<BlacklistTerm> terms_;
  std::vector<std::size_t> repetitions_;
  std::vector<TokenId> token_set_;
  std::vector<std::int32_t> owner_;  // indexed by token id, -1 when none
  std::unordered_map<TokenId, std::vector<std::size_t>> by_first_token_;
};

/// Reads one n-gram per line ('#' comment lines and blank lines skipped).
Blacklist load_blacklist(const std::filesystem::path& path, const Vocab& vocab, const Corpus& corpus);

struct Occurrence {
  std::size_t term = 0;
  std::size_t word_start = 0;
  std::size_t word_len = 0;
};

/// All (possibly overlapping) word-aligned occurrences of blacklist terms.
std::vector<Occurrence> find_occurrences(const AnnotatedDocument& doc, const Blacklist& blacklist);

/// Per-word flag: true when the word lies inside some blacklist occurrence.
std::vector<bool> blacklisted_words(const AnnotatedDocument& doc, const Blacklist& blacklist);

/// Replaces every DIRECT span by the single word "X" and re-indexes the
/// remaining annotations. Token ids are cleared (re-tokenize afterwards).
AnnotatedDocument pseudonymize(const AnnotatedDocument& doc);
Corpus pseudonymize(const Corpus& docs);

/// Removes every annotated span's words (used to derive generic text).
AnnotatedDocument strip_annotated(const AnnotatedDocument& doc);

struct CorpusSplit {
  Corpus train;
  Corpus heldout;
  double fraction_heldout = 0.1;
};

/// Deterministic split: documents are shuffled with seed, the first
/// round(fraction * n) (at least one) go to heldout.
CorpusSplit split_corpus(const Corpus& docs, double fraction_heldout, std::uint64_t seed);

// JSON Lines corpus I/O.
Corpus read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const Corpus& docs, const std::filesystem::path& path);
std::string corpus_to_jsonl(const Corpus& docs);

struct GenConfig {
  std::size_t n_docs = 400;
  std::size_t words_per_doc = 250;
  std::size_t n_direct = 60;
  std::size_t n_indirect = 60;
  std::size_t n_conf = 100;
  double repetition_law = 1.0;
  std::uint64_t seed = 1;
};

/// Parses a GenConfig JSON object; all keys required, unknown keys rejected.
GenConfig gen_config_from_json(std::string_view text);
GenConfig load_gen_config(const std::filesystem::path& path);

struct GeneratedCorpus {
  Corpus docs;
  std::vector<std::vector<std::string>> direct;
  std::vector<std::vector<std::string>> indirect;
  std::vector<std::vector<std::string>> conf;
  /// Planted occurrence counts, aligned with the term lists.
  std::vector<std::size_t> direct_counts, indirect_counts, conf_counts;
  /// Filler words that are never part of a sensitive term.
  std::vector<std::string> filler;
};

/// Occurrence count for each of n ranks under a power law with the given
/// exponent: max(1, round(peak * r^-law)).
std::vector<std::size_t> power_law_counts(std::size_t n, double law, double peak);

GeneratedCorpus generate_synthetic_corpus(const GenConfig& cfg);

/// Writes corpus.jsonl, blacklist_direct.txt, blacklist_indirect.txt and
/// blacklist_conf.txt into dir.
void write_generated(const GeneratedCorpus& gen, const std::filesystem::path& dir);

}  // namespace sani
