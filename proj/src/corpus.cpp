#include "sani/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sani/errors.hpp"

namespace sani {

namespace {

const std::vector<std::string>& special_spellings() {
  static const std::vector<std::string> spellings = {"<mask>", "<pad>", "<unk>", "<bos>"};
  return spellings;
}

constexpr std::string_view kContinuation = "##";

}  // namespace

std::string_view to_string(Category cat) {
  switch (cat) {
    case Category::Direct: return "DIRECT";
    case Category::Indirect: return "INDIRECT";
    case Category::Conf: return "CONF";
  }
  return "?";
}

Category category_from_string(std::string_view s) {
  if (s == "DIRECT") return Category::Direct;
  if (s == "INDIRECT") return Category::Indirect;
  if (s == "CONF") return Category::Conf;
  throw Error(ErrorCode::ConfigError, "unknown annotation category '" + std::string(s) + "'");
}

std::vector<std::string> split_word(std::string_view word) {
  std::vector<std::string> pieces;
  // Leading/trailing/doubled hyphens do not split; only interior a-b does.
  std::size_t begin = 0;
  for (std::size_t i = 1; i + 1 < word.size(); ++i) {
    if (word[i] == '-' && word[i - 1] != '-' && word[i + 1] != '-' && i > begin) {
      pieces.emplace_back(word.substr(begin, i - begin));
      begin = i + 1;
    }
  }
  pieces.emplace_back(word.substr(begin));
  for (std::size_t i = 1; i < pieces.size(); ++i) pieces[i] = std::string(kContinuation) + pieces[i];
  return pieces;
}

std::string join_tokens(std::span<const std::string> pieces) {
  std::string out;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    std::string_view p = pieces[i];
    if (i > 0) {
      out += '-';
      if (p.starts_with(kContinuation)) p.remove_prefix(kContinuation.size());
    }
    out += p;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  // Specials are reachable by id only; their spellings look up as UNK.
  for (const auto& s : special_spellings()) id_to_token_.push_back(s);
}

TokenId Vocab::add(const std::string& token) {
  const auto& specials = special_spellings();
  if (std::find(specials.begin(), specials.end(), token) != specials.end()) return kUnk;
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const auto id = static_cast<TokenId>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

TokenId Vocab::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return kUnk;
  return it->second;
}

bool Vocab::contains(std::string_view token) const {
  return token_to_id_.contains(std::string(token));
}

std::vector<TokenId> Vocab::encode_word(std::string_view word) const {
  std::vector<TokenId> ids;
  for (const auto& piece : split_word(word)) ids.push_back(id(piece));
  return ids;
}

std::vector<std::string> Vocab::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> words;
  std::vector<std::string> pieces;
  auto flush = [&] {
    if (!pieces.empty()) words.push_back(join_tokens(pieces));
    pieces.clear();
  };
  for (TokenId id : ids) {
    const std::string& t = token(id);
    if (!std::string_view(t).starts_with(kContinuation)) flush();
    pieces.push_back(t);
  }
  flush();
  return words;
}

Vocab build_vocab(const Corpus& docs, std::size_t min_freq) {
  if (min_freq == 0) throw Error(ErrorCode::ConfigError, "min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& doc : docs) {
    for (const auto& w : doc.words) {
      for (auto& piece : split_word(w)) {
        ++freq[std::move(piece)];
        ++total;
      }
    }
  }
  if (total == 0) throw Error(ErrorCode::EmptyCorpus, "corpus has no words");
  const auto& specials = special_spellings();
  Vocab vocab;
  for (const auto& [token, count] : freq) {
    if (count < min_freq) continue;
    if (std::find(specials.begin(), specials.end(), token) != specials.end()) continue;
    vocab.add(token);
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Documents

std::size_t AnnotatedDocument::word_of_token(std::size_t token_pos) const {
  auto it = std::upper_bound(word_offsets.begin(), word_offsets.end(), token_pos);
  return static_cast<std::size_t>(std::distance(word_offsets.begin(), it)) - 1;
}

void validate(const AnnotatedDocument& doc) {
  std::vector<Annotation> sorted = doc.annotations;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  std::size_t end = 0;
  for (const auto& a : sorted) {
    if (a.len == 0 || a.start + a.len > doc.words.size()) {
      throw Error(ErrorCode::ConfigError, "annotation outside document '" + doc.id + "'");
    }
    if (a.start < end) throw Error(ErrorCode::ConfigError, "overlapping annotations in '" + doc.id + "'");
    end = a.start + a.len;
  }
}

void tokenize(AnnotatedDocument& doc, const Vocab& vocab) {
  doc.token_ids.clear();
  doc.word_offsets.clear();
  doc.word_offsets.reserve(doc.words.size() + 1);
  for (const auto& w : doc.words) {
    doc.word_offsets.push_back(doc.token_ids.size());
    for (TokenId id : vocab.encode_word(w)) doc.token_ids.push_back(id);
  }
  doc.word_offsets.push_back(doc.token_ids.size());
}

void tokenize(Corpus& docs, const Vocab& vocab) {
  for (auto& d : docs) tokenize(d, vocab);
}

// ---------------------------------------------------------------------------
// Blacklist

Blacklist Blacklist::from_terms(const std::vector<std::vector<std::string>>& terms, const Vocab& vocab,
                                const Corpus& reference) {
  Blacklist bl;
  std::set<std::vector<std::string>> seen;
  for (const auto& words : terms) {
    if (words.empty() || !seen.insert(words).second) continue;
    BlacklistTerm term;
    term.words = words;
    for (const auto& w : words) {
      auto ids = vocab.encode_word(w);
      term.word_lengths.push_back(ids.size());
      for (TokenId id : ids) {
        if (id == Vocab::kUnk) term.has_unk = true;
        term.tokens.push_back(id);
      }
    }
    bl.terms_.push_back(std::move(term));
  }
  bl.index(vocab.size());
  bl.count_repetitions(reference);
  return bl;
}

Blacklist Blacklist::merge(const Blacklist& a, const Blacklist& b, const Vocab& vocab, const Corpus& reference) {
  std::vector<std::vector<std::string>> words;
  for (const auto& t : a.terms_) words.push_back(t.words);
  for (const auto& t : b.terms_) words.push_back(t.words);
  return from_terms(words, vocab, reference);
}

void Blacklist::index(std::size_t vocab_size) {
  owner_.assign(vocab_size, -1);
  by_first_token_.clear();
  std::set<TokenId> ids;
  for (std::size_t t = 0; t < terms_.size(); ++t) {
    const auto& term = terms_[t];
    by_first_token_[term.tokens.front()].push_back(t);
    for (TokenId id : term.tokens) {
      if (Vocab::is_special(id)) continue;
      ids.insert(id);
      auto& o = owner_[static_cast<std::size_t>(id)];
      if (o < 0) o = static_cast<std::int32_t>(t);
    }
  }
  token_set_.assign(ids.begin(), ids.end());
}

std::size_t Blacklist::total_repetitions() const {
  std::size_t total = 0;
  for (auto r : repetitions_) total += r;
  return total;
}

bool Blacklist::contains_token(TokenId id) const {
  const auto i = static_cast<std::size_t>(id);
  return id >= 0 && i < owner_.size() && owner_[i] >= 0;
}

std::optional<std::size_t> Blacklist::owner(TokenId id) const {
  if (!contains_token(id)) return std::nullopt;
  return static_cast<std::size_t>(owner_[static_cast<std::size_t>(id)]);
}

std::string Blacklist::term_text(std::size_t term) const {
  std::string out;
  for (const auto& w : terms_[term].words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::span<const std::size_t> Blacklist::terms_starting_with(TokenId id) const {
  auto it = by_first_token_.find(id);
  if (it == by_first_token_.end()) return {};
  return it->second;
}

void Blacklist::count_repetitions(const Corpus& docs) {
  repetitions_.assign(terms_.size(), 0);
  for (const auto& doc : docs) {
    for (const auto& occ : find_occurrences(doc, *this)) ++repetitions_[occ.term];
  }
}

std::vector<Occurrence> find_occurrences(const AnnotatedDocument& doc, const Blacklist& blacklist) {
  if (!doc.tokenized()) throw Error(ErrorCode::ConfigError, "document '" + doc.id + "' is not tokenized");
  std::vector<Occurrence> out;
  const auto& terms = blacklist.terms();
  for (std::size_t w = 0; w < doc.num_words(); ++w) {
    const std::size_t tok = doc.word_offsets[w];
    if (tok == doc.word_offsets[w + 1]) continue;
    for (std::size_t t : blacklist.terms_starting_with(doc.token_ids[tok])) {
      const auto& term = terms[t];
      // Terms carrying UNK never match: they cannot occur as themselves.
      if (term.has_unk) continue;
      const std::size_t n = term.word_lengths.size();
      if (w + n > doc.num_words()) continue;
      bool match = true;
      std::size_t k = 0;
      for (std::size_t j = 0; j < n && match; ++j) {
        const std::size_t b = doc.word_offsets[w + j];
        const std::size_t e = doc.word_offsets[w + j + 1];
        if (e - b != term.word_lengths[j]) {
          match = false;
          break;
        }
        for (std::size_t p = b; p < e; ++p, ++k) {
          if (doc.token_ids[p] != term.tokens[k]) {
            match = false;
            break;
          }
        }
      }
      if (match) out.push_back({t, w, n});
    }
  }
  return out;
}

std::vector<bool> blacklisted_words(const AnnotatedDocument& doc, const Blacklist& blacklist) {
  std::vector<bool> flags(doc.num_words(), false);
  for (const auto& occ : find_occurrences(doc, blacklist)) {
    for (std::size_t j = 0; j < occ.word_len; ++j) flags[occ.word_start + j] = true;
  }
  return flags;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Blacklist load_blacklist(const std::filesystem::path& path, const Vocab& vocab, const Corpus& corpus) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open blacklist " + path.string());
  std::vector<std::vector<std::string>> terms;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream is(t);
    std::vector<std::string> words;
    std::string w;
    while (is >> w) words.push_back(w);
    terms.push_back(std::move(words));
  }
  if (terms.empty()) throw Error(ErrorCode::EmptyBlacklist, path.string() + " has no terms");
  return Blacklist::from_terms(terms, vocab, corpus);
}

// ---------------------------------------------------------------------------
// Transformations

AnnotatedDocument pseudonymize(const AnnotatedDocument& doc) {
  AnnotatedDocument out;
  out.id = doc.id;
  std::vector<Annotation> sorted = doc.annotations;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  std::size_t w = 0;
  for (const auto& a : sorted) {
    for (; w < a.start; ++w) out.words.push_back(doc.words[w]);
    if (a.cat == Category::Direct) {
      out.words.emplace_back("X");
    } else {
      out.annotations.push_back({out.words.size(), a.len, a.cat});
      for (std::size_t j = 0; j < a.len; ++j) out.words.push_back(doc.words[a.start + j]);
    }
    w = a.start + a.len;
  }
  for (; w < doc.words.size(); ++w) out.words.push_back(doc.words[w]);
  return out;
}

Corpus pseudonymize(const Corpus& docs) {
  Corpus out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(pseudonymize(d));
  return out;
}

AnnotatedDocument strip_annotated(const AnnotatedDocument& doc) {
  std::vector<bool> drop(doc.words.size(), false);
  for (const auto& a : doc.annotations) {
    for (std::size_t j = 0; j < a.len; ++j) drop[a.start + j] = true;
  }
  AnnotatedDocument out;
  out.id = doc.id;
  for (std::size_t w = 0; w < doc.words.size(); ++w) {
    if (!drop[w]) out.words.push_back(doc.words[w]);
  }
  return out;
}

CorpusSplit split_corpus(const Corpus& docs, double fraction_heldout, std::uint64_t seed) {
  if (!(fraction_heldout > 0.0 && fraction_heldout < 1.0)) {
    throw Error(ErrorCode::ConfigError, "heldout fraction must be in (0,1)");
  }
  if (docs.size() < 2) throw Error(ErrorCode::EmptyCorpus, "need at least two documents to split");
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5b117));
  rng.shuffle(order);
  auto n_held = static_cast<std::size_t>(std::llround(fraction_heldout * static_cast<double>(docs.size())));
  n_held = std::clamp<std::size_t>(n_held, 1, docs.size() - 1);
  std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::sort(held.begin(), held.end());
  std::vector<bool> is_held(docs.size(), false);
  for (auto i : held) is_held[i] = true;
  CorpusSplit split;
  split.fraction_heldout = fraction_heldout;
  for (std::size_t i = 0; i < docs.size(); ++i) (is_held[i] ? split.heldout : split.train).push_back(docs[i]);
  return split;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

AnnotatedDocument doc_from_json(const nlohmann::json& j) {
  AnnotatedDocument doc;
  doc.id = j.at("id").get<std::string>();
  doc.words = j.at("words").get<std::vector<std::string>>();
  for (const auto& a : j.at("annotations")) {
    doc.annotations.push_back({a.at("start").get<std::size_t>(), a.at("len").get<std::size_t>(),
                               category_from_string(a.at("cat").get<std::string>())});
  }
  validate(doc);
  return doc;
}

nlohmann::ordered_json doc_to_json(const AnnotatedDocument& doc) {
  nlohmann::ordered_json j;
  j["id"] = doc.id;
  j["words"] = doc.words;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& a : doc.annotations) {
    nlohmann::ordered_json aj;
    aj["start"] = a.start;
    aj["len"] = a.len;
    aj["cat"] = std::string(to_string(a.cat));
    arr.push_back(std::move(aj));
  }
  j["annotations"] = std::move(arr);
  return j;
}

}  // namespace

Corpus read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open corpus " + path.string());
  Corpus docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      docs.push_back(doc_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ConfigError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (docs.empty()) throw Error(ErrorCode::EmptyCorpus, path.string() + " has no documents");
  return docs;
}

std::string corpus_to_jsonl(const Corpus& docs) {
  std::string out;
  for (const auto& d : docs) {
    out += doc_to_json(d).dump();
    out += '\n';
  }
  return out;
}

void write_corpus_jsonl(const Corpus& docs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << corpus_to_jsonl(docs);
}

}  // namespace sani
