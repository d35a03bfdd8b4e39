#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "sani/corpus.hpp"
#include "sani/errors.hpp"

namespace sani {

namespace {

// Fraction of all corpus words taken by the words of planted terms.
constexpr double kDirectDensity = 0.025;
constexpr double kIndirectDensity = 0.02;
constexpr double kConfDensity = 0.03;
// Words of fixed context ("signature") emitted before every planted term.
constexpr std::size_t kSignatureLen = 2;
constexpr double kHyphenRate = 0.05;
constexpr double kFollowProb = 0.9;
constexpr std::size_t kSuccessors = 2;
constexpr double kFirstSuccessor = 0.7;

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

class WordFactory {
 public:
  explicit WordFactory(Rng& rng) : rng_(rng) {}

  std::string filler() {
    for (;;) {
      std::string w = syllables(2 + rng_.uniform(2));
      if (rng_.uniform01() < kHyphenRate) w += "-" + syllables(1 + rng_.uniform(2));
      if (used_.insert(w).second) return w;
    }
  }

  /// Name-like words: closed final syllable, never produced by filler().
  std::string sensitive() {
    for (;;) {
      std::string w = syllables(1 + rng_.uniform(2));
      w += kConsonants[rng_.uniform(kConsonants.size())];
      w += kVowels[rng_.uniform(kVowels.size())];
      w += kConsonants[rng_.uniform(kConsonants.size())];
      if (used_.insert(w).second) return w;
    }
  }

 private:
  std::string syllables(std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
      s += kConsonants[rng_.uniform(kConsonants.size())];
      s += kVowels[rng_.uniform(kVowels.size())];
    }
    return s;
  }

  Rng& rng_;
  std::set<std::string> used_;
};

struct PlantedTerm {
  std::vector<std::string> words;
  std::size_t signature[kSignatureLen];
  Category cat;
};

std::size_t draw_length(Rng& rng, Category cat) {
  const double u = rng.uniform01();
  switch (cat) {
    case Category::Direct: return u < 0.5 ? 1 : 2;
    case Category::Indirect: return u < 0.7 ? 1 : 2;
    case Category::Conf: return u < 0.6 ? 1 : (u < 0.9 ? 2 : 3);
  }
  return 1;
}

double mean_length(Category cat) {
  switch (cat) {
    case Category::Direct: return 1.5;
    case Category::Indirect: return 1.3;
    case Category::Conf: return 1.5;
  }
  return 1.0;
}

double density(Category cat) {
  switch (cat) {
    case Category::Direct: return kDirectDensity;
    case Category::Indirect: return kIndirectDensity;
    case Category::Conf: return kConfDensity;
  }
  return 0.0;
}

}  // namespace

std::vector<std::size_t> power_law_counts(std::size_t n, double law, double peak) {
  std::vector<std::size_t> counts(n);
  for (std::size_t r = 1; r <= n; ++r) {
    const double c = std::round(peak * std::pow(static_cast<double>(r), -law));
    counts[r - 1] = std::max<std::size_t>(1, static_cast<std::size_t>(c));
  }
  return counts;
}

GenConfig gen_config_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("gen config: ") + e.what());
  }
  static const std::set<std::string> keys = {"n_docs",     "words_per_doc",  "n_direct", "n_indirect",
                                             "n_conf",     "repetition_law", "seed"};
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "gen config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw Error(ErrorCode::ConfigError, "gen config: unknown key '" + k + "'");
  }
  for (const auto& k : keys) {
    if (!j.contains(k)) throw Error(ErrorCode::ConfigError, "gen config: missing key '" + k + "'");
  }
  GenConfig cfg;
  try {
    cfg.n_docs = j["n_docs"].get<std::size_t>();
    cfg.words_per_doc = j["words_per_doc"].get<std::size_t>();
    cfg.n_direct = j["n_direct"].get<std::size_t>();
    cfg.n_indirect = j["n_indirect"].get<std::size_t>();
    cfg.n_conf = j["n_conf"].get<std::size_t>();
    cfg.repetition_law = j["repetition_law"].get<double>();
    cfg.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("gen config: ") + e.what());
  }
  return cfg;
}

GenConfig load_gen_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return gen_config_from_json(text);
}

GeneratedCorpus generate_synthetic_corpus(const GenConfig& cfg) {
  if (cfg.n_docs == 0 || cfg.words_per_doc == 0 || cfg.n_direct == 0 || cfg.n_indirect == 0 || cfg.n_conf == 0) {
    throw Error(ErrorCode::ConfigError, "all generator counts must be >= 1");
  }
  if (!(cfg.repetition_law > 0.0)) throw Error(ErrorCode::ConfigError, "repetition_law must be > 0");

  const std::size_t total_words = cfg.n_docs * cfg.words_per_doc;
  Rng word_rng(derive_seed(cfg.seed, 1));
  Rng term_rng(derive_seed(cfg.seed, 2));
  Rng place_rng(derive_seed(cfg.seed, 3));
  Rng text_rng(derive_seed(cfg.seed, 4));
  WordFactory factory(word_rng);

  GeneratedCorpus gen;

  // Filler vocabulary with a sparse first-order transition structure.
  const std::size_t n_filler = std::clamp<std::size_t>(total_words / 100, 150, 2000);
  for (std::size_t i = 0; i < n_filler; ++i) gen.filler.push_back(factory.filler());
  std::vector<std::array<std::size_t, kSuccessors>> successors(n_filler);
  for (auto& s : successors) {
    for (auto& x : s) x = word_rng.uniform(n_filler);
  }
  std::vector<double> unigram_cdf(n_filler);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_filler; ++i) {
    acc += std::pow(static_cast<double>(i + 1), -0.8);
    unigram_cdf[i] = acc;
  }
  for (auto& c : unigram_cdf) c /= acc;
  auto draw_unigram = [&](Rng& rng) {
    const double u = rng.uniform01();
    auto it = std::upper_bound(unigram_cdf.begin(), unigram_cdf.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - unigram_cdf.begin()), n_filler - 1);
  };

  // Sensitive terms from disjoint word pools, each with a fixed signature.
  std::vector<PlantedTerm> terms;
  std::vector<std::size_t> counts;
  auto make_category = [&](Category cat, std::size_t n, std::vector<std::vector<std::string>>& out,
                           std::vector<std::size_t>& out_counts) {
    double harmonic = 0.0;
    for (std::size_t r = 1; r <= n; ++r) harmonic += std::pow(static_cast<double>(r), -cfg.repetition_law);
    const double occurrences = density(cat) * static_cast<double>(total_words) / mean_length(cat);
    out_counts = power_law_counts(n, cfg.repetition_law, occurrences / harmonic);
    for (std::size_t i = 0; i < n; ++i) {
      PlantedTerm t;
      t.cat = cat;
      const std::size_t len = draw_length(term_rng, cat);
      for (std::size_t j = 0; j < len; ++j) t.words.push_back(factory.sensitive());
      t.signature[0] = term_rng.uniform(n_filler);
      do {
        t.signature[1] = term_rng.uniform(n_filler);
      } while (t.signature[1] == t.signature[0]);
      out.push_back(t.words);
      terms.push_back(std::move(t));
      counts.push_back(out_counts[i]);
    }
  };
  make_category(Category::Direct, cfg.n_direct, gen.direct, gen.direct_counts);
  make_category(Category::Indirect, cfg.n_indirect, gen.indirect, gen.indirect_counts);
  make_category(Category::Conf, cfg.n_conf, gen.conf, gen.conf_counts);

  std::size_t planted_words = 0;
  std::vector<std::size_t> plants;
  for (std::size_t t = 0; t < terms.size(); ++t) {
    planted_words += counts[t] * (kSignatureLen + terms[t].words.size());
    for (std::size_t c = 0; c < counts[t]; ++c) plants.push_back(t);
  }
  if (planted_words > total_words) {
    throw Error(ErrorCode::ConfigError, "planted terms need " + std::to_string(planted_words) +
                                            " words but the corpus has only " + std::to_string(total_words));
  }

  // Assign plants to documents without exceeding words_per_doc.
  place_rng.shuffle(plants);
  std::vector<std::vector<std::size_t>> doc_plants(cfg.n_docs);
  std::vector<std::size_t> used(cfg.n_docs, 0);
  for (std::size_t t : plants) {
    const std::size_t size = kSignatureLen + terms[t].words.size();
    std::size_t d = place_rng.uniform(cfg.n_docs);
    std::size_t tries = 0;
    while (used[d] + size > cfg.words_per_doc && tries < cfg.n_docs) {
      d = (d + 1) % cfg.n_docs;
      ++tries;
    }
    if (tries == cfg.n_docs) throw Error(ErrorCode::ConfigError, "planted terms do not fit in documents");
    used[d] += size;
    doc_plants[d].push_back(t);
  }

  for (std::size_t d = 0; d < cfg.n_docs; ++d) {
    AnnotatedDocument doc;
    char id[32];
    std::snprintf(id, sizeof id, "doc%05zu", d);
    doc.id = id;
    const std::size_t n_fill = cfg.words_per_doc - used[d];
    std::vector<std::size_t> gaps;
    for (std::size_t i = 0; i < doc_plants[d].size(); ++i) gaps.push_back(text_rng.uniform(n_fill + 1));
    std::sort(gaps.begin(), gaps.end());

    std::size_t state = draw_unigram(text_rng);
    auto emit_filler = [&] {
      if (text_rng.uniform01() < kFollowProb) {
        state = successors[state][text_rng.uniform01() < kFirstSuccessor ? 0 : 1];
      } else {
        state = draw_unigram(text_rng);
      }
      doc.words.push_back(gen.filler[state]);
    };

    std::size_t emitted = 0;
    for (std::size_t i = 0; i < doc_plants[d].size(); ++i) {
      for (; emitted < gaps[i]; ++emitted) emit_filler();
      const auto& term = terms[doc_plants[d][i]];
      for (std::size_t s : term.signature) doc.words.push_back(gen.filler[s]);
      state = term.signature[kSignatureLen - 1];
      doc.annotations.push_back({doc.words.size(), term.words.size(), term.cat});
      for (const auto& w : term.words) doc.words.push_back(w);
    }
    for (; emitted < n_fill; ++emitted) emit_filler();
    gen.docs.push_back(std::move(doc));
  }
  return gen;
}

void write_generated(const GeneratedCorpus& gen, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_corpus_jsonl(gen.docs, dir / "corpus.jsonl");
  auto write_terms = [&](const std::vector<std::vector<std::string>>& terms, const std::string& name,
                         const std::string& header) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / name).string());
    out << "# " << header << '\n';
    for (const auto& t : terms) {
      for (std::size_t i = 0; i < t.size(); ++i) out << (i ? " " : "") << t[i];
      out << '\n';
    }
  };
  write_terms(gen.direct, "blacklist_direct.txt", "direct identifiers");
  write_terms(gen.indirect, "blacklist_indirect.txt", "indirect identifiers");
  write_terms(gen.conf, "blacklist_conf.txt", "confidential terms");
}

}  // namespace sani
