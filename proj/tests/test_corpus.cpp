#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "sani/corpus.hpp"
#include "sani/errors.hpp"
#include "test_util.hpp"

using namespace sani;
using testutil::make_doc;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

std::size_t scan_count(const Corpus& docs, const std::vector<std::string>& term) {
  std::size_t n = 0;
  for (const auto& d : docs) {
    for (std::size_t s = 0; s + term.size() <= d.words.size(); ++s) {
      n += std::equal(term.begin(), term.end(), d.words.begin() + static_cast<std::ptrdiff_t>(s));
    }
  }
  return n;
}

}  // namespace

TEST(Tokens, HyphenSplitRoundTrip) {
  EXPECT_EQ(split_word("follow-up"), (std::vector<std::string>{"follow", "##up"}));
  EXPECT_EQ(split_word("fever"), (std::vector<std::string>{"fever"}));
  for (std::string w : {"a", "long-term-care", "x-ray", "plain"}) {
    const auto pieces = split_word(w);
    EXPECT_EQ(join_tokens(pieces), w);
  }
}

TEST(Vocab, SmallExample) {
  Corpus docs{make_doc("d", "a b a")};
  const Vocab v = build_vocab(docs);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_TRUE(v.contains("b"));
  const Vocab v2 = build_vocab(docs, 2);
  EXPECT_EQ(v2.size(), 5u);
  EXPECT_EQ(v2.id("b"), Vocab::kUnk);
  tokenize(docs, v2);
  EXPECT_EQ(docs[0].token_ids, (std::vector<TokenId>{v2.id("a"), Vocab::kUnk, v2.id("a")}));
}

TEST(Vocab, SizeIsDistinctTokensPlusSpecials) {
  const auto c = testutil::small_corpus(20, 60);
  std::set<std::string> distinct;
  for (const auto& d : c.gen.docs) {
    for (const auto& w : d.words) {
      for (const auto& t : split_word(w)) distinct.insert(t);
    }
  }
  EXPECT_EQ(c.vocab.size(), distinct.size() + 4);
  for (const auto& d : c.docs) {
    ASSERT_TRUE(d.tokenized());
    EXPECT_EQ(c.vocab.decode(d.token_ids), d.words);
  }
}

TEST(Vocab, SpecialSpellingsAreNotAdded) {
  Vocab v;
  const std::size_t before = v.size();
  const std::string mask = v.token(Vocab::kMask);
  EXPECT_EQ(v.add(mask), Vocab::kUnk);
  EXPECT_EQ(v.size(), before);
  Corpus docs{make_doc("d", "a " + mask + " b")};
  const Vocab built = build_vocab(docs);
  tokenize(docs, built);
  EXPECT_EQ(docs[0].token_ids[1], Vocab::kUnk);
  for (TokenId id : docs[0].token_ids) EXPECT_NE(id, Vocab::kMask);
}

TEST(Blacklist, CountsAndLookup) {
  Corpus docs{make_doc("a", "john smith has fever and john smith left"), make_doc("b", "smith john x-ray")};
  const Vocab v = build_vocab(docs);
  tokenize(docs, v);
  const Blacklist bl = Blacklist::from_terms({{"john", "smith"}, {"x-ray"}, {"john", "smith"}, {"nobody"}}, v, docs);
  ASSERT_EQ(bl.size(), 3u);
  EXPECT_EQ(bl.repetitions(0), 2u);
  EXPECT_EQ(bl.repetitions(1), 1u);
  EXPECT_EQ(bl.repetitions(2), 0u);
  EXPECT_TRUE(bl.terms()[2].has_unk);
  EXPECT_EQ(bl.term_text(1), "x-ray");
  EXPECT_TRUE(bl.contains_token(v.id("john")));
  EXPECT_TRUE(bl.contains_token(v.id("##ray")));
  EXPECT_FALSE(bl.contains_token(v.id("fever")));
  EXPECT_FALSE(bl.contains_token(Vocab::kUnk));
  EXPECT_EQ(bl.owner(v.id("smith")), std::optional<std::size_t>(0));

  const auto occ = find_occurrences(docs[0], bl);
  ASSERT_EQ(occ.size(), 2u);
  EXPECT_EQ(occ[0].word_start, 0u);
  EXPECT_EQ(occ[1].word_start, 5u);
  EXPECT_EQ(blacklisted_words(docs[1], bl), (std::vector<bool>{false, false, true}));
}

TEST(Blacklist, RepetitionsMatchNgramScan) {
  const auto c = testutil::small_corpus(40, 80);
  auto terms = c.gen.direct;
  terms.insert(terms.end(), c.gen.conf.begin(), c.gen.conf.end());
  const Blacklist bl = Blacklist::from_terms(terms, c.vocab, c.docs);
  ASSERT_EQ(bl.size(), terms.size());
  for (std::size_t t = 0; t < terms.size(); ++t) EXPECT_EQ(bl.repetitions(t), scan_count(c.docs, terms[t])) << t;
}

TEST(Blacklist, TokenSetMatchesLinearScan) {
  const auto c = testutil::small_corpus(20, 60);
  const Blacklist bl = Blacklist::from_terms(c.gen.indirect, c.vocab, c.docs);
  for (TokenId id = 0; id < 1000; ++id) {
    bool oracle = false;
    if (!Vocab::is_special(id)) {
      for (const auto& t : bl.terms()) oracle |= std::find(t.tokens.begin(), t.tokens.end(), id) != t.tokens.end();
    }
    ASSERT_EQ(bl.contains_token(id), oracle) << id;
  }
}

TEST(Blacklist, MergeRecounts) {
  Corpus docs{make_doc("a", "p q r p")};
  const Vocab v = build_vocab(docs);
  tokenize(docs, v);
  const Blacklist a = Blacklist::from_terms({{"p"}}, v, docs);
  const Blacklist b = Blacklist::from_terms({{"q", "r"}, {"p"}}, v, docs);
  const Blacklist m = Blacklist::merge(a, b, v, docs);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.repetitions(0), 2u);
  EXPECT_EQ(m.repetitions(1), 1u);
  EXPECT_EQ(m.total_repetitions(), 3u);
}

TEST(Generator, Deterministic) {
  GenConfig g;
  g.n_docs = 20;
  g.words_per_doc = 50;
  g.n_direct = g.n_indirect = g.n_conf = 6;
  EXPECT_EQ(corpus_to_jsonl(generate_synthetic_corpus(g).docs), corpus_to_jsonl(generate_synthetic_corpus(g).docs));
  GenConfig h = g;
  h.seed = 2;
  EXPECT_NE(corpus_to_jsonl(generate_synthetic_corpus(g).docs), corpus_to_jsonl(generate_synthetic_corpus(h).docs));
}

TEST(Generator, PlantedCountsFollowPowerLaw) {
  // By hand: counts = round(peak / rank) for ranks 1..10.
  const auto counts = power_law_counts(10, 1.0, 66.0);
  ASSERT_EQ(counts.size(), 10u);
  for (std::size_t r = 1; r <= 10; ++r) EXPECT_NEAR(static_cast<double>(counts[r - 1]), 66.0 / r, 0.5) << r;
  // first / last >= 10 up to the rounding of the last count
  EXPECT_GE(static_cast<double>(counts.front()), 10.0 * (static_cast<double>(counts.back()) - 0.5));
  EXPECT_EQ(power_law_counts(3, 1.0, 0.2), (std::vector<std::size_t>{1, 1, 1}));
}

TEST(Generator, RepetitionsMatchPlantedCounts) {
  const auto c = testutil::small_corpus(80, 120);
  const Blacklist bl = Blacklist::from_terms(c.gen.conf, c.vocab, c.docs);
  const auto& reps = bl.repetitions();
  const auto [lo, hi] = std::minmax_element(reps.begin(), reps.end());
  EXPECT_GE(*lo, 1u);
  EXPECT_GE(static_cast<double>(*hi), 10.0 * (static_cast<double>(*lo) - 0.5));
  for (std::size_t t = 0; t < c.gen.conf.size(); ++t) EXPECT_EQ(reps[t], c.gen.conf_counts[t]) << t;
}

TEST(Generator, AnnotationsAreBlacklistTerms) {
  const auto c = testutil::small_corpus(30, 80);
  std::set<std::vector<std::string>> direct(c.gen.direct.begin(), c.gen.direct.end());
  std::set<std::vector<std::string>> indirect(c.gen.indirect.begin(), c.gen.indirect.end());
  std::set<std::vector<std::string>> conf(c.gen.conf.begin(), c.gen.conf.end());
  std::set<std::string> filler(c.gen.filler.begin(), c.gen.filler.end());
  std::size_t spans = 0;
  for (const auto& d : c.docs) {
    EXPECT_NO_THROW(validate(d));
    std::vector<bool> in_span(d.words.size(), false);
    for (const auto& a : d.annotations) {
      const std::vector<std::string> words(d.words.begin() + static_cast<std::ptrdiff_t>(a.start),
                                           d.words.begin() + static_cast<std::ptrdiff_t>(a.start + a.len));
      const auto& set = a.cat == Category::Direct ? direct : a.cat == Category::Indirect ? indirect : conf;
      EXPECT_TRUE(set.count(words)) << d.id;
      for (std::size_t k = 0; k < a.len; ++k) in_span[a.start + k] = true;
      ++spans;
    }
    for (std::size_t w = 0; w < d.words.size(); ++w) {
      if (!in_span[w]) EXPECT_TRUE(filler.count(d.words[w])) << d.words[w];
    }
  }
  EXPECT_GT(spans, 0u);
}

TEST(Annotations, OverlapIsRejected) {
  AnnotatedDocument d = make_doc("d", "a b c", {{0, 2, Category::Conf}, {1, 2, Category::Direct}});
  EXPECT_EQ(code_of([&] { validate(d); }), ErrorCode::ConfigError);
  d = make_doc("d", "a b c", {{2, 2, Category::Conf}});
  EXPECT_EQ(code_of([&] { validate(d); }), ErrorCode::ConfigError);
}

TEST(Pseudonymize, ReplacesDirectSpans) {
  const AnnotatedDocument d =
      make_doc("d", "john smith has fever in paris", {{0, 2, Category::Direct}, {3, 1, Category::Conf}, {5, 1, Category::Direct}});
  const AnnotatedDocument p = pseudonymize(d);
  EXPECT_EQ(p.words, (std::vector<std::string>{"X", "has", "fever", "in", "X"}));
  ASSERT_EQ(p.annotations.size(), 1u);
  EXPECT_EQ(p.annotations[0], (Annotation{2, 1, Category::Conf}));
  EXPECT_TRUE(p.token_ids.empty());

  const AnnotatedDocument s = strip_annotated(d);
  EXPECT_EQ(s.words, (std::vector<std::string>{"has", "in"}));
  EXPECT_TRUE(s.annotations.empty());
}

TEST(Pseudonymize, RemovesEveryDirectRepetition) {
  const auto c = testutil::small_corpus(30, 80);
  Corpus p = pseudonymize(c.gen.docs);
  const Vocab v = build_vocab(p);
  tokenize(p, v);
  for (const auto& term : c.gen.direct) {
    if (term == std::vector<std::string>{"X"}) continue;
    EXPECT_EQ(scan_count(p, term), 0u);
  }
  const Blacklist conf = Blacklist::from_terms(c.gen.conf, v, p);
  for (std::size_t t = 0; t < c.gen.conf.size(); ++t) EXPECT_EQ(conf.repetitions(t), c.gen.conf_counts[t]);
}

TEST(Split, DeterministicPartition) {
  const auto c = testutil::small_corpus(30, 40);
  const CorpusSplit a = split_corpus(c.docs, 0.1, 9);
  const CorpusSplit b = split_corpus(c.docs, 0.1, 9);
  EXPECT_EQ(a.heldout.size(), 3u);
  EXPECT_EQ(a.train.size() + a.heldout.size(), c.docs.size());
  std::set<std::string> ids;
  for (const auto& d : a.train) ids.insert(d.id);
  for (const auto& d : a.heldout) ids.insert(d.id);
  EXPECT_EQ(ids.size(), c.docs.size());
  EXPECT_EQ(corpus_to_jsonl(a.heldout), corpus_to_jsonl(b.heldout));
  EXPECT_EQ(split_corpus(c.docs, 0.0001, 9).heldout.size(), 1u);
}

TEST(CorpusIo, JsonlRoundTrip) {
  const auto c = testutil::small_corpus(10, 40);
  const auto dir = testutil::scratch_dir("corpus_io");
  write_corpus_jsonl(c.gen.docs, dir / "c.jsonl");
  const Corpus back = read_corpus_jsonl(dir / "c.jsonl");
  ASSERT_EQ(back.size(), c.gen.docs.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, c.gen.docs[i].id);
    EXPECT_EQ(back[i].words, c.gen.docs[i].words);
    EXPECT_EQ(back[i].annotations, c.gen.docs[i].annotations);
  }
  EXPECT_EQ(corpus_to_jsonl(back), corpus_to_jsonl(c.gen.docs));
  EXPECT_EQ(code_of([&] { read_corpus_jsonl(dir / "missing.jsonl"); }), ErrorCode::IoError);
}

TEST(CorpusIo, GeneratedFilesLoad) {
  const auto c = testutil::small_corpus(10, 40);
  const auto dir = testutil::scratch_dir("corpus_gen");
  write_generated(c.gen, dir);
  const Blacklist bl = load_blacklist(dir / "blacklist_conf.txt", c.vocab, c.docs);
  ASSERT_EQ(bl.size(), c.gen.conf.size());
  for (std::size_t t = 0; t < bl.size(); ++t) EXPECT_EQ(bl.terms()[t].words, c.gen.conf[t]);
}

TEST(GenConfigParse, RejectsBadKeys) {
  const std::string ok =
      R"({"n_docs":5,"words_per_doc":10,"n_direct":1,"n_indirect":1,"n_conf":1,"repetition_law":1.0,"seed":1})";
  EXPECT_EQ(gen_config_from_json(ok).n_docs, 5u);
  EXPECT_EQ(code_of([] { gen_config_from_json(R"({"n_docs":5})"); }), ErrorCode::ConfigError);
  std::string extra = ok;
  extra.insert(1, R"("bogus":1,)");
  EXPECT_EQ(code_of([&] { gen_config_from_json(extra); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { gen_config_from_json("not json"); }), ErrorCode::ConfigError);
}
