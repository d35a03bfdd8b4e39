#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "sani/errors.hpp"
#include "sani/objectives.hpp"
#include "test_util.hpp"

using namespace sani;
using testutil::make_doc;

namespace {

/// Brute-force word flags: every word covered by some exact occurrence of a
/// term's word sequence.
std::vector<bool> covered_words(const AnnotatedDocument& doc, const std::vector<std::vector<std::string>>& terms) {
  std::vector<bool> out(doc.words.size(), false);
  for (const auto& term : terms) {
    if (term.empty() || term.size() > doc.words.size()) continue;
    for (std::size_t s = 0; s + term.size() <= doc.words.size(); ++s) {
      bool match = true;
      for (std::size_t k = 0; k < term.size() && match; ++k) match = doc.words[s + k] == term[k];
      if (match) {
        for (std::size_t k = 0; k < term.size(); ++k) out[s + k] = true;
      }
    }
  }
  return out;
}

std::vector<std::vector<std::string>> all_terms(const GeneratedCorpus& g) {
  auto t = g.direct;
  t.insert(t.end(), g.indirect.begin(), g.indirect.end());
  t.insert(t.end(), g.conf.begin(), g.conf.end());
  return t;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

struct Tokenized {
  Vocab vocab;
  AnnotatedDocument doc;
};

Tokenized tokenized(const std::string& text) {
  Tokenized t;
  t.doc = make_doc("d", text);
  t.vocab = build_vocab({t.doc});
  tokenize(t.doc, t.vocab);
  return t;
}

}  // namespace

TEST(Masking, CountRule) {
  EXPECT_EQ(mask_count(100, 0.15), 15u);
  EXPECT_EQ(mask_count(3, 0.15), 1u);
  EXPECT_EQ(mask_count(1, 0.15), 1u);
  EXPECT_EQ(mask_count(0, 0.15), 0u);
  for (std::size_t n = 1; n < 500; ++n) {
    const auto oracle = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n))));
    EXPECT_EQ(mask_count(n, 0.15), oracle) << n;
  }
}

TEST(Masking, StandardCounts) {
  std::string text;
  for (int i = 0; i < 100; ++i) text += "w" + std::to_string(i) + " ";
  const auto t = tokenized(text);
  Rng rng(1);
  EXPECT_EQ(select_masks_standard(t.doc, 0.15, rng).words.size(), 15u);
  const auto small = tokenized("a b c");
  EXPECT_EQ(select_masks_standard(small.doc, 0.15, rng).words.size(), 1u);
  AnnotatedDocument empty;
  EXPECT_EQ(code_of([&] { select_masks_standard(empty, 0.15, rng); }), ErrorCode::EmptyDocument);
}

TEST(Masking, StandardIsUniformWithinThreeSigma) {
  std::string text;
  for (int i = 0; i < 20; ++i) text += "w" + std::to_string(i) + " ";
  const auto t = tokenized(text);
  const int draws = 10000;
  std::vector<int> hits(20, 0);
  for (int i = 0; i < draws; ++i) {
    Rng rng(derive_seed(77, i));
    for (std::size_t w : select_masks_standard(t.doc, 0.15, rng).words) ++hits[w];
  }
  const double p = 0.15;
  const double sigma = std::sqrt(p * (1 - p) / draws);
  for (int w = 0; w < 20; ++w) EXPECT_NEAR(hits[w] / static_cast<double>(draws), p, 3 * sigma) << w;
}

TEST(Masking, WholeWordMasking) {
  const auto t = tokenized("follow-up visit long-term-care plan was set-up again");
  for (int i = 0; i < 200; ++i) {
    Rng rng(derive_seed(5, i));
    const MaskingPlan plan = select_masks_standard(t.doc, 0.5, rng);
    std::set<std::size_t> positions(plan.token_positions.begin(), plan.token_positions.end());
    std::set<std::size_t> expected;
    for (std::size_t w : plan.words) {
      for (std::size_t p = t.doc.word_offsets[w]; p < t.doc.word_offsets[w + 1]; ++p) expected.insert(p);
    }
    ASSERT_EQ(positions, expected);
    ASSERT_TRUE(std::is_sorted(plan.token_positions.begin(), plan.token_positions.end()));
    for (std::size_t k = 0; k < plan.token_positions.size(); ++k) {
      ASSERT_EQ(plan.targets[k], t.doc.token_ids[plan.token_positions[k]]);
    }
  }
}

TEST(Masking, PrivacyExcludesBlacklistedWords) {
  const auto t = tokenized("john has fever");
  const Blacklist bl = Blacklist::from_terms({{"john"}}, t.vocab, {t.doc});
  for (int i = 0; i < 100; ++i) {
    Rng rng(derive_seed(9, i));
    for (std::size_t w : select_masks_privacy(t.doc, bl, 0.15, rng).words) EXPECT_NE(w, 0u);
  }
  const auto all = tokenized("john john");
  const Blacklist bl2 = Blacklist::from_terms({{"john"}}, all.vocab, {all.doc});
  Rng rng(1);
  EXPECT_EQ(code_of([&] { select_masks_privacy(all.doc, bl2, 0.15, rng); }), ErrorCode::NoMaskableTokens);
}

TEST(Masking, PrivacyCountUsesMaskableWords) {
  std::string text = "john ";
  for (int i = 0; i < 40; ++i) text += "w" + std::to_string(i) + " ";
  const auto t = tokenized(text);
  const Blacklist bl = Blacklist::from_terms({{"john"}}, t.vocab, {t.doc});
  Rng rng(2);
  EXPECT_EQ(select_masks_privacy(t.doc, bl, 0.15, rng).words.size(), mask_count(40, 0.15));
}

TEST(Masking, PrivacyPlansNeverTouchBlacklistSpans) {
  const auto c = testutil::small_corpus(30, 80);
  const auto terms = all_terms(c.gen);
  const Blacklist bl = Blacklist::from_terms(terms, c.vocab, c.docs);
  std::size_t plans = 0, overlaps = 0;
  for (std::size_t round = 0; plans < 10000; ++round) {
    for (const auto& doc : c.docs) {
      const auto covered = covered_words(doc, terms);
      Rng rng(derive_seed(11, round, hash_string(doc.id)));
      const MaskingPlan plan = select_masks_privacy(doc, bl, 0.15, rng);
      for (std::size_t w : plan.words) overlaps += covered[w];
      for (std::size_t p : plan.token_positions) overlaps += covered[doc.word_of_token(p)];
      ++plans;
    }
  }
  EXPECT_EQ(overlaps, 0u);
}

TEST(Masking, DeterministicPerSeed) {
  const auto c = testutil::small_corpus(5, 60);
  const Blacklist bl = Blacklist::from_terms(all_terms(c.gen), c.vocab, c.docs);
  for (const auto& doc : c.docs) {
    Rng a(3), b(3);
    const auto pa = select_masks_privacy(doc, bl, 0.15, a);
    const auto pb = select_masks_privacy(doc, bl, 0.15, b);
    EXPECT_EQ(pa.words, pb.words);
    EXPECT_EQ(pa.token_positions, pb.token_positions);
  }
}

TEST(ClmTargets, Shift) {
  const auto t = tokenized("a b c");
  const auto targets = clm_targets(t.doc);
  ASSERT_EQ(targets.size(), 2u);
  EXPECT_EQ(targets[0], t.vocab.id("b"));
  EXPECT_EQ(targets[1], t.vocab.id("c"));
}

TEST(ClmTargets, PrivacyPadsBlacklistedTargets) {
  const auto t = tokenized("visit john has fever");
  const Blacklist bl = Blacklist::from_terms({{"john"}}, t.vocab, {t.doc});
  const auto targets = clm_targets_privacy(t.doc, bl);
  ASSERT_EQ(targets.size(), 3u);
  EXPECT_EQ(targets[0], Vocab::kPad);
  EXPECT_EQ(targets[1], t.vocab.id("has"));
  EXPECT_EQ(targets[2], t.vocab.id("fever"));
}

TEST(ClmTargets, PadCountMatchesSpanCounter) {
  const auto c = testutil::small_corpus(30, 80);
  const auto terms = all_terms(c.gen);
  const Blacklist bl = Blacklist::from_terms(terms, c.vocab, c.docs);
  std::size_t pads = 0, oracle = 0;
  for (const auto& doc : c.docs) {
    for (TokenId id : clm_targets_privacy(doc, bl)) pads += id == Vocab::kPad;
    const auto covered = covered_words(doc, terms);
    for (std::size_t w = 0; w < doc.words.size(); ++w) {
      if (!covered[w]) continue;
      const std::size_t tokens = doc.word_offsets[w + 1] - doc.word_offsets[w];
      oracle += w == 0 ? tokens - 1 : tokens;  // the document's first token is never a target
    }
  }
  EXPECT_GT(oracle, 0u);
  EXPECT_EQ(pads, oracle);
}

TEST(Chunking, NeverSplitsSpansAndCoversEverything) {
  const auto c = testutil::small_corpus(30, 120);
  for (std::size_t len : {8u, 16u, 32u}) {
    for (const auto& doc : c.docs) {
      const auto chunks = chunk_words(doc, len);
      std::size_t expect = 0;
      for (auto [b, e] : chunks) {
        ASSERT_EQ(b, expect);
        ASSERT_LE(e - b, len);
        ASSERT_GT(e, b);
        expect = e;
        for (const auto& a : doc.annotations) {
          const std::size_t sb = doc.word_offsets[a.start], se = doc.word_offsets[a.start + a.len];
          ASSERT_TRUE(se <= b || sb >= e || (sb >= b && se <= e)) << doc.id;
        }
      }
      ASSERT_EQ(expect, doc.num_tokens());
    }
  }
  AnnotatedDocument doc = make_doc("long", "a b c d e", {{0, 5, Category::Conf}});
  const Vocab v = build_vocab({doc});
  tokenize(doc, v);
  EXPECT_EQ(code_of([&] { chunk_words(doc, 3); }), ErrorCode::SequenceTooLong);
}

TEST(Chunking, CausalWindowsCoverEachTargetOnce) {
  for (std::size_t n : {1u, 2u, 5u, 16u, 17u, 33u, 100u}) {
    for (std::size_t len : {2u, 4u, 16u}) {
      std::vector<int> covered(n, 0);
      for (std::size_t s : causal_window_starts(n, len)) {
        const std::size_t e = std::min(n, s + len);
        for (std::size_t p = s; p + 1 < e; ++p) ++covered[p];
      }
      for (std::size_t p = 0; p + 1 < n; ++p) ASSERT_EQ(covered[p], 1) << n << " " << len << " " << p;
    }
  }
}

TEST(Schedule, LinearDecay) {
  TrainSchedule s;
  s.lr_start = 1e-4;
  EXPECT_DOUBLE_EQ(s.lr(0, 100), 1e-4);
  EXPECT_DOUBLE_EQ(s.lr(50, 100), 5e-5);
  EXPECT_DOUBLE_EQ(s.lr(100, 100), 0.0);
  EXPECT_GE(s.lr(150, 100), 0.0);
}

namespace {

ModelParams corpus_model(const testutil::SmallCorpus& c, Variant v) {
  ModelConfig mc;
  mc.variant = v;
  mc.vocab_size = c.vocab.size();
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.max_seq = 16;
  mc.seed = 4;
  return ModelParams::init(mc);
}

TrainSchedule quick_schedule() {
  TrainSchedule s;
  s.total_epochs = 2;
  s.lr_start = 1e-3;
  s.seq_len = 16;
  return s;
}

}  // namespace

TEST(TrainEpoch, PrivacyWithEmptyBlacklistEqualsStandard) {
  const auto c = testutil::small_corpus(12, 50);
  for (auto [pp, plain] : {std::pair{Scheme::PPMLM, Scheme::MLM}, std::pair{Scheme::PPCLM, Scheme::CLM}}) {
    ModelParams a = corpus_model(c, variant_of(plain));
    ModelParams b = a;
    AdamState sa(a.tensors()), sb(b.tensors());
    train_epoch(a, sa, c.docs, Blacklist{}, pp, quick_schedule(), 0, 21);
    train_epoch(b, sb, c.docs, Blacklist{}, plain, quick_schedule(), 0, 21);
    EXPECT_EQ(a, b) << to_string(pp);
  }
}

TEST(TrainEpoch, LossDropsAfterOneEpoch) {
  const auto c = testutil::small_corpus(12, 50);
  for (Scheme s : {Scheme::MLM, Scheme::CLM}) {
    ModelParams p = corpus_model(c, variant_of(s));
    const double before = evaluate_loss(p, c.docs, Blacklist{}, s, quick_schedule(), 21, 0);
    AdamState adam(p.tensors());
    train_epoch(p, adam, c.docs, Blacklist{}, s, quick_schedule(), 0, 21);
    EXPECT_LT(evaluate_loss(p, c.docs, Blacklist{}, s, quick_schedule(), 21, 0), before) << to_string(s);
  }
}

TEST(TrainEpoch, Deterministic) {
  const auto c = testutil::small_corpus(8, 50);
  auto run = [&] {
    ModelParams p = corpus_model(c, Variant::MLM);
    AdamState adam(p.tensors());
    train_epoch(p, adam, c.docs, Blacklist{}, Scheme::MLM, quick_schedule(), 1, 5);
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainEpoch, SchemeVariantMismatch) {
  const auto c = testutil::small_corpus(4, 40);
  ModelParams p = corpus_model(c, Variant::MLM);
  AdamState adam(p.tensors());
  EXPECT_EQ(code_of([&] { train_epoch(p, adam, c.docs, Blacklist{}, Scheme::CLM, quick_schedule(), 0, 1); }),
            ErrorCode::SchemeVariantMismatch);
}

TEST(TrainEpoch, PpclmPadRowsContributeNothing) {
  const auto c = testutil::small_corpus(10, 60);
  const Blacklist bl = Blacklist::from_terms(all_terms(c.gen), c.vocab, c.docs);
  const ModelParams p = testutil::toy_model(Variant::CLM);
  ModelParams q = corpus_model(c, Variant::CLM);
  const auto windows = build_windows(c.docs, bl, Scheme::PPCLM, quick_schedule(), q.config().max_seq, 1, 0);
  std::size_t checked = 0;
  for (const auto& w : windows) {
    TrainWindow kept;
    kept.input = w.input;
    for (std::size_t k = 0; k < w.rows.size(); ++k) {
      if (w.targets[k] == Vocab::kPad) continue;
      kept.rows.push_back(w.rows[k]);
      kept.targets.push_back(w.targets[k]);
    }
    if (kept.rows.size() == w.rows.size() || kept.rows.empty()) continue;
    GradientSet ga(q.tensors()), gb(q.tensors());
    const double la = window_loss_and_grad(q, w, AttentionMode::Causal, ga, 1.0);
    const double lb = window_loss_and_grad(q, kept, AttentionMode::Causal, gb, 1.0);
    EXPECT_NEAR(la, lb, 1e-14);
    for (std::size_t i = 0; i < q.size(); ++i) {
      for (std::size_t k = 0; k < ga[i].size(); ++k) ASSERT_NEAR(ga[i].data[k], gb[i].data[k], 1e-14);
    }
    ++checked;
  }
  EXPECT_GT(checked, 0u);
  (void)p;
}
