#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sani/downstream.hpp"
#include "sani/errors.hpp"
#include "test_util.hpp"

using namespace sani;

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

std::vector<std::string> pool(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("w" + std::to_string(i));
  return out;
}

struct Task {
  MarkerTask task;
  LabeledSet train, test;
  Vocab vocab;
};

Task marker_task(std::size_t n_train, std::size_t n_test) {
  Task t;
  t.task = make_marker_task(pool(30), 4, 3);
  LabeledTaskConfig c;
  c.n_examples = n_train;
  c.min_words = 6;
  c.max_words = 10;
  c.seed = 1;
  t.train = generate_labeled_set(t.task, c);
  c.n_examples = n_test;
  c.seed = 2;
  t.test = generate_labeled_set(t.task, c);
  Corpus words{AnnotatedDocument{"v", pool(30), {}, {}, {}}};
  t.vocab = build_vocab(words);
  tokenize(t.train, t.vocab);
  tokenize(t.test, t.vocab);
  return t;
}

ModelParams encoder(std::size_t vocab, Variant v = Variant::MLM) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = vocab;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq = 16;
  c.seed = 6;
  return ModelParams::init(c);
}

}  // namespace

TEST(WarmupLr, Shape) {
  const std::size_t total = 100;
  const std::size_t warm = 10;  // floor(0.1 * 100)
  EXPECT_DOUBLE_EQ(warmup_lr(0, total, 0.1, 1.0), 0.1);
  EXPECT_DOUBLE_EQ(warmup_lr(warm - 1, total, 0.1, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(warmup_lr(warm, total, 0.1, 1.0), 1.0);
  double prev = 1.0;
  for (std::size_t s = warm + 1; s < total; ++s) {
    const double lr = warmup_lr(s, total, 0.1, 1.0);
    EXPECT_LT(lr, prev);
    EXPECT_GT(lr, 0.0);
    prev = lr;
  }
  EXPECT_EQ(warmup_lr(total, total, 0.1, 1.0), 0.0);
  // at least one warmup step
  EXPECT_DOUBLE_EQ(warmup_lr(0, 5, 0.1, 2.0), 2.0);
}

TEST(MacroF1, KnownValues) {
  const std::vector<std::size_t> truth{0, 0, 1, 1, 2, 2, 3, 3};
  EXPECT_DOUBLE_EQ(macro_f1(truth, truth, 4), 1.0);
  // constant predictor: class 0 has precision 1/4, recall 1, F1 0.4; others 0
  EXPECT_DOUBLE_EQ(macro_f1(truth, std::vector<std::size_t>(8, 0), 4), 0.1);
  EXPECT_EQ(code_of([&] { macro_f1({0, 1, 2}, {0, 1, 2}, 4); }), ErrorCode::MissingClass);
  EXPECT_EQ(code_of([&] { macro_f1(std::vector<std::size_t>{}, std::vector<std::size_t>{}, 4); }), ErrorCode::EmptyLabeledSet);
}

TEST(MacroF1, PermutationInvariant) {
  Rng rng(4);
  std::vector<std::size_t> truth, pred;
  for (std::size_t i = 0; i < 60; ++i) {
    truth.push_back(i % 3);
    pred.push_back(rng.uniform(3));
  }
  const double f = macro_f1(truth, pred, 3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> order(truth.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform(i)]);
    std::vector<std::size_t> t2, p2;
    for (auto i : order) {
      t2.push_back(truth[i]);
      p2.push_back(pred[i]);
    }
    EXPECT_NEAR(macro_f1(t2, p2, 3), f, 1e-15);
  }
}

TEST(LabeledSet, BalancedWithOneMarker) {
  const Task t = marker_task(400, 40);
  std::vector<std::size_t> per_class(4, 0);
  for (const auto& ex : t.train) {
    ASSERT_LT(ex.label, 4u);
    ++per_class[ex.label];
    EXPECT_GE(ex.words.size(), 6u);
    EXPECT_LE(ex.words.size(), 10u);
    std::size_t markers = 0;
    for (const auto& w : ex.words) {
      const auto it = std::find(t.task.markers.begin(), t.task.markers.end(), w);
      if (it == t.task.markers.end()) continue;
      ++markers;
      EXPECT_EQ(static_cast<std::size_t>(it - t.task.markers.begin()), ex.label);
    }
    EXPECT_EQ(markers, 1u);
  }
  for (auto n : per_class) EXPECT_EQ(n, 100u);
}

TEST(LabeledSet, JsonlRoundTrip) {
  const Task t = marker_task(20, 4);
  const auto dir = testutil::scratch_dir("labeled");
  write_labeled_jsonl(t.train, dir / "l.jsonl");
  const LabeledSet back = read_labeled_jsonl(dir / "l.jsonl");
  ASSERT_EQ(back.size(), t.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].words, t.train[i].words);
    EXPECT_EQ(back[i].label, t.train[i].label);
  }
}

TEST(Classifier, LearnsSeparableTask) {
  const Task t = marker_task(400, 200);
  ClassifierConfig cfg;
  cfg.peak_lr = 1e-3;
  const ClassifierResult r = train_classifier(encoder(t.vocab.size()), t.train, t.test, cfg);
  ASSERT_EQ(r.f1_history.size(), cfg.epochs);
  EXPECT_GE(r.f1_history.back(), 0.95);
  EXPECT_EQ(macro_f1(r.model, t.test, 4), r.f1_history.back());
}

TEST(Classifier, DeterministicAndValidated) {
  const Task t = marker_task(40, 20);
  ClassifierConfig cfg;
  cfg.epochs = 1;
  const ModelParams enc = encoder(t.vocab.size());
  const ClassifierResult a = train_classifier(enc, t.train, t.test, cfg);
  const ClassifierResult b = train_classifier(enc, t.train, t.test, cfg);
  EXPECT_EQ(a.model.encoder, b.model.encoder);
  EXPECT_EQ(a.model.weight, b.model.weight);
  EXPECT_EQ(a.f1_history, b.f1_history);
  EXPECT_EQ(code_of([&] { train_classifier(enc, {}, t.test, cfg); }), ErrorCode::EmptyLabeledSet);
  EXPECT_EQ(code_of([&] { train_classifier(encoder(t.vocab.size(), Variant::CLM), t.train, t.test, cfg); }),
            ErrorCode::SchemeVariantMismatch);
}
