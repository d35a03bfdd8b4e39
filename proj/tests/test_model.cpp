#include <gtest/gtest.h>

#include <fstream>

#include "sani/errors.hpp"
#include "sani/metrics.hpp"
#include "sani/model.hpp"
#include "test_util.hpp"

using namespace sani;

namespace {

ModelConfig small_config(Variant v, std::size_t vocab = 30) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ff = 32;
  c.max_seq = 12;
  c.seed = 42;
  return c;
}

std::vector<TokenId> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(Vocab::kNumSpecial + rng.uniform(vocab - Vocab::kNumSpecial));
  return ids;
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

}  // namespace

TEST(Model, InitIsDeterministic) {
  const auto c = small_config(Variant::MLM);
  EXPECT_EQ(ModelParams::init(c), ModelParams::init(c));
}

TEST(Model, InitFollowsScheme) {
  const ModelParams p = ModelParams::init(small_config(Variant::MLM));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Tensor& t = p.tensors()[i];
    const std::string& name = p.names()[i];
    if (name.ends_with(".gain")) {
      for (double v : t.data) EXPECT_EQ(v, 1.0) << name;
    } else if (t.rank() == 1) {
      for (double v : t.data) EXPECT_EQ(v, 0.0) << name;
    } else {
      double ss = 0.0;
      for (double v : t.data) ss += v * v;
      EXPECT_NEAR(std::sqrt(ss / static_cast<double>(t.size())), 0.02, 0.004) << name;
    }
  }
}

TEST(Model, HeadShapeAndEnumeration) {
  ModelConfig c = small_config(Variant::MLM, 1000);
  c.d_model = 64;
  c.d_ff = 64;
  const ModelParams p = ModelParams::init(c);
  EXPECT_EQ(p.tensors()[p.head_weight()].shape, (std::vector<std::size_t>{1000, 64}));
  EXPECT_EQ(p.tensors()[p.head_bias()].shape, (std::vector<std::size_t>{1000}));
  EXPECT_EQ(p.names().front(), "tok_emb");
  EXPECT_EQ(p.names()[p.size() - 2], "head.weight");
  EXPECT_EQ(p.names().back(), "head.bias");
}

TEST(Model, ConfigValidation) {
  ModelConfig c = small_config(Variant::MLM);
  c.n_heads = 3;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::ConfigError);
  c = small_config(Variant::MLM);
  c.max_seq = 1;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::ConfigError);
  c = small_config(Variant::MLM);
  EXPECT_EQ(ModelConfig::from_json(nlohmann::json::parse(c.to_json().dump())), c);
}

TEST(Model, CausalityUnderPerturbation) {
  const ModelParams p = ModelParams::init(small_config(Variant::CLM));
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform(11);
    std::vector<TokenId> ids = random_ids(n, 30, rng);
    const Tensor before = forward(p, ids, AttentionMode::Causal);
    const std::size_t t = rng.uniform(n);
    ids[t] = static_cast<TokenId>(Vocab::kNumSpecial + (ids[t] - Vocab::kNumSpecial + 1) % 26);
    const Tensor after = forward(p, ids, AttentionMode::Causal);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < before.cols(); ++c) ASSERT_EQ(before.at(r, c), after.at(r, c));
    }
  }
}

TEST(Model, BidirectionalSeesTheFuture) {
  const ModelParams p = ModelParams::init(small_config(Variant::MLM));
  std::vector<TokenId> ids{5, 6, 7, 8, 9};
  const Tensor before = forward(p, ids, AttentionMode::Bidirectional);
  ids[4] = 20;
  const Tensor after = forward(p, ids, AttentionMode::Bidirectional);
  bool changed = false;
  for (std::size_t c = 0; c < before.cols(); ++c) changed |= before.at(0, c) != after.at(0, c);
  EXPECT_TRUE(changed);
}

TEST(Model, ZeroHeadGivesUniformPrediction) {
  ModelParams p = ModelParams::init(small_config(Variant::MLM));
  p.tensors()[p.head_weight()].fill(0.0);
  p.tensors()[p.head_bias()].fill(0.0);
  const std::vector<TokenId> ids{5, 6, 7};
  const Tensor logits = forward(p, ids, AttentionMode::Bidirectional);
  Tape tape(false);
  const Tensor& probs = tape.value(softmax_rows(tape, tape.constant(logits)));
  for (double v : probs.data) EXPECT_NEAR(v, 1.0 / 30.0, 1e-15);
}

TEST(Model, ForwardIsPure) {
  const ModelParams p = ModelParams::init(small_config(Variant::MLM));
  const std::vector<TokenId> ids{5, 6, 7, 8};
  EXPECT_EQ(forward(p, ids, AttentionMode::Bidirectional), forward(p, ids, AttentionMode::Bidirectional));
}

TEST(Model, SequenceLimits) {
  const ModelParams p = ModelParams::init(small_config(Variant::MLM));
  const std::vector<TokenId> long_ids(13, 5);
  EXPECT_EQ(code_of([&] { forward(p, long_ids, AttentionMode::Bidirectional); }), ErrorCode::SequenceTooLong);
  EXPECT_EQ(code_of([&] { forward(p, {}, AttentionMode::Bidirectional); }), ErrorCode::EmptyDocument);
}

TEST(Model, HeadEditTouchesOnlyHeadEntries) {
  const ModelParams p = ModelParams::init(small_config(Variant::MLM));
  ModelParams q = p;
  q.tensors()[q.head_weight()].at(3, 2) = 9.0;
  q.tensors()[q.head_bias()].data[3] = 9.0;
  for (std::size_t i = 0; i + 2 < p.size(); ++i) EXPECT_EQ(p.tensors()[i], q.tensors()[i]) << p.names()[i];
}

TEST(Model, UntrainedUtilityIsNearChance) {
  GenConfig g;
  g.n_docs = 30;
  g.words_per_doc = 60;
  g.n_direct = 5;
  g.n_indirect = 5;
  g.n_conf = 5;
  const GeneratedCorpus gen = generate_synthetic_corpus(g);
  Corpus docs = gen.docs;
  const Vocab vocab = build_vocab(docs);
  tokenize(docs, vocab);
  ModelConfig c = small_config(Variant::MLM, vocab.size());
  c.max_seq = 64;
  const ModelParams p = ModelParams::init(c);

  std::map<TokenId, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& d : docs) {
    for (TokenId id : d.token_ids) {
      ++freq[id];
      ++total;
    }
  }
  std::size_t modal = 0;
  for (const auto& [id, n] : freq) modal = std::max(modal, n);
  const double modal_rate = static_cast<double>(modal) / static_cast<double>(total);
  EXPECT_LE(utility_mlm(p, docs), 2.0 * modal_rate);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const ModelParams p = testutil::toy_model(Variant::MLM);
  AdamState adam(p.tensors());
  adam.step = 17;
  adam.m[3].data[1] = 0.25;
  adam.v[5].data[0] = 1e-9;
  const Checkpoint ck{p, adam, 12, "note"};
  const auto dir = testutil::scratch_dir("ckpt_roundtrip");
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.params, p);
  ASSERT_TRUE(back.adam.has_value());
  EXPECT_EQ(back.adam->m, adam.m);
  EXPECT_EQ(back.adam->v, adam.v);
  EXPECT_EQ(back.adam->step, 17u);
  EXPECT_EQ(back.epoch, 12u);
  EXPECT_EQ(back.rng_state, "note");
  const std::vector<TokenId> ids{4, 5, 6};
  EXPECT_EQ(forward(back.params, ids, AttentionMode::Bidirectional), forward(p, ids, AttentionMode::Bidirectional));
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(Checkpoint, WithoutOptimizerState) {
  const Checkpoint ck{testutil::toy_model(Variant::CLM), std::nullopt, 0, ""};
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
  EXPECT_FALSE(back.adam.has_value());
  EXPECT_EQ(back.params, ck.params);
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  const std::string bytes = serialize_checkpoint({testutil::toy_model(Variant::MLM), std::nullopt, 0, ""});
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_EQ(code_of([&] { deserialize_checkpoint(std::string_view(bytes).substr(0, keep)); }), ErrorCode::CorruptFile)
        << keep;
  }
}

TEST(Checkpoint, FlippedByteIsCorrupt) {
  std::string bytes = serialize_checkpoint({testutil::toy_model(Variant::MLM), std::nullopt, 0, ""});
  bytes[bytes.size() / 2] ^= 0x20;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bytes); }), ErrorCode::CorruptFile);
}

TEST(Checkpoint, OtherVersionIsRejected) {
  std::string bytes = serialize_checkpoint({testutil::toy_model(Variant::MLM), std::nullopt, 0, ""});
  bytes[4] = 2;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bytes); }), ErrorCode::FormatVersionMismatch);
}

TEST(Checkpoint, VariantMismatchIsConfigError) {
  const auto dir = testutil::scratch_dir("ckpt_variant");
  save_checkpoint({testutil::toy_model(Variant::MLM), std::nullopt, 0, ""}, dir / "m.ckpt");
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "m.ckpt", Variant::CLM); }), ErrorCode::ConfigError);
  EXPECT_NO_THROW(load_checkpoint(dir / "m.ckpt", Variant::MLM));
}

TEST(Checkpoint, MissingFile) {
  EXPECT_EQ(code_of([] { load_checkpoint("/nonexistent/x.ckpt"); }), ErrorCode::IoError);
}
