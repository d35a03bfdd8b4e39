#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sani/errors.hpp"
#include "sani/metrics.hpp"
#include "sani/unlearn.hpp"
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

ModelParams model_with_vocab(std::size_t vocab, Variant v = Variant::MLM, std::uint64_t seed = 1) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 8;
  c.seed = seed;
  ModelParams p = ModelParams::init(c);
  // Nonzero biases and gains so erasure is visible everywhere.
  Rng rng(seed + 100);
  for (auto& t : p.tensors()) {
    for (double& x : t.data) x += rng.normal(0.0, 0.1);
  }
  return p;
}

bool row_is_zero(const Tensor& t, std::size_t r) {
  for (double v : t.row(r)) {
    if (v != 0.0) return false;
  }
  return true;
}

double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (double v : t.row(r)) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(EraseLastLayer, CountsAndLocality) {
  const ModelParams before = model_with_vocab(8);
  ModelParams p = before;
  const ErasureReport r = erase_last_layer(p, 0.5, 3);
  EXPECT_EQ(r.kind, ErasureKind::SANI);
  ASSERT_EQ(r.layers.size(), 1u);
  EXPECT_EQ(r.layers[0].zeroed, 4u);
  EXPECT_EQ(r.total_zeroed(), 4u);
  const Tensor& w = p.tensors()[p.head_weight()];
  const Tensor& b = p.tensors()[p.head_bias()];
  std::size_t zero_rows = 0;
  for (std::size_t v = 0; v < 8; ++v) {
    const bool chosen = std::binary_search(r.layers[0].zeroed_units.begin(), r.layers[0].zeroed_units.end(), v);
    if (chosen) {
      EXPECT_TRUE(row_is_zero(w, v));
      EXPECT_EQ(b.data[v], 0.0);
      ++zero_rows;
    } else {
      EXPECT_EQ(w.row(v)[0], before.tensors()[before.head_weight()].row(v)[0]);
      EXPECT_EQ(b.data[v], before.tensors()[before.head_bias()].data[v]);
    }
  }
  EXPECT_EQ(zero_rows, 4u);
  for (std::size_t i = 0; i + 2 < p.size(); ++i) EXPECT_EQ(p.tensors()[i], before.tensors()[i]) << p.names()[i];

  // ceil rule on an odd vocabulary
  ModelParams q = model_with_vocab(11);
  EXPECT_EQ(erase_last_layer(q, 0.5, 3).total_zeroed(), 6u);
}

TEST(EraseLastLayer, SeedChoosesRows) {
  ModelParams a = model_with_vocab(40), b = model_with_vocab(40), c = model_with_vocab(40);
  const auto ra = erase_last_layer(a, 0.5, 1);
  const auto rb = erase_last_layer(b, 0.5, 1);
  const auto rc = erase_last_layer(c, 0.5, 2);
  EXPECT_EQ(ra.layers[0].zeroed_units, rb.layers[0].zeroed_units);
  EXPECT_NE(ra.layers[0].zeroed_units, rc.layers[0].zeroed_units);
  EXPECT_EQ(a, b);
}

TEST(EraseLastLayer, FractionBounds) {
  const ModelParams before = model_with_vocab(12);
  ModelParams p = before;
  EXPECT_EQ(erase_last_layer(p, 0.0, 1).total_zeroed(), 0u);
  EXPECT_EQ(p, before);

  erase_last_layer(p, 1.0, 1);
  const std::vector<TokenId> ids{4, 5, 6};
  const Tensor logits = forward(p, ids, AttentionMode::Bidirectional);
  for (double v : logits.data) EXPECT_EQ(v, 0.0);

  EXPECT_EQ(code_of([&] { erase_last_layer(p, -0.1, 1); }), ErrorCode::FractionOutOfRange);
  EXPECT_EQ(code_of([&] { erase_last_layer(p, 1.5, 1); }), ErrorCode::FractionOutOfRange);
}

TEST(Pruning, ZeroCountRule) {
  EXPECT_EQ(pruning_zero_count(100, 0.01, 0.20), 19u);
  EXPECT_EQ(pruning_zero_count(1, 0.01, 0.20), 0u);
  EXPECT_EQ(pruning_zero_count(64, 0.01, 0.20), 12u);
}

TEST(Pruning, MatchesIndependentOracle) {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const double protect = rng.uniform01() * 0.5;
    const double reset = rng.uniform01();
    const ModelParams before = model_with_vocab(6 + rng.uniform(20), trial % 2 ? Variant::MLM : Variant::CLM, trial);
    ModelParams p = before;
    const ErasureReport r = erase_pruning(p, protect, reset, trial);
    EXPECT_EQ(r.kind, ErasureKind::PRUNING);
    const std::set<std::string> affected(r.affected.begin(), r.affected.end());

    std::size_t matrices = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::string& name = p.names()[i];
      const Tensor& t0 = before.tensors()[i];
      if (t0.rank() != 2 || name.ends_with("_emb")) {
        if (!affected.count(name)) ASSERT_EQ(p.tensors()[i], t0) << name;
        continue;
      }
      ++matrices;
      const std::size_t rows = t0.rows();
      const std::size_t keep = static_cast<std::size_t>(std::ceil(protect * static_cast<double>(rows) - 1e-12));
      const std::size_t zero = static_cast<std::size_t>(std::floor(reset * static_cast<double>(rows - keep) + 1e-12));
      std::vector<std::size_t> order(rows);
      for (std::size_t k = 0; k < rows; ++k) order[k] = k;
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return row_norm(t0, a) > row_norm(t0, b); });
      const std::set<std::size_t> protected_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
      std::size_t zeroed = 0;
      for (std::size_t k = 0; k < rows; ++k) {
        if (row_is_zero(p.tensors()[i], k)) {
          ++zeroed;
          ASSERT_FALSE(protected_rows.count(k)) << name << " row " << k;
        } else {
          ASSERT_TRUE(std::equal(t0.row(k).begin(), t0.row(k).end(), p.tensors()[i].row(k).begin())) << name;
        }
      }
      ASSERT_EQ(zeroed, zero) << name;
      ASSERT_EQ(zero, pruning_zero_count(rows, protect, reset));
      ASSERT_EQ(affected.count(name), zero > 0 ? 1u : 0u) << name;
    }
    EXPECT_EQ(matrices, r.layers.size());
    for (const auto& name : r.affected) EXPECT_NE(name, "tok_emb");
  }
}

TEST(Pruning, LargestRowSurvives) {
  ModelParams p = model_with_vocab(100);
  Tensor& head = p.tensors()[p.head_weight()];
  for (double& x : head.row(37)) x *= 50.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelParams q = p;
    const ErasureReport r = erase_pruning(q, 0.01, 1.0, seed);
    const auto it = std::find_if(r.layers.begin(), r.layers.end(),
                                 [](const LayerErasure& l) { return l.parameter == "head.weight"; });
    ASSERT_NE(it, r.layers.end());
    EXPECT_EQ(it->units, 100u);
    EXPECT_EQ(it->protected_units, 1u);
    EXPECT_EQ(it->zeroed, 99u);
    EXPECT_FALSE(row_is_zero(q.tensors()[q.head_weight()], 37));
  }
}

TEST(Budget, RepairEpochs) {
  EXPECT_EQ((UnlearnBudget{64}.repair_epochs()), 13u);
  EXPECT_EQ((UnlearnBudget{16}.repair_epochs()), 4u);
  EXPECT_EQ((UnlearnBudget{5}.repair_epochs()), 1u);
  EXPECT_EQ((UnlearnBudget{1}.repair_epochs()), 1u);
}

namespace {

struct SanitizeFixture {
  testutil::SmallCorpus c = testutil::small_corpus(10, 50);
  Blacklist blacklist;
  ModelParams params;

  SanitizeFixture() {
    blacklist = Blacklist::from_terms(c.gen.direct, c.vocab, c.docs);
    ModelConfig mc;
    mc.vocab_size = c.vocab.size();
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_ff = 32;
    mc.max_seq = 16;
    params = ModelParams::init(mc);
  }

  RepairOptions options() const {
    RepairOptions o;
    o.schedule.lr_start = 1e-3;
    o.schedule.seq_len = 16;
    o.seed = 4;
    o.first_epoch = 9;
    return o;
  }
};

MetricsRecord fingerprint(const ModelParams& p, std::size_t epoch, Phase phase) {
  MetricsRecord r;
  r.epoch = epoch;
  r.phase = phase;
  double s = 0.0;
  for (const auto& t : p.tensors()) {
    for (double v : t.data) s += v * v;
  }
  r.utility = s;
  return r;
}

}  // namespace

TEST(Sanitize, EmitsBudgetPlusOneRows) {
  SanitizeFixture f;
  for (Strategy s : {Strategy::SANI, Strategy::PRUNING, Strategy::REPAIR_ONLY}) {
    ModelParams p = f.params;
    std::size_t hooks = 0;
    RepairOptions o = f.options();
    o.on_epoch = [&](const ModelParams&, const AdamState&, std::size_t k) { EXPECT_EQ(k, ++hooks); };
    const SanitizeResult r = sanitize(p, f.c.docs, f.blacklist, s, UnlearnBudget{16}, o, fingerprint);
    ASSERT_EQ(r.records.size(), 5u) << to_string(s);
    EXPECT_EQ(hooks, 4u);
    EXPECT_EQ(r.records[0].phase, Phase::Erase);
    EXPECT_EQ(r.records[0].epoch, 9u);
    for (std::size_t k = 1; k < 5; ++k) {
      EXPECT_EQ(r.records[k].phase, Phase::Repair);
      EXPECT_EQ(r.records[k].epoch, 9u + k);
    }
  }
}

TEST(Sanitize, RepairOnlyFirstRowIsTheFineTunedState) {
  SanitizeFixture f;
  ModelParams p = f.params;
  const MetricsRecord start = fingerprint(f.params, 9, Phase::Erase);
  const SanitizeResult r = sanitize(p, f.c.docs, f.blacklist, Strategy::REPAIR_ONLY, UnlearnBudget{4}, f.options(), fingerprint);
  EXPECT_EQ(r.erasure.kind, ErasureKind::NONE);
  EXPECT_EQ(r.erasure.total_zeroed(), 0u);
  EXPECT_EQ(r.records[0].utility, start.utility);
}

TEST(Sanitize, EmptyBlacklistRepairIsPlainTraining) {
  SanitizeFixture f;
  ModelParams a = f.params;
  const RepairOptions o = f.options();
  repair(a, f.c.docs, Blacklist{}, UnlearnBudget{8}, o, nullptr);

  ModelParams b = f.params;
  TrainSchedule s = o.schedule;
  s.total_epochs = 2;
  AdamState adam(b.tensors());
  // Repair draws its masking stream from a fixed derivation of the seed.
  for (std::size_t k = 0; k < 2; ++k) train_epoch(b, adam, f.c.docs, Blacklist{}, Scheme::MLM, s, k, derive_seed(o.seed, 0x4e9a14));
  EXPECT_EQ(a, b);
}

TEST(Sanitize, RepairRejectsStandardScheme) {
  SanitizeFixture f;
  RepairOptions o = f.options();
  o.scheme = Scheme::MLM;
  EXPECT_EQ(code_of([&] { repair(f.params, f.c.docs, f.blacklist, UnlearnBudget{4}, o, nullptr); }),
            ErrorCode::ConfigError);
  o.scheme = Scheme::PPCLM;
  EXPECT_EQ(code_of([&] { repair(f.params, f.c.docs, f.blacklist, UnlearnBudget{4}, o, nullptr); }),
            ErrorCode::SchemeVariantMismatch);
}

TEST(Sanitize, ErasureReportJson) {
  ModelParams p = model_with_vocab(8);
  const auto j = erase_last_layer(p, 0.5, 3).to_json();
  EXPECT_EQ(j.at("strategy"), "sani");
  EXPECT_EQ(j.at("total_zeroed"), 4u);
  EXPECT_EQ(j.at("layers").size(), 1u);
}
