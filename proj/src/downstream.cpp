#include "sani/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "sani/errors.hpp"
#include "sani/parallel.hpp"

namespace sani {

MarkerTask make_marker_task(std::vector<std::string> pool, std::size_t n_classes, std::uint64_t seed) {
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  if (pool.size() < n_classes + 1) {
    throw Error(ErrorCode::ConfigError, "marker pool has " + std::to_string(pool.size()) + " words for " +
                                            std::to_string(n_classes) + " classes");
  }
  Rng rng(derive_seed(seed, 0x3a7c));
  rng.shuffle(pool);
  MarkerTask task;
  task.markers.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_classes));
  task.background.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_classes), pool.end());
  std::sort(task.background.begin(), task.background.end());
  return task;
}

LabeledSet generate_labeled_set(const MarkerTask& task, const LabeledTaskConfig& cfg) {
  if (cfg.n_classes == 0 || task.markers.size() < cfg.n_classes || task.background.empty() ||
      cfg.min_words < 1 || cfg.max_words < cfg.min_words) {
    throw Error(ErrorCode::ConfigError, "invalid labeled task configuration");
  }
  Rng rng(derive_seed(cfg.seed, 0x1abe1));
  LabeledSet set;
  set.reserve(cfg.n_examples);
  for (std::size_t i = 0; i < cfg.n_examples; ++i) {
    LabeledExample ex;
    ex.label = i % cfg.n_classes;
    const std::size_t n = cfg.min_words + rng.uniform(cfg.max_words - cfg.min_words + 1);
    for (std::size_t w = 0; w + 1 < n; ++w) ex.words.push_back(task.background[rng.uniform(task.background.size())]);
    const std::size_t at = rng.uniform(n);
    ex.words.insert(ex.words.begin() + static_cast<std::ptrdiff_t>(at), task.markers[ex.label]);
    set.push_back(std::move(ex));
  }
  rng.shuffle(set);
  return set;
}

void tokenize(LabeledSet& set, const Vocab& vocab) {
  for (auto& ex : set) {
    ex.token_ids.clear();
    for (const auto& w : ex.words) {
      for (TokenId id : vocab.encode_word(w)) ex.token_ids.push_back(id);
    }
  }
}

LabeledSet read_labeled_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  LabeledSet set;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      LabeledExample ex;
      ex.words = j.at("words").get<std::vector<std::string>>();
      ex.label = j.at("label").get<std::size_t>();
      set.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ConfigError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return set;
}

void write_labeled_jsonl(const LabeledSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const auto& ex : set) {
    nlohmann::ordered_json j;
    j["words"] = ex.words;
    j["label"] = ex.label;
    out << j.dump() << "\n";
  }
}

double warmup_lr(std::size_t step, std::size_t total_steps, double warmup_fraction, double peak) {
  if (total_steps == 0) return 0.0;
  const std::size_t warm = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps))));
  if (step < warm) return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (step >= total_steps) return 0.0;
  return peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm);
}

namespace {

std::vector<TokenId> with_bos(std::span<const TokenId> ids, std::size_t max_seq) {
  std::vector<TokenId> input{Vocab::kBos};
  for (TokenId id : ids) {
    if (input.size() == max_seq) break;
    input.push_back(id);
  }
  return input;
}

/// Class logits [1, K] for one example.
Var classify(Tape& tape, const BoundParams& bound, Var weight, Var bias, std::span<const TokenId> ids) {
  const auto input = with_bos(ids, bound.params->config().max_seq);
  const std::size_t first = 0;
  const Var pooled = gather_rows(tape, encode(tape, bound, input, AttentionMode::Bidirectional), {&first, 1});
  return linear(tape, pooled, weight, bias);
}

}  // namespace

std::size_t Classifier::predict(std::span<const TokenId> ids) const {
  Tape tape(false);
  const BoundParams bound = bind(tape, encoder);
  const Var w = tape.param(weight, encoder.size());
  const Var b = tape.param(bias, encoder.size() + 1);
  const Tensor& logits = tape.value(classify(tape, bound, w, b, ids));
  return argmax(logits.row(0));
}

std::vector<std::size_t> predict(const Classifier& model, const LabeledSet& set) {
  std::vector<std::size_t> out(set.size());
  parallel_for(set.size(), [&](std::size_t i) { out[i] = model.predict(set[i].token_ids); });
  return out;
}

double macro_f1(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted, std::size_t n_classes) {
  if (truth.size() != predicted.size()) throw Error(ErrorCode::ShapeMismatch, "truth and predictions differ in length");
  if (truth.empty()) throw Error(ErrorCode::EmptyLabeledSet, "empty test set");
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0), support(n_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= n_classes) throw Error(ErrorCode::ConfigError, "label out of range");
    support[truth[i]] += 1;
    if (predicted[i] == truth[i]) {
      tp[truth[i]] += 1;
    } else {
      fn[truth[i]] += 1;
      if (predicted[i] < n_classes) fp[predicted[i]] += 1;
    }
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (support[k] == 0) throw Error(ErrorCode::MissingClass, "class " + std::to_string(k) + " has no test example");
    const double denom = 2 * tp[k] + fp[k] + fn[k];
    sum += denom > 0 ? 2 * tp[k] / denom : 0.0;
  }
  return sum / static_cast<double>(n_classes);
}

double macro_f1(const Classifier& model, const LabeledSet& test, std::size_t n_classes) {
  std::vector<std::size_t> truth;
  for (const auto& ex : test) truth.push_back(ex.label);
  return macro_f1(truth, predict(model, test), n_classes);
}

ClassifierResult train_classifier(const ModelParams& encoder, const LabeledSet& train, const LabeledSet& test,
                                  const ClassifierConfig& cfg) {
  if (train.empty()) throw Error(ErrorCode::EmptyLabeledSet, "no training examples");
  if (encoder.config().variant != Variant::MLM) {
    throw Error(ErrorCode::SchemeVariantMismatch, "classification needs an MLM encoder");
  }
  if (cfg.batch_size == 0 || cfg.n_classes == 0) throw Error(ErrorCode::ConfigError, "invalid classifier config");

  ClassifierResult result;
  Classifier& model = result.model;
  model.encoder = encoder;
  const std::size_t d = encoder.config().d_model;
  model.weight = Tensor({cfg.n_classes, d});
  model.bias = Tensor({cfg.n_classes});
  Rng rng(derive_seed(cfg.seed, 0xc1a5));
  for (double& x : model.weight.data) x = rng.normal(0.0, 0.02);

  const std::size_t n_enc = model.encoder.size();
  std::vector<Tensor> shapes(model.encoder.tensors().begin(), model.encoder.tensors().end());
  shapes.push_back(model.weight);
  shapes.push_back(model.bias);
  std::vector<Tensor> head_shapes{model.weight, model.bias};

  AdamState adam_enc(model.encoder.tensors());
  AdamState adam_head(head_shapes);
  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5f1e, epoch));
    shuffle_rng.shuffle(order);
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const std::size_t b = s * cfg.batch_size;
      const std::size_t e = std::min(train.size(), b + cfg.batch_size);
      const double weight = 1.0 / static_cast<double>(e - b);
      std::vector<GradientSet> per_example(e - b);
      parallel_for(e - b, [&](std::size_t i) {
        const LabeledExample& ex = train[order[b + i]];
        per_example[i] = GradientSet(shapes);
        Tape tape(true);
        const BoundParams bound = bind(tape, model.encoder);
        const Var w = tape.param(model.weight, n_enc);
        const Var bias = tape.param(model.bias, n_enc + 1);
        const TokenId label = static_cast<TokenId>(ex.label);
        const Var loss = cross_entropy(tape, classify(tape, bound, w, bias, ex.token_ids), {&label, 1}, -1);
        tape.backward(loss, per_example[i], weight);
      });
      GradientSet all(shapes);
      for (const auto& g : per_example) all.add(g);
      GradientSet g_enc(model.encoder.tensors());
      GradientSet g_head(head_shapes);
      for (std::size_t i = 0; i < n_enc; ++i) std::swap(g_enc[i], all[i]);
      std::swap(g_head[0], all[n_enc]);
      std::swap(g_head[1], all[n_enc + 1]);

      const double lr = warmup_lr(step, total, cfg.warmup_fraction, cfg.peak_lr);
      adam_step(model.encoder.tensors(), g_enc, adam_enc, lr);
      std::vector<Tensor> head{std::move(model.weight), std::move(model.bias)};
      adam_step(head, g_head, adam_head, lr);
      model.weight = std::move(head[0]);
      model.bias = std::move(head[1]);
    }
    if (!test.empty()) result.f1_history.push_back(macro_f1(model, test, cfg.n_classes));
  }
  return result;
}

}  // namespace sani
