#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sani/adam.hpp"
#include "sani/corpus.hpp"
#include "sani/model.hpp"

namespace sani {

struct LabeledExample {
  std::vector<std::string> words;
  std::size_t label = 0;
  std::vector<TokenId> token_ids;  // filled by tokenize()
};

using LabeledSet = std::vector<LabeledExample>;

struct LabeledTaskConfig {
  std::size_t n_classes = 4;
  std::size_t n_examples = 400;
  std::size_t min_words = 12;
  std::size_t max_words = 40;
  std::uint64_t seed = 1;
};

/// K marker words drawn from pool; the rest of pool is the background.
struct MarkerTask {
  std::vector<std::string> markers;     // markers[k] signals class k
  std::vector<std::string> background;
};

MarkerTask make_marker_task(std::vector<std::string> pool, std::size_t n_classes, std::uint64_t seed);

/// Balanced examples: background words with exactly one marker, placed at a
/// random position; the label is the marker's class.
LabeledSet generate_labeled_set(const MarkerTask& task, const LabeledTaskConfig& cfg);

void tokenize(LabeledSet& set, const Vocab& vocab);

LabeledSet read_labeled_jsonl(const std::filesystem::path& path);
void write_labeled_jsonl(const LabeledSet& set, const std::filesystem::path& path);

struct ClassifierConfig {
  std::size_t n_classes = 4;
  std::size_t epochs = 4;
  double warmup_fraction = 0.10;
  double peak_lr = 2e-5;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
};

/// Linear warmup from 0 to peak over the first floor(warmup_fraction * T)
/// steps (at least one), then linear decay to 0 at step T.
double warmup_lr(std::size_t step, std::size_t total_steps, double warmup_fraction, double peak);

/// Encoder plus a linear head over the first position (a BOS token is
/// prepended to every input).
struct Classifier {
  ModelParams encoder;
  Tensor weight;  // [K, d_model]
  Tensor bias;    // [K]

  std::size_t predict(std::span<const TokenId> ids) const;
};

struct ClassifierResult {
  Classifier model;
  std::vector<double> f1_history;  // macro F1 on the test set after each epoch
};

/// Jointly fine-tunes encoder and head. Throws EmptyLabeledSet, or
/// SchemeVariantMismatch for a CLM encoder.
ClassifierResult train_classifier(const ModelParams& encoder, const LabeledSet& train, const LabeledSet& test,
                                  const ClassifierConfig& cfg);

std::vector<std::size_t> predict(const Classifier& model, const LabeledSet& set);

/// Unweighted mean of per-class F1. Throws MissingClass when a class has no
/// example in truth.
double macro_f1(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted, std::size_t n_classes);
double macro_f1(const Classifier& model, const LabeledSet& test, std::size_t n_classes);

}  // namespace sani
