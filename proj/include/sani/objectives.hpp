#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sani/adam.hpp"
#include "sani/corpus.hpp"
#include "sani/model.hpp"

namespace sani {

enum class Scheme { MLM, PPMLM, CLM, PPCLM };

std::string_view to_string(Scheme s);
Scheme scheme_from_string(std::string_view s);
Variant variant_of(Scheme s);
bool privacy_preserving(Scheme s);

/// Words chosen for masking in one document. token_positions lists every
/// token of every chosen word (whole-word masking), ascending; targets are
/// the original ids at those positions.
struct MaskingPlan {
  std::string doc_id;
  std::vector<std::size_t> words;
  std::vector<std::size_t> token_positions;
  std::vector<TokenId> targets;
};

/// round(rate * maskable), at least 1 when maskable > 0.
std::size_t mask_count(std::size_t maskable, double rate);

/// Throws EmptyDocument.
MaskingPlan select_masks_standard(const AnnotatedDocument& doc, double rate, Rng& rng);

/// Samples only words outside every blacklist occurrence. Throws
/// EmptyDocument, or NoMaskableTokens when every word is blacklisted.
MaskingPlan select_masks_privacy(const AnnotatedDocument& doc, const Blacklist& blacklist, double rate, Rng& rng);

/// target[t] = token[t+1], length num_tokens - 1.
std::vector<TokenId> clm_targets(const AnnotatedDocument& doc);

/// As clm_targets, but targets whose token lies inside a blacklist
/// occurrence become PAD.
std::vector<TokenId> clm_targets_privacy(const AnnotatedDocument& doc, const Blacklist& blacklist);

/// Word-aligned [begin, end) token ranges of at most max_tokens each. An
/// annotated span is never split across two chunks. Throws SequenceTooLong
/// when a single word or span does not fit.
std::vector<std::pair<std::size_t, std::size_t>> chunk_words(const AnnotatedDocument& doc, std::size_t max_tokens);

/// Start offsets of causal windows of length len with stride len - 1, so
/// each next-token target is covered exactly once.
std::vector<std::size_t> causal_window_starts(std::size_t n_tokens, std::size_t len);

struct TrainSchedule {
  std::size_t total_epochs = 1;
  double lr_start = 1e-4;
  std::size_t batch_size = 8;   // sequences per optimizer step
  std::size_t seq_len = 512;    // capped by the model's max_seq
  double mask_rate = 0.15;

  /// lr_start * (1 - step / total_steps), never negative.
  double lr(std::size_t step, std::size_t total_steps) const;
};

/// One training sequence: inputs plus per-row targets (PAD = ignored).
struct TrainWindow {
  std::vector<TokenId> input;
  std::vector<std::size_t> rows;    // positions that carry a target
  std::vector<TokenId> targets;
};

/// The epoch's windows in document order. Masking draws come from a
/// stream seeded by (seed, epoch, document id).
std::vector<TrainWindow> build_windows(const Corpus& docs, const Blacklist& blacklist, Scheme scheme,
                                       const TrainSchedule& schedule, std::size_t max_seq, std::uint64_t seed,
                                       std::size_t epoch);

/// Mean target loss of one window, plus its gradients scaled by weight.
double window_loss_and_grad(const ModelParams& params, const TrainWindow& w, AttentionMode mode, GradientSet& grads,
                            double weight);

struct EpochResult {
  double loss = 0.0;     // mean over all targets of the epoch
  std::size_t steps = 0;
  std::size_t targets = 0;
};

/// Number of optimizer steps one epoch takes (depends only on document
/// lengths, not on the masking draw).
std::size_t steps_per_epoch(const Corpus& docs, Scheme scheme, const TrainSchedule& schedule, std::size_t max_seq);

/// One pass over docs. epoch indexes into the schedule (0-based) and sets
/// the LR range; global steps are epoch * steps_per_epoch + i. Throws
/// SchemeVariantMismatch.
EpochResult train_epoch(ModelParams& params, AdamState& adam, const Corpus& docs, const Blacklist& blacklist,
                        Scheme scheme, const TrainSchedule& schedule, std::size_t epoch, std::uint64_t seed);

/// Mean loss over a corpus without updating anything (same windows and
/// masking as the given epoch).
double evaluate_loss(const ModelParams& params, const Corpus& docs, const Blacklist& blacklist, Scheme scheme,
                     const TrainSchedule& schedule, std::uint64_t seed, std::size_t epoch);

}  // namespace sani
