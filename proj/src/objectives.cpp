#include "sani/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "sani/errors.hpp"
#include "sani/parallel.hpp"

namespace sani {

std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::MLM: return "MLM";
    case Scheme::PPMLM: return "PPMLM";
    case Scheme::CLM: return "CLM";
    case Scheme::PPCLM: return "PPCLM";
  }
  return "?";
}

Scheme scheme_from_string(std::string_view s) {
  if (s == "MLM") return Scheme::MLM;
  if (s == "PPMLM") return Scheme::PPMLM;
  if (s == "CLM") return Scheme::CLM;
  if (s == "PPCLM") return Scheme::PPCLM;
  throw Error(ErrorCode::ConfigError, "unknown scheme '" + std::string(s) + "'");
}

Variant variant_of(Scheme s) { return (s == Scheme::MLM || s == Scheme::PPMLM) ? Variant::MLM : Variant::CLM; }

bool privacy_preserving(Scheme s) { return s == Scheme::PPMLM || s == Scheme::PPCLM; }

std::size_t mask_count(std::size_t maskable, double rate) {
  if (maskable == 0) return 0;
  const auto n = static_cast<std::size_t>(std::llround(rate * static_cast<double>(maskable)));
  return std::clamp<std::size_t>(n, 1, maskable);
}

namespace {

MaskingPlan plan_from_candidates(const AnnotatedDocument& doc, const std::vector<std::size_t>& candidates,
                                 double rate, Rng& rng) {
  MaskingPlan plan;
  plan.doc_id = doc.id;
  for (std::size_t i : rng.sample(candidates.size(), mask_count(candidates.size(), rate))) {
    plan.words.push_back(candidates[i]);
  }
  std::sort(plan.words.begin(), plan.words.end());
  for (std::size_t w : plan.words) {
    for (std::size_t p = doc.word_offsets[w]; p < doc.word_offsets[w + 1]; ++p) {
      plan.token_positions.push_back(p);
      plan.targets.push_back(doc.token_ids[p]);
    }
  }
  return plan;
}

void require_tokenized(const AnnotatedDocument& doc) {
  if (doc.words.empty()) throw Error(ErrorCode::EmptyDocument, "document '" + doc.id + "' has no words");
  if (!doc.tokenized()) throw Error(ErrorCode::ConfigError, "document '" + doc.id + "' is not tokenized");
}

}  // namespace

MaskingPlan select_masks_standard(const AnnotatedDocument& doc, double rate, Rng& rng) {
  require_tokenized(doc);
  std::vector<std::size_t> all(doc.num_words());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return plan_from_candidates(doc, all, rate, rng);
}

MaskingPlan select_masks_privacy(const AnnotatedDocument& doc, const Blacklist& blacklist, double rate, Rng& rng) {
  require_tokenized(doc);
  const std::vector<bool> banned = blacklisted_words(doc, blacklist);
  std::vector<std::size_t> allowed;
  for (std::size_t i = 0; i < banned.size(); ++i) {
    if (!banned[i]) allowed.push_back(i);
  }
  if (allowed.empty()) throw Error(ErrorCode::NoMaskableTokens, "every word of '" + doc.id + "' is blacklisted");
  return plan_from_candidates(doc, allowed, rate, rng);
}

std::vector<TokenId> clm_targets(const AnnotatedDocument& doc) {
  if (doc.token_ids.size() < 2) return {};
  return {doc.token_ids.begin() + 1, doc.token_ids.end()};
}

std::vector<TokenId> clm_targets_privacy(const AnnotatedDocument& doc, const Blacklist& blacklist) {
  std::vector<TokenId> targets = clm_targets(doc);
  for (const auto& occ : find_occurrences(doc, blacklist)) {
    const std::size_t b = doc.word_offsets[occ.word_start];
    const std::size_t e = doc.word_offsets[occ.word_start + occ.word_len];
    for (std::size_t p = std::max<std::size_t>(b, 1); p < e; ++p) targets[p - 1] = Vocab::kPad;
  }
  return targets;
}

std::vector<std::pair<std::size_t, std::size_t>> chunk_words(const AnnotatedDocument& doc, std::size_t max_tokens) {
  // Atomic units: single words, except annotated spans.
  std::vector<std::size_t> unit_end(doc.num_words());
  for (std::size_t w = 0; w < doc.num_words(); ++w) unit_end[w] = w + 1;
  for (const auto& a : doc.annotations) unit_end[a.start] = a.start + a.len;

  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  std::size_t begin = 0;
  std::size_t w = 0;
  while (w < doc.num_words()) {
    const std::size_t e = unit_end[w];
    const std::size_t unit_tokens = doc.word_offsets[e] - doc.word_offsets[w];
    if (unit_tokens > max_tokens) {
      throw Error(ErrorCode::SequenceTooLong, "a unit of '" + doc.id + "' has " + std::to_string(unit_tokens) +
                                                  " tokens, more than " + std::to_string(max_tokens));
    }
    if (doc.word_offsets[e] - doc.word_offsets[begin] > max_tokens) {
      chunks.emplace_back(doc.word_offsets[begin], doc.word_offsets[w]);
      begin = w;
    }
    w = e;
  }
  if (doc.word_offsets[w] > doc.word_offsets[begin]) chunks.emplace_back(doc.word_offsets[begin], doc.word_offsets[w]);
  return chunks;
}

std::vector<std::size_t> causal_window_starts(std::size_t n_tokens, std::size_t len) {
  std::vector<std::size_t> starts;
  if (n_tokens < 2) return starts;
  for (std::size_t s = 0; s + 1 < n_tokens; s += len - 1) starts.push_back(s);
  return starts;
}

double TrainSchedule::lr(std::size_t step, std::size_t total_steps) const {
  if (total_steps == 0) return 0.0;
  const double f = static_cast<double>(step) / static_cast<double>(total_steps);
  return std::max(0.0, lr_start * (1.0 - f));
}

namespace {

std::size_t effective_len(const TrainSchedule& schedule, std::size_t max_seq) {
  return std::min(schedule.seq_len, max_seq);
}

void check_scheme(Scheme scheme, Variant variant) {
  if (variant_of(scheme) != variant) {
    throw Error(ErrorCode::SchemeVariantMismatch, std::string(to_string(scheme)) + " cannot train a " +
                                                      std::string(to_string(variant)) + " model");
  }
}

void mlm_windows(const AnnotatedDocument& doc, const MaskingPlan* plan, std::size_t len,
                 std::vector<TrainWindow>& out) {
  std::vector<bool> masked(doc.num_tokens(), false);
  if (plan) {
    for (std::size_t p : plan->token_positions) masked[p] = true;
  }
  for (auto [b, e] : chunk_words(doc, len)) {
    TrainWindow w;
    w.input.assign(doc.token_ids.begin() + static_cast<std::ptrdiff_t>(b),
                   doc.token_ids.begin() + static_cast<std::ptrdiff_t>(e));
    for (std::size_t p = b; p < e; ++p) {
      if (!masked[p]) continue;
      w.input[p - b] = Vocab::kMask;
      w.rows.push_back(p - b);
      w.targets.push_back(doc.token_ids[p]);
    }
    out.push_back(std::move(w));
  }
}

void clm_windows(const AnnotatedDocument& doc, const std::vector<TokenId>& targets, std::size_t len,
                 std::vector<TrainWindow>& out) {
  const std::size_t n = doc.num_tokens();
  for (std::size_t s : causal_window_starts(n, len)) {
    const std::size_t e = std::min(n, s + len);
    TrainWindow w;
    w.input.assign(doc.token_ids.begin() + static_cast<std::ptrdiff_t>(s),
                   doc.token_ids.begin() + static_cast<std::ptrdiff_t>(e));
    for (std::size_t p = s; p + 1 < e; ++p) {
      w.rows.push_back(p - s);
      w.targets.push_back(targets[p]);
    }
    out.push_back(std::move(w));
  }
}

std::size_t counted_targets(const TrainWindow& w) {
  return static_cast<std::size_t>(std::count_if(w.targets.begin(), w.targets.end(),
                                                [](TokenId t) { return t != Vocab::kPad; }));
}

}  // namespace

std::vector<TrainWindow> build_windows(const Corpus& docs, const Blacklist& blacklist, Scheme scheme,
                                       const TrainSchedule& schedule, std::size_t max_seq, std::uint64_t seed,
                                       std::size_t epoch) {
  const std::size_t len = effective_len(schedule, max_seq);
  std::vector<TrainWindow> out;
  for (const auto& doc : docs) {
    if (doc.token_ids.empty()) continue;
    switch (scheme) {
      case Scheme::MLM:
      case Scheme::PPMLM: {
        Rng rng(derive_seed(seed, epoch, hash_string(doc.id)));
        std::optional<MaskingPlan> plan;
        if (scheme == Scheme::MLM) {
          plan = select_masks_standard(doc, schedule.mask_rate, rng);
        } else {
          try {
            plan = select_masks_privacy(doc, blacklist, schedule.mask_rate, rng);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::NoMaskableTokens) throw;
          }
        }
        mlm_windows(doc, plan ? &*plan : nullptr, len, out);
        break;
      }
      case Scheme::CLM:
        clm_windows(doc, clm_targets(doc), len, out);
        break;
      case Scheme::PPCLM:
        clm_windows(doc, clm_targets_privacy(doc, blacklist), len, out);
        break;
    }
  }
  return out;
}

double window_loss_and_grad(const ModelParams& params, const TrainWindow& w, AttentionMode mode, GradientSet& grads,
                            double weight) {
  Tape tape(true);
  const BoundParams bound = bind(tape, params);
  const Var hidden = encode(tape, bound, w.input, mode);
  const Var rows = gather_rows(tape, hidden, w.rows);
  const Var loss = cross_entropy(tape, lm_head(tape, bound, rows), w.targets, Vocab::kPad);
  tape.backward(loss, grads, weight);
  return tape.value(loss).data[0];
}

std::size_t steps_per_epoch(const Corpus& docs, Scheme scheme, const TrainSchedule& schedule, std::size_t max_seq) {
  const std::size_t len = effective_len(schedule, max_seq);
  std::size_t windows = 0;
  for (const auto& doc : docs) {
    if (doc.token_ids.empty()) continue;
    windows += variant_of(scheme) == Variant::MLM ? chunk_words(doc, len).size()
                                                  : causal_window_starts(doc.num_tokens(), len).size();
  }
  return (windows + schedule.batch_size - 1) / schedule.batch_size;
}

namespace {

struct BatchOutcome {
  GradientSet grads;
  double loss_sum = 0.0;  // sum of per-target losses
  std::size_t targets = 0;
};

BatchOutcome run_batch(const ModelParams& params, std::span<const TrainWindow> batch, AttentionMode mode,
                       bool want_grads) {
  std::size_t total = 0;
  for (const auto& w : batch) total += counted_targets(w);
  BatchOutcome out;
  out.targets = total;
  if (want_grads) out.grads = GradientSet(params.tensors());
  if (total == 0) return out;

  std::vector<GradientSet> per_window(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  parallel_for(batch.size(), [&](std::size_t i) {
    const std::size_t n = counted_targets(batch[i]);
    if (n == 0) return;
    const double weight = static_cast<double>(n) / static_cast<double>(total);
    if (want_grads) {
      per_window[i] = GradientSet(params.tensors());
      losses[i] = window_loss_and_grad(params, batch[i], mode, per_window[i], weight);
    } else {
      Tape tape(false);
      const BoundParams bound = bind(tape, params);
      const Var rows = gather_rows(tape, encode(tape, bound, batch[i].input, mode), batch[i].rows);
      losses[i] = tape.value(cross_entropy(tape, lm_head(tape, bound, rows), batch[i].targets, Vocab::kPad)).data[0];
    }
  });
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t n = counted_targets(batch[i]);
    if (n == 0) continue;
    if (want_grads) out.grads.add(per_window[i]);
    out.loss_sum += losses[i] * static_cast<double>(n);
  }
  return out;
}

}  // namespace

EpochResult train_epoch(ModelParams& params, AdamState& adam, const Corpus& docs, const Blacklist& blacklist,
                        Scheme scheme, const TrainSchedule& schedule, std::size_t epoch, std::uint64_t seed) {
  check_scheme(scheme, params.config().variant);
  if (schedule.batch_size == 0) throw Error(ErrorCode::ConfigError, "batch_size must be positive");
  if (!adam.matches(params.tensors())) adam = AdamState(params.tensors());

  const auto windows = build_windows(docs, blacklist, scheme, schedule, params.config().max_seq, seed, epoch);
  const std::size_t per_epoch = (windows.size() + schedule.batch_size - 1) / schedule.batch_size;
  const std::size_t total_steps = per_epoch * schedule.total_epochs;
  const AttentionMode mode = attention_mode(params.config().variant);

  EpochResult result;
  double loss_sum = 0.0;
  for (std::size_t s = 0; s < per_epoch; ++s) {
    const std::size_t b = s * schedule.batch_size;
    const std::size_t e = std::min(windows.size(), b + schedule.batch_size);
    BatchOutcome batch = run_batch(params, std::span(windows).subspan(b, e - b), mode, true);
    if (batch.targets > 0) {
      const double lr = schedule.lr(epoch * per_epoch + s, total_steps);
      adam_step(params.tensors(), batch.grads, adam, lr);
    }
    loss_sum += batch.loss_sum;
    result.targets += batch.targets;
    ++result.steps;
  }
  result.loss = result.targets > 0 ? loss_sum / static_cast<double>(result.targets) : 0.0;
  return result;
}

double evaluate_loss(const ModelParams& params, const Corpus& docs, const Blacklist& blacklist, Scheme scheme,
                     const TrainSchedule& schedule, std::uint64_t seed, std::size_t epoch) {
  check_scheme(scheme, params.config().variant);
  const auto windows = build_windows(docs, blacklist, scheme, schedule, params.config().max_seq, seed, epoch);
  const AttentionMode mode = attention_mode(params.config().variant);
  double loss_sum = 0.0;
  std::size_t targets = 0;
  for (std::size_t b = 0; b < windows.size(); b += schedule.batch_size) {
    const std::size_t e = std::min(windows.size(), b + schedule.batch_size);
    BatchOutcome batch = run_batch(params, std::span(windows).subspan(b, e - b), mode, false);
    loss_sum += batch.loss_sum;
    targets += batch.targets;
  }
  return targets > 0 ? loss_sum / static_cast<double>(targets) : 0.0;
}

}  // namespace sani
