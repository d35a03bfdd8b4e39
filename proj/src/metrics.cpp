#include "sani/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "sani/errors.hpp"
#include "sani/objectives.hpp"
#include "sani/parallel.hpp"

namespace sani {

std::size_t eval_pass_count(double rate) { return static_cast<std::size_t>(std::ceil(1.0 / rate - 1e-9)); }

std::vector<std::size_t> eval_pass_assignment(const AnnotatedDocument& doc, std::size_t passes) {
  std::vector<std::size_t> unit_end(doc.num_words());
  for (std::size_t w = 0; w < doc.num_words(); ++w) unit_end[w] = w + 1;
  for (const auto& a : doc.annotations) unit_end[a.start] = a.start + a.len;
  std::vector<std::size_t> units;
  for (std::size_t w = 0; w < doc.num_words(); w = unit_end[w]) units.push_back(w);

  Rng rng(derive_seed(hash_string(doc.id), 0xe7a1));
  rng.shuffle(units);
  std::vector<std::size_t> pass(doc.num_words(), 0);
  for (std::size_t i = 0; i < units.size(); ++i) {
    for (std::size_t w = units[i]; w < unit_end[units[i]]; ++w) pass[w] = i % passes;
  }
  return pass;
}

namespace {

void require_variant(const ModelParams& params, Variant v, const char* what) {
  if (params.config().variant != v) {
    throw Error(ErrorCode::SchemeVariantMismatch, std::string(what) + " needs a " + std::string(to_string(v)) +
                                                      " model, got " + std::string(to_string(params.config().variant)));
  }
}

/// Argmax predictions at the given rows of one input.
std::vector<TokenId> predict_rows(const ModelParams& params, std::span<const TokenId> input,
                                  std::span<const std::size_t> rows, AttentionMode mode) {
  Tape tape(false);
  const BoundParams bound = bind(tape, params);
  const Var hidden = gather_rows(tape, encode(tape, bound, input, mode), rows);
  const Tensor& logits = tape.value(lm_head(tape, bound, hidden));
  std::vector<TokenId> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = static_cast<TokenId>(argmax(logits.row(i)));
  return out;
}

/// Masks `masked` token positions of doc chunk by chunk and writes the
/// predictions into pred.
void predict_masked(const ModelParams& params, const AnnotatedDocument& doc, const std::vector<bool>& masked,
                    const std::vector<std::pair<std::size_t, std::size_t>>& chunks, std::vector<TokenId>& pred) {
  for (auto [b, e] : chunks) {
    std::vector<TokenId> input(doc.token_ids.begin() + static_cast<std::ptrdiff_t>(b),
                               doc.token_ids.begin() + static_cast<std::ptrdiff_t>(e));
    std::vector<std::size_t> rows;
    for (std::size_t p = b; p < e; ++p) {
      if (!masked[p]) continue;
      input[p - b] = Vocab::kMask;
      rows.push_back(p - b);
    }
    if (rows.empty()) continue;
    const auto out = predict_rows(params, input, rows, AttentionMode::Bidirectional);
    for (std::size_t i = 0; i < rows.size(); ++i) pred[b + rows[i]] = out[i];
  }
}

}  // namespace

PredictionTable eval_pass_mlm(const ModelParams& params, const Corpus& docs) {
  require_variant(params, Variant::MLM, "eval_pass_mlm");
  const std::size_t passes = eval_pass_count();
  PredictionTable table(docs.size());
  parallel_for(docs.size(), [&](std::size_t d) {
    const AnnotatedDocument& doc = docs[d];
    DocPredictions& out = table[d];
    out.predicted.assign(doc.num_tokens(), -1);
    out.pass.assign(doc.num_tokens(), 0);
    if (doc.token_ids.empty()) return;
    const auto word_pass = eval_pass_assignment(doc, passes);
    const auto chunks = chunk_words(doc, params.config().max_seq);
    for (std::size_t p = 0; p < passes; ++p) {
      std::vector<bool> masked(doc.num_tokens(), false);
      for (std::size_t w = 0; w < doc.num_words(); ++w) {
        if (word_pass[w] != p) continue;
        for (std::size_t t = doc.word_offsets[w]; t < doc.word_offsets[w + 1]; ++t) {
          masked[t] = true;
          out.pass[t] = p;
        }
      }
      predict_masked(params, doc, masked, chunks, out.predicted);
    }
  });
  return table;
}

PredictionTable eval_pass_clm(const ModelParams& params, const Corpus& docs) {
  require_variant(params, Variant::CLM, "eval_pass_clm");
  const std::size_t len = params.config().max_seq;
  PredictionTable table(docs.size());
  parallel_for(docs.size(), [&](std::size_t d) {
    const AnnotatedDocument& doc = docs[d];
    DocPredictions& out = table[d];
    out.predicted.assign(doc.num_tokens(), -1);
    out.pass.assign(doc.num_tokens(), 0);
    for (std::size_t s : causal_window_starts(doc.num_tokens(), len)) {
      const std::size_t e = std::min(doc.num_tokens(), s + len);
      std::span<const TokenId> input(doc.token_ids.data() + s, e - s);
      std::vector<std::size_t> rows(e - s - 1);
      std::iota(rows.begin(), rows.end(), 0);
      const auto pred = predict_rows(params, input, rows, AttentionMode::Causal);
      for (std::size_t i = 0; i < rows.size(); ++i) out.predicted[s + i + 1] = pred[i];
    }
  });
  return table;
}

PredictionTable eval_pass(const ModelParams& params, const Corpus& docs) {
  return params.config().variant == Variant::MLM ? eval_pass_mlm(params, docs) : eval_pass_clm(params, docs);
}

std::size_t RegurgitationCount::total_capped() const {
  std::size_t n = 0;
  for (const auto& t : terms) n += t.capped;
  return n;
}

std::size_t RegurgitationCount::total_repetitions() const {
  std::size_t n = 0;
  for (const auto& t : terms) n += t.repetitions;
  return n;
}

RegurgitationCount count_regurgitations(const PredictionTable& predictions, const Corpus& docs,
                                        const Blacklist& blacklist) {
  if (predictions.size() != docs.size()) {
    throw Error(ErrorCode::ShapeMismatch, "prediction table covers " + std::to_string(predictions.size()) +
                                              " documents, corpus has " + std::to_string(docs.size()));
  }
  RegurgitationCount out;
  out.terms.resize(blacklist.size());
  for (std::size_t t = 0; t < blacklist.size(); ++t) {
    out.terms[t].repetitions = blacklist.terms()[t].has_unk ? 0 : blacklist.repetitions(t);
  }
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const AnnotatedDocument& doc = docs[d];
    const DocPredictions& pred = predictions[d];
    if (pred.predicted.size() != doc.num_tokens()) {
      throw Error(ErrorCode::ShapeMismatch, "predictions for '" + doc.id + "' do not cover its tokens");
    }
    std::vector<bool> consumed(doc.num_tokens(), false);
    for (const Occurrence& occ : find_occurrences(doc, blacklist)) {
      const std::size_t b = doc.word_offsets[occ.word_start];
      const std::size_t e = doc.word_offsets[occ.word_start + occ.word_len];
      bool whole = b < e;
      for (std::size_t p = b; p < e && whole; ++p) {
        whole = pred.predicted[p] == doc.token_ids[p] && pred.pass[p] == pred.pass[b];
      }
      if (!whole) continue;
      ++out.terms[occ.term].in_place;
      for (std::size_t p = b; p < e; ++p) consumed[p] = true;
    }
    for (std::size_t p = 0; p < doc.num_tokens(); ++p) {
      const TokenId y = pred.predicted[p];
      if (y < 0 || !blacklist.contains_token(y)) continue;
      ++out.events;
      if (consumed[p]) continue;
      if (auto owner = blacklist.owner(y)) ++out.terms[*owner].elsewhere;
    }
  }
  for (auto& t : out.terms) {
    t.events = t.in_place + t.elsewhere;
    t.capped = std::min(t.repetitions, t.events);
  }
  return out;
}

double regurgitation_rate(const RegurgitationCount& count) {
  const std::size_t denom = count.total_repetitions();
  if (denom == 0) throw Error(ErrorCode::ZeroDenominator, "blacklist has no occurrences in the corpus");
  return static_cast<double>(count.total_capped()) / static_cast<double>(denom);
}

double privacy_metric(const RegurgitationCount& count) { return 1.0 - regurgitation_rate(count); }

double regurgitation_metric(const RegurgitationCount& count) { return regurgitation_rate(count); }

double utility_mlm(const ModelParams& params, const Corpus& heldout) {
  require_variant(params, Variant::MLM, "utility_mlm");
  if (heldout.empty()) throw Error(ErrorCode::EmptyHeldout, "no held-out documents");
  std::vector<std::size_t> correct(heldout.size(), 0), total(heldout.size(), 0);
  parallel_for(heldout.size(), [&](std::size_t d) {
    const AnnotatedDocument& doc = heldout[d];
    if (doc.token_ids.empty()) return;
    Rng rng(derive_seed(hash_string(doc.id), 0x07171));
    const MaskingPlan plan = select_masks_standard(doc, kEvalMaskRate, rng);
    std::vector<bool> masked(doc.num_tokens(), false);
    for (std::size_t p : plan.token_positions) masked[p] = true;
    std::vector<TokenId> pred(doc.num_tokens(), -1);
    predict_masked(params, doc, masked, chunk_words(doc, params.config().max_seq), pred);
    for (std::size_t p : plan.token_positions) {
      ++total[d];
      if (pred[p] == doc.token_ids[p]) ++correct[d];
    }
  });
  const std::size_t c = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
  const std::size_t n = std::accumulate(total.begin(), total.end(), std::size_t{0});
  if (n == 0) throw Error(ErrorCode::EmptyHeldout, "held-out documents have no tokens");
  return static_cast<double>(c) / static_cast<double>(n);
}

double utility_clm(const ModelParams& params, const Corpus& heldout) {
  require_variant(params, Variant::CLM, "utility_clm");
  if (heldout.empty()) throw Error(ErrorCode::EmptyHeldout, "no held-out documents");
  const PredictionTable table = eval_pass_clm(params, heldout);
  std::size_t c = 0, n = 0;
  for (std::size_t d = 0; d < heldout.size(); ++d) {
    for (std::size_t p = 1; p < heldout[d].num_tokens(); ++p) {
      ++n;
      if (table[d].predicted[p] == heldout[d].token_ids[p]) ++c;
    }
  }
  if (n == 0) throw Error(ErrorCode::EmptyHeldout, "held-out documents have no targets");
  return static_cast<double>(c) / static_cast<double>(n);
}

double utility(const ModelParams& params, const Corpus& heldout) {
  return params.config().variant == Variant::MLM ? utility_mlm(params, heldout) : utility_clm(params, heldout);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error(ErrorCode::ShapeMismatch, "spearman inputs differ in length");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

FrequencyAnalysis frequency_analysis(const RegurgitationCount& count) {
  if (count.terms.empty()) throw Error(ErrorCode::ConfigError, "frequency analysis of an empty table");
  FrequencyAnalysis out;
  std::vector<double> reps, events;
  for (std::size_t t = 0; t < count.terms.size(); ++t) {
    out.scatter.push_back({t, count.terms[t].repetitions, count.terms[t].events, 0});
    reps.push_back(static_cast<double>(count.terms[t].repetitions));
    events.push_back(static_cast<double>(count.terms[t].events));
  }
  out.cumulative = out.scatter;
  std::stable_sort(out.cumulative.begin(), out.cumulative.end(),
                   [](const FrequencyRow& a, const FrequencyRow& b) { return a.repetitions < b.repetitions; });
  std::size_t acc = 0;
  for (auto& row : out.cumulative) {
    acc += row.events;
    row.cumulative_events = acc;
  }
  out.spearman = spearman(reps, events);
  return out;
}

std::vector<std::size_t> frequency_decile(const RegurgitationCount& count, bool top) {
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t < count.terms.size(); ++t) {
    if (count.terms[t].repetitions > 0) idx.push_back(t);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return top ? count.terms[a].repetitions > count.terms[b].repetitions
               : count.terms[a].repetitions < count.terms[b].repetitions;
  });
  idx.resize((idx.size() + 9) / 10);
  return idx;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string metrics_csv_header() { return "run,epoch,phase,privacy,regurgitation,utility,events"; }

std::string metrics_csv_row(const MetricsRecord& r) {
  return r.run + "," + std::to_string(r.epoch) + "," + std::string(to_string(r.phase)) + "," + format_real(r.privacy) +
         "," + format_real(r.regurgitation) + "," + format_real(r.utility) + "," + std::to_string(r.events);
}

std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& r : rows) out += metrics_csv_row(r) + "\n";
  return out;
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header()) {
    throw Error(ErrorCode::CorruptFile, "metrics CSV header mismatch");
  }
  std::vector<MetricsRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != 7) throw Error(ErrorCode::CorruptFile, "metrics CSV row has " + std::to_string(cells.size()) + " cells");
    try {
      MetricsRecord r;
      r.run = cells[0];
      r.epoch = std::stoul(cells[1]);
      r.phase = phase_from_string(cells[2]);
      r.privacy = std::stod(cells[3]);
      r.regurgitation = std::stod(cells[4]);
      r.utility = std::stod(cells[5]);
      r.events = std::stoul(cells[6]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::CorruptFile, "bad metrics CSV row: " + line);
    }
  }
  return rows;
}

std::string term_table_csv(const RegurgitationCount& count, const Blacklist& blacklist) {
  std::string out = "term,repetitions,events,capped\n";
  for (std::size_t t = 0; t < count.terms.size(); ++t) {
    const auto& row = count.terms[t];
    out += blacklist.term_text(t) + "," + std::to_string(row.repetitions) + "," + std::to_string(row.events) + "," +
           std::to_string(row.capped) + "\n";
  }
  return out;
}

}  // namespace sani
