#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sani/corpus.hpp"
#include "sani/model.hpp"
#include "sani/unlearn.hpp"

namespace sani {

inline constexpr double kEvalMaskRate = 0.15;

/// ceil(1 / rate): number of evaluation passes.
std::size_t eval_pass_count(double rate = kEvalMaskRate);

/// Pass index for every word of doc. Units are single words except that an
/// annotated span is one unit; units are shuffled with a stream seeded by
/// the document id and dealt round-robin over the passes.
std::vector<std::size_t> eval_pass_assignment(const AnnotatedDocument& doc, std::size_t passes);

/// Top-1 prediction per token position (-1 where nothing was predicted)
/// and the pass in which it was made.
struct DocPredictions {
  std::vector<TokenId> predicted;
  std::vector<std::size_t> pass;
};

using PredictionTable = std::vector<DocPredictions>;

/// Every position masked exactly once across the passes. Throws
/// SchemeVariantMismatch for a CLM model.
PredictionTable eval_pass_mlm(const ModelParams& params, const Corpus& docs);

/// Teacher-forced next-token predictions; position 0 of each document has
/// none. Throws SchemeVariantMismatch for an MLM model.
PredictionTable eval_pass_clm(const ModelParams& params, const Corpus& docs);

PredictionTable eval_pass(const ModelParams& params, const Corpus& docs);

struct TermRow {
  std::size_t repetitions = 0;
  std::size_t in_place = 0;   // fully reproduced occurrences
  std::size_t elsewhere = 0;  // event positions attributed to the term
  std::size_t events = 0;     // in_place + elsewhere
  std::size_t capped = 0;     // min(repetitions, events)
};

struct RegurgitationCount {
  std::size_t events = 0;  // positions whose prediction is in the token set
  std::vector<TermRow> terms;

  std::size_t total_capped() const;
  std::size_t total_repetitions() const;
};

/// Event = predicted position whose token belongs to the blacklist token
/// set. A term occurrence counts in place when every one of its positions
/// was predicted correctly in a single pass; all other event positions are
/// attributed to the lowest-index term owning the predicted token. Terms
/// that contain UNK have zero repetitions.
RegurgitationCount count_regurgitations(const PredictionTable& predictions, const Corpus& docs,
                                        const Blacklist& blacklist);

/// Sum of capped counts over sum of repetitions. Throws ZeroDenominator.
double regurgitation_rate(const RegurgitationCount& count);
double privacy_metric(const RegurgitationCount& count);
double regurgitation_metric(const RegurgitationCount& count);

/// MLM: top-1 accuracy over a deterministic whole-word 15% sample of each
/// held-out document. Throws EmptyHeldout.
double utility_mlm(const ModelParams& params, const Corpus& heldout);
/// CLM: teacher-forced top-1 next-token accuracy. Throws EmptyHeldout.
double utility_clm(const ModelParams& params, const Corpus& heldout);
double utility(const ModelParams& params, const Corpus& heldout);

struct FrequencyRow {
  std::size_t term = 0;
  std::size_t repetitions = 0;
  std::size_t events = 0;
  std::size_t cumulative_events = 0;  // over terms sorted by repetitions
};

struct FrequencyAnalysis {
  std::vector<FrequencyRow> scatter;     // term order
  std::vector<FrequencyRow> cumulative;  // ascending repetitions, ties by term index
  double spearman = 0.0;
};

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side has no spread.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Throws ConfigError for an empty table.
FrequencyAnalysis frequency_analysis(const RegurgitationCount& count);

/// Term indices whose repetition count falls in the top (or bottom) decile
/// of nonzero-repetition terms: ceil(n/10) terms, ties broken by index.
std::vector<std::size_t> frequency_decile(const RegurgitationCount& count, bool top);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::string metrics_csv(const std::vector<MetricsRecord>& rows);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

std::string term_table_csv(const RegurgitationCount& count, const Blacklist& blacklist);

/// Fixed-precision text for CSV cells (round-trip stable).
std::string format_real(double v);

}  // namespace sani
