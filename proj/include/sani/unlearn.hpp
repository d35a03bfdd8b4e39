#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sani/objectives.hpp"

namespace sani {

enum class Strategy { SANI, PRUNING, REPAIR_ONLY };
enum class ErasureKind { SANI, PRUNING, NONE };
enum class Phase { Finetune, Erase, Repair };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);  // "sani" | "pruning" | "repair-only"
std::string_view to_string(ErasureKind k);
std::string_view to_string(Phase p);
Phase phase_from_string(std::string_view s);

struct LayerErasure {
  std::string parameter;      // weight matrix name
  std::size_t units = 0;      // rows of the matrix
  std::size_t protected_units = 0;
  std::size_t zeroed = 0;
  std::vector<std::size_t> zeroed_units;  // ascending
};

struct ErasureReport {
  ErasureKind kind = ErasureKind::NONE;
  std::vector<std::string> affected;  // every tensor that was written
  std::vector<LayerErasure> layers;
  std::uint64_t seed = 0;

  std::size_t total_zeroed() const;
  nlohmann::ordered_json to_json() const;
};

/// Zeroes ceil(fraction * vocab) head rows and their bias entries, chosen
/// uniformly without replacement. Throws FractionOutOfRange.
ErasureReport erase_last_layer(ModelParams& params, double fraction, std::uint64_t seed);

/// Per 2-D weight matrix except the embeddings: rows scored by L2 norm, the
/// top ceil(protect * rows) kept, floor(reset * remainder) of the others
/// zeroed at random (row and bias entry). 1-D tensors are untouched.
ErasureReport erase_pruning(ModelParams& params, double protect_fraction, double reset_fraction, std::uint64_t seed);

/// Units zeroed by erase_pruning for a matrix with the given row count.
std::size_t pruning_zero_count(std::size_t units, double protect_fraction, double reset_fraction);

struct UnlearnBudget {
  std::size_t finetune_epochs = 0;
  double budget_fraction = 0.20;

  /// ceil(budget_fraction * finetune_epochs), at least 1.
  std::size_t repair_epochs() const;
};

struct MetricsRecord {
  std::string run;
  std::size_t epoch = 0;
  Phase phase = Phase::Finetune;
  double privacy = 1.0;
  double regurgitation = 0.0;
  double utility = 0.0;
  std::size_t events = 0;
};

/// Produces the metrics row for a model state; the caller fills epoch/phase.
using MetricsFn = std::function<MetricsRecord(const ModelParams& params, std::size_t epoch, Phase phase)>;
/// Called after each repair epoch (1-based) with the current parameters.
using RepairHook = std::function<void(const ModelParams& params, const AdamState& adam, std::size_t repair_epoch)>;

struct RepairOptions {
  Scheme scheme = Scheme::PPMLM;
  TrainSchedule schedule;  // total_epochs is replaced by the budget
  std::uint64_t seed = 0;
  std::size_t first_epoch = 0;  // epoch label of the row before repair
  RepairHook on_epoch;
};

/// Runs budget.repair_epochs() epochs of the privacy-preserving scheme with
/// a fresh optimizer and a restarted LR; returns one row per epoch. Throws
/// SchemeVariantMismatch (or ConfigError for a non-privacy scheme).
std::vector<MetricsRecord> repair(ModelParams& params, const Corpus& train, const Blacklist& blacklist,
                                  const UnlearnBudget& budget, const RepairOptions& opts, const MetricsFn& metrics);

struct SanitizeResult {
  ErasureReport erasure;
  std::vector<MetricsRecord> records;  // repair_epochs + 1 rows
};

/// Erase (per strategy), measure, then repair. The first row is the
/// post-erasure state and carries phase Erase for every strategy.
SanitizeResult sanitize(ModelParams& params, const Corpus& train, const Blacklist& blacklist, Strategy strategy,
                        const UnlearnBudget& budget, const RepairOptions& opts, const MetricsFn& metrics);

}  // namespace sani
