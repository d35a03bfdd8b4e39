#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sani/downstream.hpp"
#include "sani/metrics.hpp"
#include "sani/unlearn.hpp"

namespace sani {

/// Fine-tuning curves: MLM or CLM on the raw corpus, on the pseudonymized
/// corpus ("A"), or with the privacy-preserving objective ("pp").
enum class Curve { MLM, MLMA, PPMLM, CLM, CLMA, PPCLM };

std::string_view to_string(Curve c);  // "mlm", "mlmA", ...
Curve curve_from_string(std::string_view s);
Variant variant_of(Curve c);
Scheme scheme_of(Curve c);
bool pseudonymized(Curve c);

/// Which blacklist a sanitization forgets.
enum class Target { Identifiers, Conf };

std::string_view to_string(Target t);  // "identifiers" | "conf"
Target target_from_string(std::string_view s);

struct DownstreamConfig {
  std::size_t n_classes = 4;
  std::size_t n_train = 400;
  std::size_t n_test = 200;
  std::size_t min_words = 8;
  std::size_t max_words = 14;
  std::size_t epochs = 4;
  double warmup_fraction = 0.10;
  double peak_lr = 2e-5;
};

struct ExperimentConfig {
  std::filesystem::path corpus;
  std::filesystem::path blacklist_direct, blacklist_indirect, blacklist_conf;
  std::filesystem::path output_dir;
  ModelConfig model;  // variant, vocab_size and seed are filled per run
  double heldout_fraction = 0.1;
  std::size_t min_freq = 1;
  std::size_t pretrain_epochs = 20;
  std::size_t finetune_epochs = 16;
  std::vector<std::size_t> measure_epochs{2, 4, 8, 16};
  double lr = 1e-4;
  double repair_lr = 1e-4;
  std::size_t batch_size = 8;
  double mask_rate = 0.15;
  std::vector<Strategy> strategies{Strategy::SANI, Strategy::PRUNING, Strategy::REPAIR_ONLY};
  std::vector<std::uint64_t> seeds{1};
  DownstreamConfig downstream;
  std::uint64_t config_hash = 0;  // FNV-1a of the config bytes

  /// Relative paths resolve against base_dir. Throws ConfigError for
  /// missing or unknown keys, bad values and missing input files.
  static ExperimentConfig from_json(std::string_view text, const std::filesystem::path& base_dir);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;

  std::uint64_t primary_seed() const { return seeds.front(); }
};

/// Corpus, splits, vocabulary and blacklists shared by every run.
struct Experiment {
  ExperimentConfig cfg;
  Vocab vocab;
  CorpusSplit raw;        // tokenized
  Corpus pseudo_train;    // pseudonymized raw.train, tokenized
  Corpus generic_train;   // raw.train without annotated spans, tokenized
  Blacklist direct, indirect, conf;
  Blacklist identifiers;  // direct and indirect
  MarkerTask marker_task;

  const Blacklist& blacklist(Target t) const { return t == Target::Conf ? conf : identifiers; }
};

Experiment load_experiment(const ExperimentConfig& cfg);

ModelConfig model_config(const Experiment& exp, Variant variant);
TrainSchedule train_schedule(const ExperimentConfig& cfg, std::size_t epochs, double lr);

/// The generic pre-trained starting point for a variant: trained on the
/// training split with every annotated span removed. Cached in the output
/// directory, keyed by the corpus and the settings pre-training depends on.
ModelParams base_model(const Experiment& exp, Variant variant);

struct Measurement {
  MetricsRecord record;
  RegurgitationCount identifiers;
  RegurgitationCount conf;
};

/// Privacy against the identifiers, regurgitation against the confidential
/// terms (both over the raw training split), utility on the held-out split.
/// events counts positions regurgitating the target blacklist.
Measurement measure(const Experiment& exp, const ModelParams& params, const std::string& run, std::size_t epoch,
                    Phase phase, Target target);

struct RunPaths {
  static std::filesystem::path metrics(const std::filesystem::path& out, const std::string& run);
  static std::filesystem::path checkpoint(const std::filesystem::path& out, const std::string& run, std::size_t epoch);
  static std::filesystem::path terms(const std::filesystem::path& out, const std::string& run, const std::string& tag,
                                     Target target);
  static std::filesystem::path erasure(const std::filesystem::path& out, const std::string& run);
  static std::filesystem::path downstream(const std::filesystem::path& out, const std::string& run);
};

/// Trains one curve from the base model and writes a checkpoint, a metrics
/// row and term tables at epoch 0 and each measurement epoch.
std::vector<MetricsRecord> run_finetune(const Experiment& exp, Curve curve);

/// "<source run>.<strategy>.<target>.s<seed>", e.g. "mlm.sani.identifiers.s1".
std::string sanitize_run_id(const std::string& source, Strategy strategy, Target target, std::uint64_t seed);
std::string sanitize_run_id(Curve from, Strategy strategy, Target target, std::uint64_t seed);

struct SanitizeOutcome {
  std::string run;
  ErasureReport erasure;
  std::vector<MetricsRecord> records;
};

/// Sanitizes a fine-tuned checkpoint. For an MLM model targeting the
/// confidential terms, also trains the downstream classifier on the encoder
/// before sanitization and after each repair epoch.
SanitizeOutcome run_sanitize(const Experiment& exp, const std::filesystem::path& from, Strategy strategy,
                             Target target, std::uint64_t seed);

/// Metrics and term tables for an arbitrary checkpoint.
Measurement run_eval(const Experiment& exp, const std::filesystem::path& checkpoint, Target target);

/// Macro F1 of a classifier trained on the encoder (fixed seed).
double downstream_f1(const Experiment& exp, const ModelParams& encoder);

/// Manifest of one output directory: config hash, per-run seed, files, and
/// wall-clock seconds per phase. Updated after each command.
void record_run(const std::filesystem::path& out, std::uint64_t config_hash, const std::string& run,
                std::uint64_t seed, const std::vector<std::filesystem::path>& files,
                const std::map<std::string, double>& seconds);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace sani
