#include "sani/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "sani/errors.hpp"

namespace sani {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string_view to_string(Curve c) {
  switch (c) {
    case Curve::MLM: return "mlm";
    case Curve::MLMA: return "mlmA";
    case Curve::PPMLM: return "ppmlm";
    case Curve::CLM: return "clm";
    case Curve::CLMA: return "clmA";
    case Curve::PPCLM: return "ppclm";
  }
  return "?";
}

Curve curve_from_string(std::string_view s) {
  for (Curve c : {Curve::MLM, Curve::MLMA, Curve::PPMLM, Curve::CLM, Curve::CLMA, Curve::PPCLM}) {
    if (to_string(c) == s) return c;
  }
  throw Error(ErrorCode::ConfigError, "unknown curve '" + std::string(s) + "'");
}

Variant variant_of(Curve c) {
  return c == Curve::MLM || c == Curve::MLMA || c == Curve::PPMLM ? Variant::MLM : Variant::CLM;
}

Scheme scheme_of(Curve c) {
  switch (c) {
    case Curve::MLM:
    case Curve::MLMA: return Scheme::MLM;
    case Curve::PPMLM: return Scheme::PPMLM;
    case Curve::CLM:
    case Curve::CLMA: return Scheme::CLM;
    case Curve::PPCLM: return Scheme::PPCLM;
  }
  return Scheme::MLM;
}

bool pseudonymized(Curve c) { return c == Curve::MLMA || c == Curve::CLMA; }

std::string_view to_string(Target t) { return t == Target::Conf ? "conf" : "identifiers"; }

Target target_from_string(std::string_view s) {
  if (s == "identifiers") return Target::Identifiers;
  if (s == "conf") return Target::Conf;
  throw Error(ErrorCode::ConfigError, "unknown target '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Files

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
T take(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("bad value for '") + key + "': " + e.what());
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw Error(ErrorCode::ConfigError, "unknown key '" + it.key() + "' in " + where);
  }
}

fs::path required_path(const nlohmann::json& j, const char* key, const fs::path& base) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw Error(ErrorCode::ConfigError, std::string("missing string key '") + key + "'");
  }
  const fs::path p = j.at(key).get<std::string>();
  return p.is_absolute() ? p : base / p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig ExperimentConfig::from_json(std::string_view text, const fs::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("experiment config: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "experiment config must be an object");
  reject_unknown(j,
                 {"corpus", "blacklist_direct", "blacklist_indirect", "blacklist_conf", "output_dir", "model",
                  "heldout_fraction", "min_freq", "pretrain_epochs", "finetune_epochs", "measure_epochs", "lr",
                  "repair_lr", "batch_size", "mask_rate", "strategies", "seeds", "downstream"},
                 "experiment config");

  ExperimentConfig c;
  c.corpus = required_path(j, "corpus", base_dir);
  c.blacklist_direct = required_path(j, "blacklist_direct", base_dir);
  c.blacklist_indirect = required_path(j, "blacklist_indirect", base_dir);
  c.blacklist_conf = required_path(j, "blacklist_conf", base_dir);
  c.output_dir = required_path(j, "output_dir", base_dir);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (!m.is_object()) throw Error(ErrorCode::ConfigError, "'model' must be an object");
    reject_unknown(m, {"n_layers", "n_heads", "d_model", "d_ff", "max_seq"}, "model");
    c.model.n_layers = take(m, "n_layers", c.model.n_layers);
    c.model.n_heads = take(m, "n_heads", c.model.n_heads);
    c.model.d_model = take(m, "d_model", c.model.d_model);
    c.model.d_ff = take(m, "d_ff", c.model.d_ff);
    c.model.max_seq = take(m, "max_seq", c.model.max_seq);
  }
  c.heldout_fraction = take(j, "heldout_fraction", c.heldout_fraction);
  c.min_freq = take(j, "min_freq", c.min_freq);
  c.pretrain_epochs = take(j, "pretrain_epochs", c.pretrain_epochs);
  c.finetune_epochs = take(j, "finetune_epochs", c.finetune_epochs);
  c.measure_epochs = take(j, "measure_epochs", c.measure_epochs);
  c.lr = take(j, "lr", c.lr);
  c.repair_lr = take(j, "repair_lr", c.repair_lr);
  c.batch_size = take(j, "batch_size", c.batch_size);
  c.mask_rate = take(j, "mask_rate", c.mask_rate);
  if (j.contains("strategies")) {
    c.strategies.clear();
    for (const auto& s : take<std::vector<std::string>>(j, "strategies", {})) c.strategies.push_back(strategy_from_string(s));
  }
  c.seeds = take(j, "seeds", c.seeds);
  if (j.contains("downstream")) {
    const auto& d = j.at("downstream");
    if (!d.is_object()) throw Error(ErrorCode::ConfigError, "'downstream' must be an object");
    reject_unknown(d, {"n_classes", "n_train", "n_test", "min_words", "max_words", "epochs", "warmup_fraction", "peak_lr"},
                   "downstream");
    auto& ds = c.downstream;
    ds.n_classes = take(d, "n_classes", ds.n_classes);
    ds.n_train = take(d, "n_train", ds.n_train);
    ds.n_test = take(d, "n_test", ds.n_test);
    ds.min_words = take(d, "min_words", ds.min_words);
    ds.max_words = take(d, "max_words", ds.max_words);
    ds.epochs = take(d, "epochs", ds.epochs);
    ds.warmup_fraction = take(d, "warmup_fraction", ds.warmup_fraction);
    ds.peak_lr = take(d, "peak_lr", ds.peak_lr);
  }

  if (c.finetune_epochs == 0) throw Error(ErrorCode::ConfigError, "finetune_epochs must be positive");
  for (std::size_t e : c.measure_epochs) {
    if (e < 1 || e > c.finetune_epochs) {
      throw Error(ErrorCode::ConfigError, "measure epoch " + std::to_string(e) + " outside [1, finetune_epochs]");
    }
  }
  std::sort(c.measure_epochs.begin(), c.measure_epochs.end());
  c.measure_epochs.erase(std::unique(c.measure_epochs.begin(), c.measure_epochs.end()), c.measure_epochs.end());
  if (c.measure_epochs.empty() || c.measure_epochs.back() != c.finetune_epochs) {
    throw Error(ErrorCode::ConfigError, "measure_epochs must include finetune_epochs");
  }
  if (c.seeds.empty()) throw Error(ErrorCode::ConfigError, "seeds must not be empty");
  if (c.strategies.empty()) throw Error(ErrorCode::ConfigError, "strategies must not be empty");
  if (!(c.heldout_fraction > 0.0 && c.heldout_fraction < 1.0)) {
    throw Error(ErrorCode::ConfigError, "heldout_fraction must lie in (0, 1)");
  }
  if (!(c.mask_rate > 0.0 && c.mask_rate <= 1.0)) throw Error(ErrorCode::ConfigError, "mask_rate must lie in (0, 1]");
  if (!(c.lr > 0.0) || !(c.repair_lr > 0.0)) throw Error(ErrorCode::ConfigError, "learning rates must be positive");
  if (c.batch_size == 0) throw Error(ErrorCode::ConfigError, "batch_size must be positive");
  if (c.downstream.n_classes < 2) throw Error(ErrorCode::ConfigError, "downstream needs at least two classes");

  for (const fs::path* p : {&c.corpus, &c.blacklist_direct, &c.blacklist_indirect, &c.blacklist_conf}) {
    if (!fs::exists(*p)) throw Error(ErrorCode::ConfigError, "missing file " + p->string());
  }
  c.config_hash = hash_string(text);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::ConfigError, "missing config " + path.string());
  return from_json(read_text(path), path.parent_path());
}

ojson ExperimentConfig::to_json() const {
  ojson j;
  j["corpus"] = corpus.string();
  j["blacklist_direct"] = blacklist_direct.string();
  j["blacklist_indirect"] = blacklist_indirect.string();
  j["blacklist_conf"] = blacklist_conf.string();
  j["output_dir"] = output_dir.string();
  j["model"] = {{"n_layers", model.n_layers},
                {"n_heads", model.n_heads},
                {"d_model", model.d_model},
                {"d_ff", model.d_ff},
                {"max_seq", model.max_seq}};
  j["heldout_fraction"] = heldout_fraction;
  j["min_freq"] = min_freq;
  j["pretrain_epochs"] = pretrain_epochs;
  j["finetune_epochs"] = finetune_epochs;
  j["measure_epochs"] = measure_epochs;
  j["lr"] = lr;
  j["repair_lr"] = repair_lr;
  j["batch_size"] = batch_size;
  j["mask_rate"] = mask_rate;
  std::vector<std::string> s;
  for (Strategy st : strategies) s.emplace_back(to_string(st));
  j["strategies"] = s;
  j["seeds"] = seeds;
  j["downstream"] = {{"n_classes", downstream.n_classes},     {"n_train", downstream.n_train},
                     {"n_test", downstream.n_test},           {"min_words", downstream.min_words},
                     {"max_words", downstream.max_words},     {"epochs", downstream.epochs},
                     {"warmup_fraction", downstream.warmup_fraction}, {"peak_lr", downstream.peak_lr}};
  j["config_hash"] = hex64(config_hash);
  return j;
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

/// Single-token words that never appear inside an annotated span or a
/// blacklist term: candidates for the downstream task's vocabulary.
std::vector<std::string> neutral_words(const Corpus& docs, const std::vector<const Blacklist*>& lists) {
  std::set<std::string> sensitive;
  for (const auto& doc : docs) {
    for (const auto& a : doc.annotations) {
      for (std::size_t i = a.start; i < a.start + a.len; ++i) sensitive.insert(doc.words[i]);
    }
  }
  for (const Blacklist* bl : lists) {
    for (const auto& t : bl->terms()) sensitive.insert(t.words.begin(), t.words.end());
  }
  std::set<std::string> pool;
  for (const auto& doc : docs) {
    for (const auto& w : doc.words) {
      if (!sensitive.count(w) && split_word(w).size() == 1) pool.insert(w);
    }
  }
  return {pool.begin(), pool.end()};
}

}  // namespace

Experiment load_experiment(const ExperimentConfig& cfg) {
  Experiment exp;
  exp.cfg = cfg;
  Corpus raw = read_corpus_jsonl(cfg.corpus);
  if (raw.empty()) throw Error(ErrorCode::EmptyCorpus, cfg.corpus.string());
  for (const auto& d : raw) validate(d);

  Corpus vocab_source = raw;
  for (auto& d : pseudonymize(raw)) vocab_source.push_back(std::move(d));
  exp.vocab = build_vocab(vocab_source, cfg.min_freq);

  tokenize(raw, exp.vocab);
  exp.raw = split_corpus(raw, cfg.heldout_fraction, derive_seed(cfg.primary_seed(), 0x5711));
  exp.pseudo_train = pseudonymize(exp.raw.train);
  tokenize(exp.pseudo_train, exp.vocab);
  for (const auto& d : exp.raw.train) {
    AnnotatedDocument g = strip_annotated(d);
    if (g.words.empty()) continue;
    tokenize(g, exp.vocab);
    exp.generic_train.push_back(std::move(g));
  }
  if (exp.generic_train.empty()) throw Error(ErrorCode::EmptyCorpus, "no generic text left after stripping spans");

  exp.direct = load_blacklist(cfg.blacklist_direct, exp.vocab, exp.raw.train);
  exp.indirect = load_blacklist(cfg.blacklist_indirect, exp.vocab, exp.raw.train);
  exp.conf = load_blacklist(cfg.blacklist_conf, exp.vocab, exp.raw.train);
  exp.identifiers = Blacklist::merge(exp.direct, exp.indirect, exp.vocab, exp.raw.train);

  exp.marker_task = make_marker_task(neutral_words(raw, {&exp.direct, &exp.indirect, &exp.conf}),
                                     cfg.downstream.n_classes, cfg.primary_seed());
  return exp;
}

ModelConfig model_config(const Experiment& exp, Variant variant) {
  ModelConfig mc = exp.cfg.model;
  mc.variant = variant;
  mc.vocab_size = exp.vocab.size();
  mc.seed = exp.cfg.primary_seed();
  mc.validate();
  return mc;
}

TrainSchedule train_schedule(const ExperimentConfig& cfg, std::size_t epochs, double lr) {
  TrainSchedule s;
  s.total_epochs = epochs;
  s.lr_start = lr;
  s.batch_size = cfg.batch_size;
  s.seq_len = cfg.model.max_seq;
  s.mask_rate = cfg.mask_rate;
  return s;
}

namespace {

std::string checkpoint_note(const std::string& run, std::uint64_t seed) {
  ojson j;
  j["run"] = run;
  j["seed"] = seed;
  return j.dump();
}

std::string run_of_checkpoint(const Checkpoint& ck, const fs::path& path) {
  try {
    const auto j = nlohmann::json::parse(ck.rng_state);
    if (j.is_object() && j.contains("run")) return j.at("run").get<std::string>();
  } catch (const nlohmann::json::exception&) {
  }
  return path.stem().string();
}

void write_config_copy(const ExperimentConfig& cfg) { write_text(cfg.output_dir / "config.json", cfg.to_json().dump(2) + "\n"); }

}  // namespace

namespace {

/// Key over everything the base model depends on, so that changing a
/// fine-tuning or repair setting reuses the cached pre-training.
std::uint64_t base_key(const Experiment& exp, Variant variant) {
  const ExperimentConfig& c = exp.cfg;
  ojson j;
  j["corpus"] = hash_string(read_text(c.corpus));
  j["model"] = model_config(exp, variant).to_json();
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["mask_rate"] = c.mask_rate;
  j["heldout_fraction"] = c.heldout_fraction;
  j["min_freq"] = c.min_freq;
  return hash_string(j.dump());
}

}  // namespace

ModelParams base_model(const Experiment& exp, Variant variant) {
  const fs::path path =
      exp.cfg.output_dir / "ckpt" / ("base_" + std::string(to_string(variant)) + "_" + hex64(base_key(exp, variant)) + ".ckpt");
  if (fs::exists(path)) return load_checkpoint(path, variant).params;

  const auto t0 = std::chrono::steady_clock::now();
  ModelParams params = ModelParams::init(model_config(exp, variant));
  AdamState adam(params.tensors());
  const Scheme scheme = variant == Variant::MLM ? Scheme::MLM : Scheme::CLM;
  const TrainSchedule sched = train_schedule(exp.cfg, exp.cfg.pretrain_epochs, exp.cfg.lr);
  const std::uint64_t seed = derive_seed(exp.cfg.primary_seed(), 0xba5e);
  for (std::size_t e = 0; e < exp.cfg.pretrain_epochs; ++e) {
    train_epoch(params, adam, exp.generic_train, Blacklist{}, scheme, sched, e, seed);
  }
  Checkpoint ck{params, std::nullopt, 0, checkpoint_note("base", exp.cfg.primary_seed())};
  save_checkpoint(ck, path);
  write_config_copy(exp.cfg);
  record_run(exp.cfg.output_dir, exp.cfg.config_hash, "base_" + std::string(to_string(variant)),
             exp.cfg.primary_seed(), {path}, {{"pretrain", seconds_since(t0)}});
  return params;
}

Measurement measure(const Experiment& exp, const ModelParams& params, const std::string& run, std::size_t epoch,
                    Phase phase, Target target) {
  const PredictionTable pred = eval_pass(params, exp.raw.train);
  Measurement m;
  m.identifiers = count_regurgitations(pred, exp.raw.train, exp.identifiers);
  m.conf = count_regurgitations(pred, exp.raw.train, exp.conf);
  m.record.run = run;
  m.record.epoch = epoch;
  m.record.phase = phase;
  m.record.privacy = privacy_metric(m.identifiers);
  m.record.regurgitation = regurgitation_metric(m.conf);
  m.record.utility = utility(params, exp.raw.heldout);
  m.record.events = target == Target::Conf ? m.conf.events : m.identifiers.events;
  return m;
}

fs::path RunPaths::metrics(const fs::path& out, const std::string& run) { return out / "metrics" / (run + ".csv"); }

fs::path RunPaths::checkpoint(const fs::path& out, const std::string& run, std::size_t epoch) {
  return out / "ckpt" / (run + "_e" + std::to_string(epoch) + ".ckpt");
}

fs::path RunPaths::terms(const fs::path& out, const std::string& run, const std::string& tag, Target target) {
  return out / "terms" / (run + "_" + tag + "_" + std::string(to_string(target)) + ".csv");
}

fs::path RunPaths::erasure(const fs::path& out, const std::string& run) { return out / "erasure" / (run + ".json"); }

fs::path RunPaths::downstream(const fs::path& out, const std::string& run) { return out / "downstream" / (run + ".csv"); }

namespace {

std::vector<fs::path> write_terms(const Experiment& exp, const Measurement& m, const std::string& run,
                                  const std::string& tag) {
  const fs::path& out = exp.cfg.output_dir;
  const fs::path ids = RunPaths::terms(out, run, tag, Target::Identifiers);
  const fs::path conf = RunPaths::terms(out, run, tag, Target::Conf);
  write_text(ids, term_table_csv(m.identifiers, exp.identifiers));
  write_text(conf, term_table_csv(m.conf, exp.conf));
  return {ids, conf};
}

}  // namespace

std::vector<MetricsRecord> run_finetune(const Experiment& exp, Curve curve) {
  const fs::path& out = exp.cfg.output_dir;
  const std::string run(to_string(curve));
  const Variant variant = variant_of(curve);
  write_config_copy(exp.cfg);

  std::map<std::string, double> seconds;
  ModelParams params = base_model(exp, variant);
  AdamState adam(params.tensors());
  const Corpus& docs = pseudonymized(curve) ? exp.pseudo_train : exp.raw.train;
  const TrainSchedule sched = train_schedule(exp.cfg, exp.cfg.finetune_epochs, exp.cfg.lr);
  const std::uint64_t seed = derive_seed(exp.cfg.primary_seed(), hash_string(run));

  std::vector<MetricsRecord> rows;
  std::vector<fs::path> files;
  const fs::path metrics_path = RunPaths::metrics(out, run);
  auto record = [&](std::size_t epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const Measurement m = measure(exp, params, run, epoch, Phase::Finetune, Target::Identifiers);
    rows.push_back(m.record);
    for (auto& f : write_terms(exp, m, run, "e" + std::to_string(epoch))) files.push_back(std::move(f));
    write_text(metrics_path, metrics_csv(rows));
    seconds["measure"] += seconds_since(t0);
  };

  record(0);
  for (std::size_t e = 0; e < exp.cfg.finetune_epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    train_epoch(params, adam, docs, exp.identifiers, scheme_of(curve), sched, e, seed);
    seconds["finetune"] += seconds_since(t0);
    const std::size_t epoch = e + 1;
    if (!std::binary_search(exp.cfg.measure_epochs.begin(), exp.cfg.measure_epochs.end(), epoch)) continue;
    const fs::path ck_path = RunPaths::checkpoint(out, run, epoch);
    save_checkpoint(Checkpoint{params, adam, epoch, checkpoint_note(run, exp.cfg.primary_seed())}, ck_path);
    files.push_back(ck_path);
    record(epoch);
  }
  files.push_back(metrics_path);
  record_run(out, exp.cfg.config_hash, run, exp.cfg.primary_seed(), files, seconds);
  return rows;
}

std::string sanitize_run_id(const std::string& source, Strategy strategy, Target target, std::uint64_t seed) {
  return source + "." + std::string(to_string(strategy)) + "." + std::string(to_string(target)) + ".s" +
         std::to_string(seed);
}

std::string sanitize_run_id(Curve from, Strategy strategy, Target target, std::uint64_t seed) {
  return sanitize_run_id(std::string(to_string(from)), strategy, target, seed);
}

double downstream_f1(const Experiment& exp, const ModelParams& encoder) {
  const DownstreamConfig& ds = exp.cfg.downstream;
  LabeledTaskConfig task{ds.n_classes, ds.n_train, ds.min_words, ds.max_words,
                         derive_seed(exp.cfg.primary_seed(), 0x7a1)};
  LabeledSet train = generate_labeled_set(exp.marker_task, task);
  task.n_examples = ds.n_test;
  task.seed = derive_seed(exp.cfg.primary_seed(), 0x7e5);
  LabeledSet test = generate_labeled_set(exp.marker_task, task);
  tokenize(train, exp.vocab);
  tokenize(test, exp.vocab);
  ClassifierConfig cc;
  cc.n_classes = ds.n_classes;
  cc.epochs = ds.epochs;
  cc.warmup_fraction = ds.warmup_fraction;
  cc.peak_lr = ds.peak_lr;
  cc.batch_size = exp.cfg.batch_size;
  cc.seed = exp.cfg.primary_seed();
  const ClassifierResult r = train_classifier(encoder, train, test, cc);
  return r.f1_history.empty() ? macro_f1(r.model, test, ds.n_classes) : r.f1_history.back();
}

SanitizeOutcome run_sanitize(const Experiment& exp, const fs::path& from, Strategy strategy, Target target,
                             std::uint64_t seed) {
  const fs::path& out = exp.cfg.output_dir;
  write_config_copy(exp.cfg);
  Checkpoint ck = load_checkpoint(from);
  const Variant variant = ck.params.config().variant;
  if (ck.params.config().vocab_size != exp.vocab.size()) {
    throw Error(ErrorCode::ConfigError, from.string() + " was trained with a different vocabulary");
  }

  SanitizeOutcome outcome;
  outcome.run = sanitize_run_id(run_of_checkpoint(ck, from), strategy, target, seed);
  const std::string& run = outcome.run;
  const Blacklist& bl = exp.blacklist(target);
  const bool with_downstream = variant == Variant::MLM && target == Target::Conf && exp.cfg.downstream.epochs > 0;

  std::map<std::string, double> seconds;
  std::vector<fs::path> files;
  std::string downstream_csv = "run,epoch,f1\n";
  auto add_f1 = [&](const ModelParams& p, std::size_t epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    downstream_csv += run + "," + std::to_string(epoch) + "," + format_real(downstream_f1(exp, p)) + "\n";
    seconds["downstream"] += seconds_since(t0);
  };

  const std::size_t first_epoch = ck.epoch;
  auto t0 = std::chrono::steady_clock::now();
  const Measurement before = measure(exp, ck.params, run, first_epoch, Phase::Finetune, target);
  for (auto& f : write_terms(exp, before, run, "before")) files.push_back(std::move(f));
  seconds["measure"] += seconds_since(t0);
  if (with_downstream) add_f1(ck.params, first_epoch);

  UnlearnBudget budget{exp.cfg.finetune_epochs};
  RepairOptions opts;
  opts.scheme = variant == Variant::MLM ? Scheme::PPMLM : Scheme::PPCLM;
  opts.schedule = train_schedule(exp.cfg, budget.repair_epochs(), exp.cfg.repair_lr);
  opts.seed = seed;
  opts.first_epoch = first_epoch;
  opts.on_epoch = [&](const ModelParams& p, const AdamState& adam, std::size_t k) {
    const fs::path ck_path = RunPaths::checkpoint(out, run, first_epoch + k);
    save_checkpoint(Checkpoint{p, adam, first_epoch + k, checkpoint_note(run, seed)}, ck_path);
    files.push_back(ck_path);
    if (with_downstream) add_f1(p, first_epoch + k);
  };
  const MetricsFn metrics = [&](const ModelParams& p, std::size_t epoch, Phase phase) {
    const auto t = std::chrono::steady_clock::now();
    const Measurement m = measure(exp, p, run, epoch, phase, target);
    const std::string tag = phase == Phase::Erase ? "erase" : "e" + std::to_string(epoch);
    for (auto& f : write_terms(exp, m, run, tag)) files.push_back(std::move(f));
    seconds["measure"] += seconds_since(t);
    return m.record;
  };

  t0 = std::chrono::steady_clock::now();
  const double side_before = seconds["measure"] + seconds["downstream"];
  ModelParams params = std::move(ck.params);
  SanitizeResult res = sanitize(params, exp.raw.train, bl, strategy, budget, opts, metrics);
  seconds["sanitize"] = seconds_since(t0) - (seconds["measure"] + seconds["downstream"] - side_before);

  outcome.erasure = res.erasure;
  outcome.records.push_back(before.record);
  for (auto& r : res.records) outcome.records.push_back(std::move(r));

  const fs::path metrics_path = RunPaths::metrics(out, run);
  write_text(metrics_path, metrics_csv(outcome.records));
  files.push_back(metrics_path);
  const fs::path erasure_path = RunPaths::erasure(out, run);
  write_text(erasure_path, outcome.erasure.to_json().dump(2) + "\n");
  files.push_back(erasure_path);
  if (with_downstream) {
    const fs::path p = RunPaths::downstream(out, run);
    write_text(p, downstream_csv);
    files.push_back(p);
  }
  record_run(out, exp.cfg.config_hash, run, seed, files, seconds);
  return outcome;
}

Measurement run_eval(const Experiment& exp, const fs::path& checkpoint, Target target) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.params.config().vocab_size != exp.vocab.size()) {
    throw Error(ErrorCode::ConfigError, checkpoint.string() + " was trained with a different vocabulary");
  }
  const std::string run = "eval." + checkpoint.stem().string();
  const Measurement m = measure(exp, ck.params, run, ck.epoch, Phase::Finetune, target);
  const fs::path out = exp.cfg.output_dir;
  write_text(RunPaths::metrics(out, run), metrics_csv({m.record}));
  write_terms(exp, m, run, "e" + std::to_string(ck.epoch));
  return m;
}

// ---------------------------------------------------------------------------
// Manifest

void record_run(const fs::path& out, std::uint64_t config_hash, const std::string& run, std::uint64_t seed,
                const std::vector<fs::path>& files, const std::map<std::string, double>& seconds) {
  const fs::path path = out / "manifest.json";
  ojson manifest;
  if (fs::exists(path)) {
    try {
      manifest = ojson::parse(read_text(path));
    } catch (const nlohmann::json::exception&) {
      manifest = ojson::object();
    }
  }
  const std::string hash = hex64(config_hash);
  if (!manifest.contains("config_hash") || manifest["config_hash"] != hash) {
    manifest = ojson::object();
    manifest["config_hash"] = hash;
    manifest["runs"] = ojson::object();
  }
  ojson entry;
  entry["seed"] = seed;
  std::set<std::string> unique;
  for (const auto& f : files) unique.insert(fs::relative(f, out).generic_string());
  entry["files"] = std::vector<std::string>(unique.begin(), unique.end());
  ojson secs = ojson::object();
  for (const auto& [phase, s] : seconds) secs[phase] = s;
  entry["seconds"] = secs;
  manifest["runs"][run] = entry;
  write_text(path, manifest.dump(2) + "\n");
}

}  // namespace sani
