#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sani/errors.hpp"
#include "sani/harness.hpp"
#include "sani/report.hpp"

namespace {

using namespace sani;
namespace fs = std::filesystem;

void print_rows(const std::vector<MetricsRecord>& rows) {
  std::cout << metrics_csv(rows);
}

int gen_corpus(const fs::path& config, const std::string& out_dir) {
  const GenConfig cfg = load_gen_config(config);
  fs::path dir = out_dir.empty() ? config.parent_path() : fs::path(out_dir);
  if (dir.empty()) dir = ".";
  const GeneratedCorpus gen = generate_synthetic_corpus(cfg);
  fs::create_directories(dir);
  write_generated(gen, dir);
  std::size_t words = 0;
  for (const auto& d : gen.docs) words += d.num_words();
  std::printf("wrote %zu documents (%zu words) to %s\n", gen.docs.size(), words, dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sani: erase-and-repair unlearning lab for small transformers"};
  app.require_subcommand(1);

  std::string config, curve, from, strategy, target = "identifiers", ckpt, out_dir, gen_out;
  std::vector<std::uint64_t> seeds;
  bool partial = false;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic annotated corpus and its blacklists");
  gen->add_option("-c,--config", config, "generator config (JSON)")->required();
  gen->add_option("-o,--out", gen_out, "output directory (default: the config's directory)");

  auto* ft = app.add_subcommand("finetune", "fine-tune the base model along one curve");
  ft->add_option("-c,--config", config, "experiment config (JSON)")->required();
  ft->add_option("--curve", curve, "mlm|mlmA|ppmlm|clm|clmA|ppclm")->required();

  auto* san = app.add_subcommand("sanitize", "erase and repair a fine-tuned checkpoint");
  san->add_option("-c,--config", config, "experiment config (JSON)")->required();
  san->add_option("--from", from, "checkpoint to sanitize")->required();
  san->add_option("--strategy", strategy, "sani|pruning|repair-only")->required();
  san->add_option("--target", target, "blacklist to forget: identifiers|conf");
  san->add_option("--seed", seeds, "sanitization seed(s); default: every seed in the config");

  auto* ev = app.add_subcommand("eval", "measure privacy, regurgitation and utility of a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("-c,--config", config, "experiment config (JSON)")->required();
  ev->add_option("--target", target, "blacklist counted as events: identifiers|conf");

  auto* rep = app.add_subcommand("report", "consolidate stored runs into per-figure CSVs");
  rep->add_option("-d,--dir", out_dir, "experiment output directory")->required();
  rep->add_flag("--partial", partial, "skip figures whose inputs are missing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) return gen_corpus(config, gen_out);
    if (*rep) {
      for (const auto& p : run_report(out_dir, partial)) std::cout << p.string() << "\n";
      return 0;
    }
    const ExperimentConfig cfg = ExperimentConfig::load(config);
    if (*ft) {
      const Curve c = curve_from_string(curve);
      const Experiment exp = load_experiment(cfg);
      print_rows(run_finetune(exp, c));
    } else if (*san) {
      const Strategy s = strategy_from_string(strategy);
      const Target t = target_from_string(target);
      const Experiment exp = load_experiment(cfg);
      if (seeds.empty()) seeds = cfg.seeds;
      for (std::uint64_t seed : seeds) print_rows(run_sanitize(exp, from, s, t, seed).records);
    } else if (*ev) {
      const Target t = target_from_string(target);
      const Experiment exp = load_experiment(cfg);
      print_rows({run_eval(exp, ckpt, t).record});
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "sani: " << e.what() << "\n";
    return e.code() == ErrorCode::ConfigError ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "sani: " << e.what() << "\n";
    return 2;
  }
}
