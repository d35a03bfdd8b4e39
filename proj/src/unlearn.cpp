#include "sani/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sani/errors.hpp"

namespace sani {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::SANI: return "sani";
    case Strategy::PRUNING: return "pruning";
    case Strategy::REPAIR_ONLY: return "repair-only";
  }
  return "?";
}

Strategy strategy_from_string(std::string_view s) {
  if (s == "sani") return Strategy::SANI;
  if (s == "pruning") return Strategy::PRUNING;
  if (s == "repair-only") return Strategy::REPAIR_ONLY;
  throw Error(ErrorCode::ConfigError, "unknown strategy '" + std::string(s) + "'");
}

std::string_view to_string(ErasureKind k) {
  switch (k) {
    case ErasureKind::SANI: return "sani";
    case ErasureKind::PRUNING: return "pruning";
    case ErasureKind::NONE: return "none";
  }
  return "?";
}

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Finetune: return "finetune";
    case Phase::Erase: return "erase";
    case Phase::Repair: return "repair";
  }
  return "?";
}

Phase phase_from_string(std::string_view s) {
  if (s == "finetune") return Phase::Finetune;
  if (s == "erase") return Phase::Erase;
  if (s == "repair") return Phase::Repair;
  throw Error(ErrorCode::ConfigError, "unknown phase '" + std::string(s) + "'");
}

std::size_t ErasureReport::total_zeroed() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.zeroed;
  return n;
}

nlohmann::ordered_json ErasureReport::to_json() const {
  nlohmann::ordered_json j;
  j["strategy"] = std::string(to_string(kind));
  j["seed"] = seed;
  j["affected"] = affected;
  j["total_zeroed"] = total_zeroed();
  auto layers_json = nlohmann::ordered_json::array();
  for (const auto& l : layers) {
    nlohmann::ordered_json lj;
    lj["parameter"] = l.parameter;
    lj["units"] = l.units;
    lj["protected"] = l.protected_units;
    lj["zeroed"] = l.zeroed;
    lj["zeroed_units"] = l.zeroed_units;
    layers_json.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers_json);
  return j;
}

namespace {

void zero_unit(Tensor& weight, Tensor* bias, std::size_t unit) {
  for (double& x : weight.row(unit)) x = 0.0;
  if (bias) bias->data[unit] = 0.0;
}

}  // namespace

ErasureReport erase_last_layer(ModelParams& params, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::FractionOutOfRange, "erasure fraction " + std::to_string(fraction));
  }
  Tensor& w = params.tensors()[params.head_weight()];
  Tensor& b = params.tensors()[params.head_bias()];
  const std::size_t units = w.rows();
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(units) - 1e-9));

  ErasureReport report;
  report.kind = ErasureKind::SANI;
  report.seed = seed;
  LayerErasure layer;
  layer.parameter = params.names()[params.head_weight()];
  layer.units = units;
  Rng rng(derive_seed(seed, 0xe7a5e));
  layer.zeroed_units = rng.sample(units, k);
  std::sort(layer.zeroed_units.begin(), layer.zeroed_units.end());
  for (std::size_t u : layer.zeroed_units) zero_unit(w, &b, u);
  layer.zeroed = layer.zeroed_units.size();
  if (layer.zeroed > 0) report.affected = {params.names()[params.head_weight()], params.names()[params.head_bias()]};
  report.layers.push_back(std::move(layer));
  return report;
}

std::size_t pruning_zero_count(std::size_t units, double protect_fraction, double reset_fraction) {
  const auto kept = std::min(units, static_cast<std::size_t>(std::ceil(protect_fraction * static_cast<double>(units) - 1e-9)));
  return static_cast<std::size_t>(std::floor(reset_fraction * static_cast<double>(units - kept) + 1e-9));
}

ErasureReport erase_pruning(ModelParams& params, double protect_fraction, double reset_fraction, std::uint64_t seed) {
  for (double f : {protect_fraction, reset_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) throw Error(ErrorCode::FractionOutOfRange, "pruning fraction " + std::to_string(f));
  }
  ErasureReport report;
  report.kind = ErasureKind::PRUNING;
  report.seed = seed;
  Rng rng(derive_seed(seed, 0x9a0e));

  const auto& names = params.names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i == params.tok_emb() || i == params.pos_emb()) continue;
    Tensor& w = params.tensors()[i];
    if (w.rank() != 2) continue;
    // The bias shares the weight's prefix ("x.weight" -> "x.bias").
    Tensor* bias = nullptr;
    const std::string& name = names[i];
    std::string bias_name;
    if (name.ends_with(".weight")) {
      bias_name = name.substr(0, name.size() - 7) + ".bias";
      if (auto bi = params.find(bias_name)) bias = &params.tensors()[*bi];
    }

    const std::size_t units = w.rows();
    std::vector<double> norms(units);
    for (std::size_t u = 0; u < units; ++u) {
      double s = 0.0;
      for (double x : w.row(u)) s += x * x;
      norms[u] = std::sqrt(s);
    }
    std::vector<std::size_t> order(units);
    std::iota(order.begin(), order.end(), 0);
    // Descending by norm, ties by index, so the protected set is well defined.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
    const auto kept = std::min(units, static_cast<std::size_t>(std::ceil(protect_fraction * static_cast<double>(units) - 1e-9)));
    std::vector<std::size_t> remainder(order.begin() + static_cast<std::ptrdiff_t>(kept), order.end());
    std::sort(remainder.begin(), remainder.end());

    LayerErasure layer;
    layer.parameter = name;
    layer.units = units;
    layer.protected_units = kept;
    for (std::size_t j : rng.sample(remainder.size(), pruning_zero_count(units, protect_fraction, reset_fraction))) {
      layer.zeroed_units.push_back(remainder[j]);
    }
    std::sort(layer.zeroed_units.begin(), layer.zeroed_units.end());
    for (std::size_t u : layer.zeroed_units) zero_unit(w, bias, u);
    layer.zeroed = layer.zeroed_units.size();
    if (layer.zeroed > 0) {
      report.affected.push_back(name);
      if (bias) report.affected.push_back(bias_name);
    }
    report.layers.push_back(std::move(layer));
  }
  return report;
}

std::size_t UnlearnBudget::repair_epochs() const {
  const auto n = static_cast<std::size_t>(std::ceil(budget_fraction * static_cast<double>(finetune_epochs) - 1e-9));
  return std::max<std::size_t>(1, n);
}

std::vector<MetricsRecord> repair(ModelParams& params, const Corpus& train, const Blacklist& blacklist,
                                  const UnlearnBudget& budget, const RepairOptions& opts, const MetricsFn& metrics) {
  if (!privacy_preserving(opts.scheme)) {
    throw Error(ErrorCode::ConfigError, "repair needs a privacy-preserving scheme, got " +
                                            std::string(to_string(opts.scheme)));
  }
  if (variant_of(opts.scheme) != params.config().variant) {
    throw Error(ErrorCode::SchemeVariantMismatch, std::string(to_string(opts.scheme)) + " cannot repair a " +
                                                      std::string(to_string(params.config().variant)) + " model");
  }
  TrainSchedule schedule = opts.schedule;
  schedule.total_epochs = budget.repair_epochs();
  AdamState adam(params.tensors());
  std::vector<MetricsRecord> rows;
  for (std::size_t k = 0; k < schedule.total_epochs; ++k) {
    train_epoch(params, adam, train, blacklist, opts.scheme, schedule, k, derive_seed(opts.seed, 0x4e9a14));
    if (opts.on_epoch) opts.on_epoch(params, adam, k + 1);
    if (metrics) rows.push_back(metrics(params, opts.first_epoch + k + 1, Phase::Repair));
  }
  return rows;
}

SanitizeResult sanitize(ModelParams& params, const Corpus& train, const Blacklist& blacklist, Strategy strategy,
                        const UnlearnBudget& budget, const RepairOptions& opts, const MetricsFn& metrics) {
  SanitizeResult result;
  const std::uint64_t erase_seed = derive_seed(opts.seed, 0xe4a5e);
  switch (strategy) {
    case Strategy::SANI:
      result.erasure = erase_last_layer(params, 0.5, erase_seed);
      break;
    case Strategy::PRUNING:
      result.erasure = erase_pruning(params, 0.01, 0.20, erase_seed);
      break;
    case Strategy::REPAIR_ONLY:
      result.erasure.kind = ErasureKind::NONE;
      result.erasure.seed = erase_seed;
      break;
  }
  if (metrics) result.records.push_back(metrics(params, opts.first_epoch, Phase::Erase));
  auto rows = repair(params, train, blacklist, budget, opts, metrics);
  result.records.insert(result.records.end(), rows.begin(), rows.end());
  return result;
}

}  // namespace sani
