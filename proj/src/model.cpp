#include "sani/model.hpp"

#include "sani/errors.hpp"
#include "sani/rng.hpp"

namespace sani {

std::string_view to_string(Variant v) { return v == Variant::MLM ? "MLM" : "CLM"; }

Variant variant_from_string(std::string_view s) {
  if (s == "MLM") return Variant::MLM;
  if (s == "CLM") return Variant::CLM;
  throw Error(ErrorCode::ConfigError, "unknown model variant '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigError, "model config: " + m); };
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0) {
    fail("dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (max_seq < 2) fail("max_seq must be >= 2");
  if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecial)) fail("vocab_size must exceed the special tokens");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = std::string(to_string(variant));
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_model"] = d_model;
  j["d_ff"] = d_ff;
  j["max_seq"] = max_seq;
  j["vocab_size"] = vocab_size;
  j["seed"] = seed;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.vocab_size = j.value("vocab_size", std::size_t{0});
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("model config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

std::size_t ModelParams::add(std::string name, std::vector<std::size_t> shape) {
  tensors_.emplace_back(std::move(shape));
  names_.push_back(std::move(name));
  return tensors_.size() - 1;
}

ModelParams ModelParams::shaped(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.cfg_ = cfg;
  const std::size_t d = cfg.d_model;
  p.tok_emb_ = p.add("tok_emb", {cfg.vocab_size, d});
  p.pos_emb_ = p.add("pos_emb", {cfg.max_seq, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    BlockIndex b{};
    b.ln1_gain = p.add(pre + "ln1.gain", {d});
    b.ln1_bias = p.add(pre + "ln1.bias", {d});
    b.wq = p.add(pre + "attn.q.weight", {d, d});
    b.bq = p.add(pre + "attn.q.bias", {d});
    b.wk = p.add(pre + "attn.k.weight", {d, d});
    b.bk = p.add(pre + "attn.k.bias", {d});
    b.wv = p.add(pre + "attn.v.weight", {d, d});
    b.bv = p.add(pre + "attn.v.bias", {d});
    b.wo = p.add(pre + "attn.o.weight", {d, d});
    b.bo = p.add(pre + "attn.o.bias", {d});
    b.ln2_gain = p.add(pre + "ln2.gain", {d});
    b.ln2_bias = p.add(pre + "ln2.bias", {d});
    b.ff1_w = p.add(pre + "ff1.weight", {cfg.d_ff, d});
    b.ff1_b = p.add(pre + "ff1.bias", {cfg.d_ff});
    b.ff2_w = p.add(pre + "ff2.weight", {d, cfg.d_ff});
    b.ff2_b = p.add(pre + "ff2.bias", {d});
    p.blocks_.push_back(b);
  }
  p.lnf_gain_ = p.add("final_ln.gain", {d});
  p.lnf_bias_ = p.add("final_ln.bias", {d});
  p.head_w_ = p.add("head.weight", {cfg.vocab_size, d});
  p.head_b_ = p.add("head.bias", {cfg.vocab_size});
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg) {
  ModelParams p = shaped(cfg);
  Rng rng(derive_seed(cfg.seed, 0x1417));
  for (std::size_t i = 0; i < p.tensors_.size(); ++i) {
    Tensor& t = p.tensors_[i];
    const std::string& name = p.names_[i];
    if (name.ends_with(".gain")) {
      t.fill(1.0);
    } else if (t.rank() == 2) {
      for (auto& x : t.data) x = rng.normal(0.0, 0.02);
    }
  }
  return p;
}

std::optional<std::size_t> ModelParams::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

Tensor& ModelParams::at(std::string_view name) {
  auto i = find(name);
  if (!i) throw Error(ErrorCode::ConfigError, "no parameter named '" + std::string(name) + "'");
  return tensors_[*i];
}

const Tensor& ModelParams::at(std::string_view name) const {
  auto i = find(name);
  if (!i) throw Error(ErrorCode::ConfigError, "no parameter named '" + std::string(name) + "'");
  return tensors_[*i];
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------

BoundParams bind(Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.params = &params;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) b.vars.push_back(tape.param(params.tensors()[i], i));
  return b;
}

Var encode(Tape& tape, const BoundParams& bound, std::span<const TokenId> ids, AttentionMode mode) {
  const ModelParams& p = *bound.params;
  const ModelConfig& cfg = p.config();
  if (ids.empty()) throw Error(ErrorCode::EmptyDocument, "empty input sequence");
  if (ids.size() > cfg.max_seq) {
    throw Error(ErrorCode::SequenceTooLong,
                std::to_string(ids.size()) + " tokens exceed max_seq " + std::to_string(cfg.max_seq));
  }
  std::vector<TokenId> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i);
  Var x = add(tape, embed(tape, ids, bound[p.tok_emb()]), embed(tape, positions, bound[p.pos_emb()]));
  const bool causal = mode == AttentionMode::Causal;
  for (const BlockIndex& b : p.blocks()) {
    Var h = layer_norm(tape, x, bound[b.ln1_gain], bound[b.ln1_bias]);
    Var q = linear(tape, h, bound[b.wq], bound[b.bq]);
    Var k = linear(tape, h, bound[b.wk], bound[b.bk]);
    Var v = linear(tape, h, bound[b.wv], bound[b.bv]);
    Var a = attention(tape, q, k, v, cfg.n_heads, causal);
    x = add(tape, x, linear(tape, a, bound[b.wo], bound[b.bo]));
    Var h2 = layer_norm(tape, x, bound[b.ln2_gain], bound[b.ln2_bias]);
    Var f = linear(tape, gelu(tape, linear(tape, h2, bound[b.ff1_w], bound[b.ff1_b])), bound[b.ff2_w], bound[b.ff2_b]);
    x = add(tape, x, f);
  }
  return layer_norm(tape, x, bound[p.final_ln_gain()], bound[p.final_ln_bias()]);
}

Var lm_head(Tape& tape, const BoundParams& bound, Var hidden) {
  const ModelParams& p = *bound.params;
  return linear(tape, hidden, bound[p.head_weight()], bound[p.head_bias()]);
}

Tensor forward(const ModelParams& params, std::span<const TokenId> ids, AttentionMode mode) {
  Tape tape(false);
  const BoundParams bound = bind(tape, params);
  const Var logits = lm_head(tape, bound, encode(tape, bound, ids, mode));
  return tape.value(logits);
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace sani
