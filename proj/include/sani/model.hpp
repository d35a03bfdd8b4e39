#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sani/adam.hpp"
#include "sani/corpus.hpp"
#include "sani/tensor.hpp"

namespace sani {

enum class Variant { MLM, CLM };
enum class AttentionMode { Bidirectional, Causal };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);

inline AttentionMode attention_mode(Variant v) {
  return v == Variant::MLM ? AttentionMode::Bidirectional : AttentionMode::Causal;
}

struct ModelConfig {
  Variant variant = Variant::MLM;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t max_seq = 64;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

/// Indices of one transformer block's tensors in the parameter enumeration.
struct BlockIndex {
  std::size_t ln1_gain, ln1_bias;
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t ln2_gain, ln2_bias;
  std::size_t ff1_w, ff1_b, ff2_w, ff2_b;
};

/// All trainable tensors in a fixed, named order. The LM head ("head.weight"
/// [vocab, d_model] and "head.bias" [vocab]) is always last.
class ModelParams {
 public:
  ModelParams() = default;

  /// Deterministic init from cfg.seed: weights ~ N(0, 0.02), layer-norm
  /// gains 1, every bias 0.
  static ModelParams init(const ModelConfig& cfg);

  /// Zero-filled tensors of the right shapes (used when loading).
  static ModelParams shaped(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  std::span<Tensor> tensors() { return tensors_; }
  std::span<const Tensor> tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }

  std::optional<std::size_t> find(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  std::size_t tok_emb() const { return tok_emb_; }
  std::size_t pos_emb() const { return pos_emb_; }
  const std::vector<BlockIndex>& blocks() const { return blocks_; }
  std::size_t final_ln_gain() const { return lnf_gain_; }
  std::size_t final_ln_bias() const { return lnf_bias_; }
  std::size_t head_weight() const { return head_w_; }
  std::size_t head_bias() const { return head_b_; }

  std::size_t parameter_count() const;

  bool operator==(const ModelParams& o) const { return cfg_ == o.cfg_ && tensors_ == o.tensors_; }

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape);

  ModelConfig cfg_;
  std::vector<Tensor> tensors_;
  std::vector<std::string> names_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_gain_ = 0, lnf_bias_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<BlockIndex> blocks_;
};

/// Parameters bound as leaves of one tape.
struct BoundParams {
  const ModelParams* params = nullptr;
  std::vector<Var> vars;

  Var operator[](std::size_t i) const { return vars[i]; }
};

BoundParams bind(Tape& tape, const ModelParams& params);

/// Final-layer-normed hidden states [len, d_model]. Throws SequenceTooLong.
Var encode(Tape& tape, const BoundParams& bound, std::span<const TokenId> ids, AttentionMode mode);

/// LM head over hidden rows: [rows, vocab].
Var lm_head(Tape& tape, const BoundParams& bound, Var hidden);

/// Logits for every position, [len, vocab]. Pure in (params, ids, mode).
Tensor forward(const ModelParams& params, std::span<const TokenId> ids, AttentionMode mode);

/// Index of the row maximum (first on ties).
std::size_t argmax(std::span<const double> row);

struct Checkpoint {
  ModelParams params;
  std::optional<AdamState> adam;
  std::uint64_t epoch = 0;
  std::string rng_state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian: "SANI", u32 version, u32 json length + json, u32 record
/// count, records {u32 name length + name, u32 rank, u64 dims[], f64
/// data[]}, then a CRC-64/XZ over everything before it.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);

/// Throws CorruptFile, FormatVersionMismatch, or ConfigError when expected
/// is given and the stored variant differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expected = std::nullopt);
Checkpoint deserialize_checkpoint(std::string_view bytes, std::optional<Variant> expected = std::nullopt);

}  // namespace sani
