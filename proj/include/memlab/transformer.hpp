#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "memlab/gradcheck.hpp"
#include "memlab/ops.hpp"

namespace memlab {

struct TransformerConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t layers = 2;  // 0 is allowed: embeddings straight into the head
  std::size_t heads = 4;
  std::size_t ffn_width = 0;  // 0 selects 4 * d_model
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;

  std::size_t ffn() const { return ffn_width == 0 ? 4 * d_model : ffn_width; }
  void validate() const;

  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults except
  // vocab_size, which is required.
  static TransformerConfig from_json(const nlohmann::json& doc);

  bool operator==(const TransformerConfig&) const = default;
};

// Pre-norm block. Linear maps are stored input x output.
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Decoder-only model with learned absolute positions and an output head tied
// to the token embedding. Copies share parameter storage; use clone() for an
// independent copy.
struct TransformerModel {
  TransformerConfig config;
  Tensor token_embedding;     // V x d
  Tensor position_embedding;  // S x d
  std::vector<BlockParams> blocks;
  Tensor final_gain, final_bias;

  // Weights ~ normal(0, 0.02) from config.seed; gains 1, biases 0.
  static TransformerModel init(const TransformerConfig& config);

  // Fixed declaration order, also used by checkpoints and the optimizer.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  TransformerModel clone() const;
};

// `batch` sequences padded with PAD to `seq_len`, stored back to back. A
// packed batch drops the padding; seq_len is then the longest length.
struct TokenBatch {
  std::vector<TokenId> tokens;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> lengths;
  bool packed = false;

  static TokenBatch single(std::span<const TokenId> tokens);
  static TokenBatch pack(const std::vector<std::vector<TokenId>>& sequences);
  static TokenBatch concat(const std::vector<std::vector<TokenId>>& sequences);

  // Row of position 0 of sequence b in the forward output.
  std::size_t row_offset(std::size_t b) const;
};

// Optional taps on the residual stream during a forward pass.
struct ForwardCapture {
  Tensor base;                     // token + position embedding
  std::vector<Tensor> increments;  // attention, ffn, attention, ffn, ...
  Tensor hidden;                   // residual stream before the final norm
  std::vector<std::vector<RowMatrix>> attention;  // [layer][batch * heads]
};

// Logits [batch * seq_len x V], or one row per token when packed. Rows past a
// sequence's length are computed but meaningless. Throws ValueError for overlong input or bad token ids.
Tensor model_forward(const TransformerModel& model, const TokenBatch& batch,
                     ForwardCapture* capture = nullptr);
Tensor model_forward(const TransformerModel& model, std::span<const TokenId> tokens);

struct SublayerContribution {
  std::size_t layer = 0;
  std::string kind;  // "attention" or "ffn"
  RowMatrix value;   // T x d
  double norm = 0.0;
};

struct DecompositionReport {
  RowMatrix base;  // T x d
  std::vector<SublayerContribution> contributions;
  RowMatrix hidden;  // T x d
  double relative_residual = 0.0;

  // Norms only; the matrices are left out.
  nlohmann::json to_json() const;
};

DecompositionReport decompose_residual(const TransformerModel& model, std::span<const TokenId> tokens);

// [layer][head] T x T maps, rows stochastic over positions <= row.
std::vector<std::vector<RowMatrix>> attention_maps(const TransformerModel& model,
                                                   std::span<const TokenId> tokens);

// Overwrites every parameter with uniform(-scale, scale) draws, moving the
// model away from the near-linear regime of init().
void randomize_parameters(TransformerModel& model, std::uint64_t seed, double scale);

// Central differences on the next-token cross entropy of `tokens`, over every
// parameter.
GradCheckResult check_model_gradients(const TransformerModel& model, std::span<const TokenId> tokens,
                                      double eps = 1e-5);

// Appends argmax tokens (ties to the lowest id) until `stop` is emitted, which
// is kept, or max_new tokens were added. prompt.size() + max_new must fit the
// context.
std::vector<TokenId> greedy_decode(const TransformerModel& model, std::span<const TokenId> prompt,
                                   std::size_t max_new, TokenId stop);

// Same result as greedy_decode, but first scores `expected` continuation in a
// single pass and only decodes step by step after the first disagreement.
std::vector<TokenId> greedy_decode_guided(const TransformerModel& model, std::span<const TokenId> prompt,
                                          std::span<const TokenId> expected, std::size_t max_new,
                                          TokenId stop);

// Binary checkpoint: magic, version, JSON header (config, metadata, tensor
// manifest), then little-endian f64 tensors in declaration order.
std::string checkpoint_bytes(const TransformerModel& model, const nlohmann::json& metadata);
void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct Checkpoint {
  TransformerModel model;
  nlohmann::json metadata;
};

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source = "<memory>");
Checkpoint load_checkpoint(const std::string& path);

}  // namespace memlab
