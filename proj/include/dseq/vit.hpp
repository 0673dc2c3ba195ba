#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dseq/rng.hpp"
#include "dseq/tensor.hpp"

DSEQ_BEGIN_NAMESPACE

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t predictor_depth = 2;
  std::size_t predictor_dim = 32;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_count() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio); }
  std::size_t predictor_hidden_dim() const {
    return static_cast<std::size_t>(static_cast<double>(predictor_dim) * mlp_ratio);
  }

  /// Throws ConfigError on inconsistent sizes.
  void validate() const;
};

/// Position marker for the class token in TokenSequence::positions.
inline constexpr int kClsPosition = -1;

/// Tokens with the grid cell each row came from. Cells are row-major indices
/// row * grid + col.
struct TokenSequence {
  Tensor tokens;               // [T, D]
  std::vector<int> positions;  // length T, kClsPosition for the class token
  std::size_t grid = 0;

  std::size_t size() const { return positions.size(); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay;  // receives weight decay
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct EncoderParams {
  Tensor patch_weight, patch_bias;  // [P, D], [D]
  Tensor pos_embed;                 // [h*w, D]
  Tensor cls_token, cls_pos;        // [1, D] each
  std::vector<BlockParams> blocks;
  Tensor norm_gain, norm_bias;
};

struct PredictorParams {
  Tensor embed_weight, embed_bias;  // [D, Dp], [Dp]
  Tensor mask_token;                // [1, Dp], shared by every target slot
  Tensor pos_embed;                 // [h*w, Dp]
  Tensor cls_pos;                   // [1, Dp]
  std::vector<BlockParams> blocks;
  Tensor norm_gain, norm_bias;
  Tensor out_weight, out_bias;  // [Dp, D], [D]
};

EncoderParams init_encoder(const ViTConfig& cfg, Rng& rng);
PredictorParams init_predictor(const ViTConfig& cfg, Rng& rng);

/// Deep copy; the copy's tensors do not require grad.
EncoderParams clone(const EncoderParams& params);

std::vector<NamedTensor> named_parameters(const EncoderParams& params, const std::string& prefix);
std::vector<NamedTensor> named_parameters(const PredictorParams& params, const std::string& prefix);

/// Context encoder, EMA target encoder and predictor.
struct Model {
  ViTConfig cfg;
  EncoderParams context;
  EncoderParams target;
  PredictorParams predictor;

  /// Target starts as an exact copy of the context encoder.
  static Model init(const ViTConfig& cfg, std::uint64_t seed);
  std::vector<NamedTensor> trainable() const;
  std::vector<NamedTensor> all() const;
};

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor block_forward(const Tensor& x, const BlockParams& block, std::size_t heads);

/// Projects every patch of image [C, H, W], adds positional embeddings and
/// prepends the class token. Row 0 is CLS, row 1 + cell is patch `cell`.
TokenSequence patchify(const Tensor& image, const EncoderParams& params, const ViTConfig& cfg);

/// Runs the encoder blocks over the class token plus the `visible` patches
/// only (all patches when nullopt). Invisible patches are dropped before the
/// first block. When `block_outputs` is given it receives the residual stream
/// after each block.
TokenSequence encode(const TokenSequence& seq, const std::optional<std::vector<int>>& visible,
                     const EncoderParams& params, const ViTConfig& cfg, std::vector<Tensor>* block_outputs = nullptr);

/// Predicts embeddings at `target_positions` from the context tokens: one
/// shared mask token plus a positional embedding per target, joint attention
/// with the context, output projected back to the encoder width. Returns
/// [|targets|, D] in the order of `target_positions`.
Tensor predict(const TokenSequence& context, const std::vector<int>& target_positions, const PredictorParams& params,
               const ViTConfig& cfg);

DSEQ_END_NAMESPACE
