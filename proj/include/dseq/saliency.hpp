#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dseq/vit.hpp"

DSEQ_BEGIN_NAMESPACE

/// Per-cell saliency over the patch grid, row-major.
struct SaliencyMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::size_t source_layer = 0;  // 1-based block index, 0 when not from a model
  std::uint64_t image_id = 0;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t size() const { return values.size(); }
};

enum class Similarity { Cosine, Dot };

/// round(2/3 * depth), at least 1.
std::size_t default_saliency_layer(std::size_t depth);

/// Similarity between row 0 (the class token) and every patch row of a block
/// output whose positions are given, assembled into a grid x grid map.
/// Cells missing from `positions` are left at 0.
SaliencyMap saliency_from_tokens(const Tensor& tokens, const std::vector<int>& positions, std::size_t grid,
                                 Similarity similarity = Similarity::Cosine);

/// Runs the encoder over the full image without recording gradients and
/// measures class-token/patch similarity at the output of block `layer`.
SaliencyMap attention_map(const Tensor& image, const EncoderParams& params, const ViTConfig& cfg, std::size_t layer,
                          Similarity similarity = Similarity::Cosine);

/// 1 where a cell equals the maximum of the window x window neighbourhood
/// around it (clipped at the border). `window` must be odd and >= 3.
std::vector<std::uint8_t> local_maxima(const SaliencyMap& map, std::size_t window);

DSEQ_END_NAMESPACE
