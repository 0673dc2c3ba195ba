#include "dseq/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <string>

DSEQ_BEGIN_NAMESPACE

std::size_t default_saliency_layer(std::size_t depth) {
  const auto layer = static_cast<std::size_t>(std::lround(2.0 * static_cast<double>(depth) / 3.0));
  return std::max<std::size_t>(1, layer);
}

SaliencyMap saliency_from_tokens(const Tensor& tokens, const std::vector<int>& positions, std::size_t grid,
                                 Similarity similarity) {
  if (tokens.rank() != 2 || tokens.dim(0) != positions.size() || positions.empty() ||
      positions[0] != kClsPosition) {
    throw ShapeError("saliency: expected [T, D] tokens with the class token in row 0, got " +
                     to_string(tokens.shape()));
  }
  const std::size_t d = tokens.dim(1);
  auto x = tokens.data();
  auto norm = [&](std::size_t r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += double(x[r * d + j]) * double(x[r * d + j]);
    return std::sqrt(s);
  };

  SaliencyMap map;
  map.rows = map.cols = grid;
  map.values.assign(grid * grid, 0.0);
  const double cls_norm = norm(0);
  for (std::size_t r = 1; r < positions.size(); ++r) {
    double dot = 0;
    for (std::size_t j = 0; j < d; ++j) dot += double(x[j]) * double(x[r * d + j]);
    double value = dot;
    if (similarity == Similarity::Cosine) {
      const double denom = cls_norm * norm(r);
      value = denom > 0 ? dot / denom : 0.0;
    }
    map.values[static_cast<std::size_t>(positions[r])] = value;
  }
  return map;
}

SaliencyMap attention_map(const Tensor& image, const EncoderParams& params, const ViTConfig& cfg, std::size_t layer,
                          Similarity similarity) {
  if (layer < 1 || layer > params.blocks.size()) {
    throw ConfigError("attention_map: layer " + std::to_string(layer) + " outside 1.." +
                      std::to_string(params.blocks.size()));
  }
  NoGradGuard guard;
  std::vector<Tensor> blocks;
  TokenSequence seq = patchify(image, params, cfg);
  encode(seq, std::nullopt, params, cfg, &blocks);
  SaliencyMap map = saliency_from_tokens(blocks[layer - 1], seq.positions, seq.grid, similarity);
  map.source_layer = layer;
  return map;
}

std::vector<std::uint8_t> local_maxima(const SaliencyMap& map, std::size_t window) {
  if (window < 3 || window % 2 == 0) {
    throw ConfigError("local_maxima: window must be odd and at least 3, got " + std::to_string(window));
  }
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  const auto rows = static_cast<std::ptrdiff_t>(map.rows), cols = static_cast<std::ptrdiff_t>(map.cols);
  std::vector<std::uint8_t> out(map.size(), 0);
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
      double best = map.values[static_cast<std::size_t>(r * cols + c)];
      for (std::ptrdiff_t rr = std::max<std::ptrdiff_t>(0, r - half); rr <= std::min(rows - 1, r + half); ++rr) {
        for (std::ptrdiff_t cc = std::max<std::ptrdiff_t>(0, c - half); cc <= std::min(cols - 1, c + half); ++cc) {
          best = std::max(best, map.values[static_cast<std::size_t>(rr * cols + cc)]);
        }
      }
      out[static_cast<std::size_t>(r * cols + c)] = map.values[static_cast<std::size_t>(r * cols + c)] == best;
    }
  }
  return out;
}

DSEQ_END_NAMESPACE
