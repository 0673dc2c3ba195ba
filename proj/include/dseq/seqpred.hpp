#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dseq/regionsel.hpp"
#include "dseq/vit.hpp"

DSEQ_BEGIN_NAMESPACE

/// Order in which regions are revealed to the predictor.
///   sequential: descending discriminative score (RegionSet order)
///   flat:       every region predicted from the first region alone
///   random:     uniformly shuffled
///   spatial:    regions sorted by their centre, row first
/// In every scheme the residual region is predicted last.
enum class OrderScheme { Sequential, Flat, Random, Spatial };

const char* to_string(OrderScheme scheme);
OrderScheme parse_order_scheme(const std::string& name);

/// Permutation of region indices for `scheme`. Only the random scheme draws
/// from `rng`.
std::vector<std::size_t> order_permutation(const RegionSet& regions, OrderScheme scheme, Rng& rng);

struct StepBatch {
  std::size_t step = 0;                        // 1-based k
  std::vector<std::size_t> context_regions;   // region indices visible at step k
  std::size_t target_region = 0;
  std::vector<int> context_positions;          // visible cells in encoder order
  std::vector<int> target_positions;
  Tensor predicted;  // [|target|, D]
  Tensor target;     // [|target|, D], gradient-isolated
};

/// Full-visibility target-encoder forward without gradient recording. Returns
/// the final tokens (row 0 CLS, row 1 + cell a patch); `block_outputs`, when
/// given, receives every block's output.
Tensor target_embeddings(const Tensor& image, const EncoderParams& target, const ViTConfig& cfg,
                         std::vector<Tensor>* block_outputs = nullptr);

/// For each step k = 1..N-1, encodes the union of the first k regions of the
/// order (the first region only under the flat scheme) with the context
/// encoder and predicts the embeddings of region k + 1.
std::vector<StepBatch> sequential_predict(const Tensor& image, const RegionSet& regions, OrderScheme scheme,
                                          const Model& model, Rng& rng, const Tensor& target_tokens);

/// Same, computing the target tokens itself.
std::vector<StepBatch> sequential_predict(const Tensor& image, const RegionSet& regions, OrderScheme scheme,
                                          const Model& model, Rng& rng);

/// x^2 / 2 below delta in magnitude, delta * (|x| - delta / 2) above.
double huber_elem(double x, double delta);

/// Mean over steps of the mean elementwise Huber loss of predicted - target.
Tensor dseq_loss(const std::vector<StepBatch>& steps, double delta);

/// Per-step mean Huber loss values.
std::vector<double> step_losses(const std::vector<StepBatch>& steps, double delta);

DSEQ_END_NAMESPACE
