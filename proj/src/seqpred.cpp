#include "dseq/seqpred.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dseq/ops.hpp"

DSEQ_BEGIN_NAMESPACE

const char* to_string(OrderScheme scheme) {
  switch (scheme) {
    case OrderScheme::Sequential:
      return "sequential";
    case OrderScheme::Flat:
      return "flat";
    case OrderScheme::Random:
      return "random";
    case OrderScheme::Spatial:
      return "spatial";
  }
  return "?";
}

OrderScheme parse_order_scheme(const std::string& name) {
  for (auto s : {OrderScheme::Sequential, OrderScheme::Flat, OrderScheme::Random, OrderScheme::Spatial}) {
    if (name == to_string(s)) return s;
  }
  throw ConfigError("unknown order scheme '" + name + "' (expected sequential, flat, random or spatial)");
}

std::vector<std::size_t> order_permutation(const RegionSet& regions, OrderScheme scheme, Rng& rng) {
  const std::size_t n = regions.size();
  if (n < 2) throw ConfigError("order_permutation: need at least 2 regions");
  std::vector<std::size_t> perm(n - 1);
  std::iota(perm.begin(), perm.end(), 0);
  if (scheme == OrderScheme::Random) {
    rng.shuffle(perm);
  } else if (scheme == OrderScheme::Spatial) {
    std::vector<std::pair<double, double>> centre(n - 1);
    for (std::size_t k = 0; k + 1 < n; ++k) {
      double r = 0, c = 0;
      for (int cell : regions.regions[k]) {
        r += static_cast<double>(static_cast<std::size_t>(cell) / regions.cols);
        c += static_cast<double>(static_cast<std::size_t>(cell) % regions.cols);
      }
      const auto size = static_cast<double>(regions.regions[k].size());
      centre[k] = {r / size, c / size};
    }
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return centre[a] < centre[b]; });
  }
  perm.push_back(n - 1);
  return perm;
}

Tensor target_embeddings(const Tensor& image, const EncoderParams& target, const ViTConfig& cfg,
                         std::vector<Tensor>* block_outputs) {
  NoGradGuard guard;
  return encode(patchify(image, target, cfg), std::nullopt, target, cfg, block_outputs).tokens;
}

std::vector<StepBatch> sequential_predict(const Tensor& image, const RegionSet& regions, OrderScheme scheme,
                                          const Model& model, Rng& rng, const Tensor& target_tokens) {
  check_partition(regions);
  const ViTConfig& cfg = model.cfg;
  if (regions.rows != cfg.grid() || regions.cols != cfg.grid()) {
    throw ShapeError("sequential_predict: region grid does not match the model grid");
  }
  if (target_tokens.rank() != 2 || target_tokens.dim(0) != cfg.patch_count() + 1) {
    throw ShapeError("sequential_predict: target tokens must be [1 + cells, D], got " +
                     to_string(target_tokens.shape()));
  }
  const std::vector<std::size_t> order = order_permutation(regions, scheme, rng);
  const TokenSequence seq = patchify(image, model.context, cfg);

  std::vector<StepBatch> steps;
  TokenSequence context;
  for (std::size_t k = 1; k < order.size(); ++k) {
    StepBatch step;
    step.step = k;
    if (scheme == OrderScheme::Flat) {
      step.context_regions = {order[0]};
    } else {
      step.context_regions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    }
    for (std::size_t r : step.context_regions) {
      const auto& cells = regions.regions[r];
      step.context_positions.insert(step.context_positions.end(), cells.begin(), cells.end());
    }
    step.target_region = order[k];
    step.target_positions = regions.regions[order[k]];

    // Flat steps all see the same context, so it is encoded once.
    if (scheme != OrderScheme::Flat || steps.empty()) {
      context = encode(seq, step.context_positions, model.context, cfg);
    }
    step.predicted = predict(context, step.target_positions, model.predictor, cfg);

    std::vector<std::size_t> rows;
    for (int cell : step.target_positions) rows.push_back(static_cast<std::size_t>(cell) + 1);
    {
      NoGradGuard guard;
      step.target = gather_rows(target_tokens, rows);
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

std::vector<StepBatch> sequential_predict(const Tensor& image, const RegionSet& regions, OrderScheme scheme,
                                          const Model& model, Rng& rng) {
  return sequential_predict(image, regions, scheme, model, rng, target_embeddings(image, model.target, model.cfg));
}

double huber_elem(double x, double delta) {
  const double a = std::abs(x);
  return a < delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

Tensor dseq_loss(const std::vector<StepBatch>& steps, double delta) {
  if (steps.empty()) throw ConfigError("dseq_loss: no prediction steps");
  Tensor total;
  for (const auto& s : steps) {
    if (s.predicted.shape() != s.target.shape()) {
      throw ShapeError("dseq_loss: step " + std::to_string(s.step) + " predicted " + to_string(s.predicted.shape()) +
                       " vs target " + to_string(s.target.shape()));
    }
    Tensor l = mean(huber(sub(s.predicted, s.target), static_cast<Real>(delta)));
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, Real(1) / static_cast<Real>(steps.size()));
}

std::vector<double> step_losses(const std::vector<StepBatch>& steps, double delta) {
  NoGradGuard guard;
  std::vector<double> out;
  for (const auto& s : steps) out.push_back(mean(huber(sub(s.predicted, s.target), static_cast<Real>(delta))).item());
  return out;
}

DSEQ_END_NAMESPACE
