#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dseq/datagen.hpp"
#include "dseq/trainer.hpp"

DSEQ_BEGIN_NAMESPACE

/// Row-major n x d feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  const double* row(std::size_t r) const { return values.data() + r * cols; }
};

/// Concatenation of the mean-pooled patch tokens (CLS excluded) of the last
/// `last_blocks` target-encoder blocks, one row per sample. Uses all blocks
/// when the encoder is shallower.
FeatureMatrix probe_features(const EncoderParams& target, const ViTConfig& cfg,
                             const std::vector<SyntheticSample>& samples, std::size_t last_blocks = 4);

struct ProbeConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.01;
  std::vector<std::size_t> milestones{10, 20};  // lr *= gamma at each
  double gamma = 0.1;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0;
  std::vector<double> per_class_accuracy;
  double train_accuracy = 0;
  std::size_t epochs = 0;
  std::string config_hash;
};

/// Trains a softmax linear classifier on standardized features with SGD and
/// a multi-step LR schedule, then scores the test split. Throws ConfigError if
/// a class in [0, classes) has no training sample or a label is out of range.
ProbeResult train_linear_probe(const FeatureMatrix& train_x, const std::vector<std::size_t>& train_y,
                               const FeatureMatrix& test_x, const std::vector<std::size_t>& test_y,
                               std::size_t classes, const ProbeConfig& cfg = {});

/// Frozen-backbone probe on the model's target encoder.
ProbeResult linear_probe(const Model& model, const ViTConfig& vit, const std::vector<SyntheticSample>& train,
                         const std::vector<SyntheticSample>& test, const ProbeConfig& cfg = {});

/// FNV-1a over the raw bytes of every parameter, for read-only checks.
std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params);

struct KMeansResult {
  std::vector<std::size_t> assignment;
  FeatureMatrix centers;
  double inertia = 0;
  std::vector<double> inertia_history;  // after each assignment pass
  std::size_t iterations = 0;
};

/// k-means++ seeding from `seed`, then Lloyd iterations until the largest
/// centre shift is below `tol` or `max_iter` passes. Ties go to the lower
/// centre index. Throws ConfigError unless 2 <= k <= points.rows.
KMeansResult kmeans(const FeatureMatrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 100,
                    double tol = 1e-6);

struct PatchClusters {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> ids;  // row-major over the patch grid
  double inertia = 0;
  std::vector<double> inertia_history;
};

/// Clusters the final-block patch embeddings of the target encoder.
PatchClusters patch_clusters(const EncoderParams& target, const ViTConfig& cfg, const Tensor& image, std::size_t k,
                             std::uint64_t seed);

struct StepLossRow {
  std::size_t step = 0;  // k: predicting region k + 1 (Top-(k+1))
  double mean_loss = 0;
  std::size_t count = 0;
};

/// Averages per-step Huber losses grouped by step index.
std::vector<StepLossRow> aggregate_step_losses(const std::vector<std::vector<StepBatch>>& runs, double delta);

/// Per-step losses of a checkpoint over a dataset: fully discriminative
/// selection (curriculum end) and the sequential order. Image i draws from
/// Rng(seed).split(i).
std::vector<StepLossRow> per_step_losses(const TrainState& state, const std::vector<SyntheticSample>& samples,
                                         std::uint64_t seed = 0);

void write_step_losses_csv(const std::filesystem::path& path, const std::vector<StepLossRow>& rows);

struct AblationRow {
  OrderScheme scheme = OrderScheme::Sequential;
  double accuracy = 0;
  double final_loss = 0;  // mean loss over the last epoch
  std::string config_hash;
  std::filesystem::path checkpoint;
};

struct AblationOptions {
  std::vector<OrderScheme> schemes{OrderScheme::Flat, OrderScheme::Random, OrderScheme::Spatial,
                                   OrderScheme::Sequential};
  ProbeConfig probe;
  bool write_files = true;  // each run writes under <base.out>/<scheme>
  std::function<void(const std::string&)> progress;
};

/// Trains one model per scheme from the same base config and seed, probes
/// each, and returns one row per scheme in request order.
std::vector<AblationRow> order_ablation(const TrainConfig& base, const std::vector<SyntheticSample>& pretrain,
                                        const std::vector<SyntheticSample>& probe_train,
                                        const std::vector<SyntheticSample>& probe_test,
                                        const AblationOptions& options = {});

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

/// Cells whose patch has at least half of its pixels on the object.
std::vector<bool> object_cells(const SyntheticSample& sample, std::size_t patch_size);

/// Index of the largest saliency value; the lowest index on ties.
std::size_t saliency_argmax(const SaliencyMap& map);

struct SaliencyHitReport {
  std::size_t hits = 0, total = 0;
  double rate() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

/// Fraction of samples whose saliency argmax falls on an object cell.
SaliencyHitReport saliency_hit_rate(const EncoderParams& target, const ViTConfig& cfg,
                                    const std::vector<SyntheticSample>& samples, std::size_t layer,
                                    Similarity sim = Similarity::Cosine);

// ---------------------------------------------------------------------------
// Binary greyscale PGM (P5) output for quick visual checks.

struct GreyImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

void write_pgm(const std::filesystem::path& path, const GreyImage& image);
/// Channel mean of a [C, H, W] image in [0, 1].
GreyImage image_to_grey(const Tensor& image);
/// Min-max normalized map, each cell drawn as a `scale` x `scale` block.
GreyImage saliency_to_grey(const SaliencyMap& map, std::size_t scale);
/// Label grid drawn with evenly spaced grey levels.
GreyImage labels_to_grey(const std::vector<std::size_t>& ids, std::size_t rows, std::size_t cols,
                         std::size_t levels, std::size_t scale);
/// The two images side by side.
GreyImage side_by_side(const GreyImage& left, const GreyImage& right);

DSEQ_END_NAMESPACE
