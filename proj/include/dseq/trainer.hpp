#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dseq/datagen.hpp"
#include "dseq/regionsel.hpp"
#include "dseq/saliency.hpp"
#include "dseq/seqpred.hpp"
#include "dseq/vit.hpp"

DSEQ_BEGIN_NAMESPACE

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr_start = 1e-4;
  double lr_peak = 1e-3;
  double lr_final = 1e-6;
  std::size_t warmup_epochs = 5;
  double wd_start = 0.04;
  double wd_end = 0.4;
  double ema_start = 0.996;
  double ema_end = 1.0;
  double grad_clip = 1.0;  // global norm, 0 disables
  double delta = 1.0;      // Huber threshold

  std::size_t regions = 5;
  double alpha = 0.15;
  std::size_t otsu_bins = 64;
  double scale_min = 0.15;
  double scale_max = 0.2;
  double aspect_min = 0.75;
  double aspect_max = 1.5;
  std::size_t min_patches = 10;
  std::size_t saliency_layer = 0;  // 0 selects round(2/3 * depth)
  Similarity similarity = Similarity::Cosine;
  OrderScheme order = OrderScheme::Sequential;

  std::uint64_t seed = 7;
  ViTConfig vit;
  std::string dataset = "data/train";
  std::size_t max_images = 0;        // 0 uses the whole dataset
  std::string out = "runs/desk";
  std::size_t checkpoint_every = 0;  // epochs between checkpoints, 0 = final only

  std::size_t layer() const { return saliency_layer ? saliency_layer : default_saliency_layer(vit.depth); }
  SelectionConfig selection() const;
  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// Canonical key=value form, one entry per field, in a fixed order.
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg);
std::string config_text(const TrainConfig& cfg);
/// FNV-1a over config_text, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

/// Sets one field from its key. Throws ConfigError on an unknown key or a
/// malformed value.
void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Parses flat key=value text; blank lines and lines starting with # are
/// ignored. Unlisted keys keep their defaults.
TrainConfig parse_config(const std::string& text, const std::string& source = "<config>");
TrainConfig load_config(const std::filesystem::path& path);

/// Per-step learning rate, weight decay and EMA decay.
struct Schedule {
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
  double lr_start = 1e-4, lr_peak = 1e-3, lr_final = 1e-6;
  double wd_start = 0.04, wd_end = 0.4;
  double ema_start = 0.996, ema_end = 1.0;

  static Schedule from(const TrainConfig& cfg, std::size_t steps_per_epoch);

  /// Linear warmup from lr_start to lr_peak, then a half cosine to lr_final
  /// that lands on it at the last step.
  double lr_at(std::int64_t step) const;
  /// Half-cosine ascent from wd_start to wd_end over the whole run.
  double wd_at(std::int64_t step) const;
  /// Linear ascent from ema_start to ema_end.
  double ema_at(std::int64_t step) const;
};

/// Adam with decoupled weight decay. Parameters flagged `decay` are scaled
/// by (1 - lr * wd) before the adaptive step.
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void init(const std::vector<NamedTensor>& params);

  /// Applies one update from the parameters' accumulated gradients (absent
  /// gradients count as zero). Returns false and leaves everything untouched
  /// if any gradient is non-finite.
  bool step(const std::vector<NamedTensor>& params, double lr, double wd);

  std::int64_t steps() const { return t_; }
  std::vector<RealBuffer>& first_moments() { return m_; }
  std::vector<RealBuffer>& second_moments() { return v_; }
  const std::vector<RealBuffer>& first_moments() const { return m_; }
  const std::vector<RealBuffer>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<RealBuffer> m_, v_;
  std::int64_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

/// target <- m * target + (1 - m) * source, elementwise.
void ema_update(EncoderParams& target, const EncoderParams& source, double m);

struct TrainState {
  TrainConfig cfg;
  Model model;
  AdamW optimizer;
  std::int64_t step = 0;
  std::size_t epoch = 0;  // completed epochs

  static TrainState fresh(const TrainConfig& cfg);
};

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source);
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

struct LossRow {
  std::int64_t step;
  std::size_t epoch;
  double loss, lambda, lr, wd, ema;
};

inline constexpr const char* kLossLogHeader = "step,epoch,loss,lambda,lr,wd,ema";

struct EpochSummary {
  std::size_t epoch;  // 0-based
  double mean_loss;
  double lambda;
  double seconds;
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  bool write_files = true;  // checkpoints and loss log under cfg.out
  std::function<void(const EpochSummary&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<LossRow> log;
  std::filesystem::path final_checkpoint;
};

/// Loss for one image: saliency from the current target encoder, curriculum
/// region selection, sequential prediction. The result stays on the tape so
/// backward() reaches the context encoder and predictor.
Tensor image_loss(const TrainState& state, const Tensor& image, double epoch, Rng& rng,
                  std::vector<StepBatch>* steps = nullptr);

/// Pre-trains on an in-memory dataset.
TrainResult train(const TrainConfig& cfg, const std::vector<SyntheticSample>& data, const TrainOptions& options = {});
/// Reads cfg.dataset and pre-trains on it.
TrainResult train(const TrainConfig& cfg, const TrainOptions& options = {});

void write_loss_log(const std::filesystem::path& path, const std::vector<LossRow>& rows, bool append);

DSEQ_END_NAMESPACE
