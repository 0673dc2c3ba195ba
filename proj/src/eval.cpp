#include "dseq/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

DSEQ_BEGIN_NAMESPACE

// ---------------------------------------------------------------------------
// Linear probe

FeatureMatrix probe_features(const EncoderParams& target, const ViTConfig& cfg,
                             const std::vector<SyntheticSample>& samples, std::size_t last_blocks) {
  const std::size_t depth = target.blocks.size();
  const std::size_t used = std::min(last_blocks, depth);
  if (used == 0) throw ConfigError("probe_features: need at least one block");
  FeatureMatrix out;
  out.rows = samples.size();
  out.cols = used * cfg.dim;
  out.values.assign(out.rows * out.cols, 0.0);
  const std::size_t patches = cfg.patch_count();
  for (std::size_t n = 0; n < samples.size(); ++n) {
    std::vector<Tensor> blocks;
    target_embeddings(samples[n].image, target, cfg, &blocks);
    double* row = out.values.data() + n * out.cols;
    for (std::size_t b = 0; b < used; ++b) {
      const auto tokens = blocks[depth - used + b].data();
      for (std::size_t t = 1; t <= patches; ++t) {
        for (std::size_t d = 0; d < cfg.dim; ++d) row[b * cfg.dim + d] += static_cast<double>(tokens[t * cfg.dim + d]);
      }
      for (std::size_t d = 0; d < cfg.dim; ++d) row[b * cfg.dim + d] /= static_cast<double>(patches);
    }
  }
  return out;
}

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string probe_hash(const ProbeConfig& cfg, std::size_t classes) {
  std::ostringstream s;
  s.precision(17);
  s << "epochs=" << cfg.epochs << ";batch=" << cfg.batch_size << ";lr=" << cfg.lr << ";gamma=" << cfg.gamma
    << ";momentum=" << cfg.momentum << ";wd=" << cfg.weight_decay << ";seed=" << cfg.seed << ";classes=" << classes
    << ";milestones=";
  for (auto m : cfg.milestones) s << m << ',';
  const std::string text = s.str();
  return hex16(fnv1a(text.data(), text.size()));
}

// Softmax of logits in place.
void softmax_inplace(std::vector<double>& z) {
  const double top = *std::max_element(z.begin(), z.end());
  double total = 0;
  for (auto& v : z) total += (v = std::exp(v - top));
  for (auto& v : z) v /= total;
}

}  // namespace

ProbeResult train_linear_probe(const FeatureMatrix& train_x, const std::vector<std::size_t>& train_y,
                               const FeatureMatrix& test_x, const std::vector<std::size_t>& test_y,
                               std::size_t classes, const ProbeConfig& cfg) {
  if (classes < 2) throw ConfigError("linear probe: need at least two classes");
  if (train_x.rows != train_y.size() || test_x.rows != test_y.size()) {
    throw ShapeError("linear probe: feature rows and label counts differ");
  }
  if (train_x.cols != test_x.cols) throw ShapeError("linear probe: train and test feature widths differ");
  if (cfg.batch_size == 0) throw ConfigError("linear probe: batch_size must be positive");
  std::vector<std::size_t> counts(classes, 0);
  for (auto y : train_y) {
    if (y >= classes) throw ConfigError("linear probe: label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw ConfigError("linear probe: class " + std::to_string(c) + " is absent from the training set");
  }
  for (auto y : test_y) {
    if (y >= classes) throw ConfigError("linear probe: test label " + std::to_string(y) + " out of range");
  }

  const std::size_t n = train_x.rows, f = train_x.cols;
  // Standardize with training statistics.
  std::vector<double> mu(f, 0.0), sd(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) mu[j] += train_x.at(i, j);
  for (auto& v : mu) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) sd[j] += (train_x.at(i, j) - mu[j]) * (train_x.at(i, j) - mu[j]);
  for (auto& v : sd) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }
  auto standardize = [&](const FeatureMatrix& x) {
    FeatureMatrix s = x;
    for (std::size_t i = 0; i < s.rows; ++i)
      for (std::size_t j = 0; j < f; ++j) s.values[i * f + j] = (x.at(i, j) - mu[j]) / sd[j];
    return s;
  };
  const FeatureMatrix xs = standardize(train_x), ts = standardize(test_x);

  std::vector<double> w(classes * f, 0.0), b(classes, 0.0);
  std::vector<double> vw(w.size(), 0.0), vb(b.size(), 0.0);
  std::vector<double> gw(w.size()), gb(b.size());
  auto logits = [&](const double* x) {
    std::vector<double> z(b);
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t j = 0; j < f; ++j) z[c] += w[c * f + j] * x[j];
    return z;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    for (auto m : cfg.milestones) lr *= epoch >= m ? cfg.gamma : 1.0;
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t s = start; s < end; ++s) {
        const double* x = xs.row(order[s]);
        auto p = logits(x);
        softmax_inplace(p);
        p[train_y[order[s]]] -= 1.0;
        for (std::size_t c = 0; c < classes; ++c) {
          gb[c] += p[c];
          for (std::size_t j = 0; j < f; ++j) gw[c * f + j] += p[c] * x[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = gw[i] * inv + cfg.weight_decay * w[i];
        vw[i] = cfg.momentum * vw[i] + g;
        w[i] -= lr * (g + cfg.momentum * vw[i]);
      }
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = gb[c] * inv;
        vb[c] = cfg.momentum * vb[c] + g;
        b[c] -= lr * (g + cfg.momentum * vb[c]);
      }
    }
  }

  auto predict = [&](const double* x) {
    const auto z = logits(x);
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  };
  ProbeResult r;
  r.epochs = cfg.epochs;
  r.config_hash = probe_hash(cfg, classes);
  std::size_t train_hits = 0;
  for (std::size_t i = 0; i < n; ++i) train_hits += predict(xs.row(i)) == train_y[i];
  r.train_accuracy = static_cast<double>(train_hits) / static_cast<double>(n);
  std::vector<std::size_t> hit(classes, 0), seen(classes, 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ts.rows; ++i) {
    const bool ok = predict(ts.row(i)) == test_y[i];
    hits += ok;
    hit[test_y[i]] += ok;
    ++seen[test_y[i]];
  }
  r.accuracy = ts.rows ? static_cast<double>(hits) / static_cast<double>(ts.rows) : 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    r.per_class_accuracy.push_back(seen[c] ? static_cast<double>(hit[c]) / static_cast<double>(seen[c])
                                           : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

ProbeResult linear_probe(const Model& model, const ViTConfig& vit, const std::vector<SyntheticSample>& train,
                         const std::vector<SyntheticSample>& test, const ProbeConfig& cfg) {
  auto labels = [](const std::vector<SyntheticSample>& s) {
    std::vector<std::size_t> y;
    for (const auto& x : s) y.push_back(x.label);
    return y;
  };
  return train_linear_probe(probe_features(model.target, vit, train), labels(train),
                            probe_features(model.target, vit, test), labels(test), kNumClasses, cfg);
}

std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    const auto data = p.tensor.data();
    h = fnv1a(data.data(), data.size_bytes(), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Clustering

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

KMeansResult kmeans(const FeatureMatrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iter,
                    double tol) {
  const std::size_t n = points.rows, d = points.cols;
  if (k < 2) throw ConfigError("kmeans: need k >= 2, got " + std::to_string(k));
  if (k > n) throw ConfigError("kmeans: k = " + std::to_string(k) + " exceeds the " + std::to_string(n) + " points");

  KMeansResult r;
  r.centers.rows = k;
  r.centers.cols = d;
  r.centers.values.assign(k * d, 0.0);
  auto centre = [&](std::size_t c) { return r.centers.values.data() + c * d; };

  // k-means++ seeding.
  Rng rng(seed);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.uniform_int(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(points.row(pick), points.row(pick) + d, centre(c));
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(points.row(i), centre(c), d));
      total += nearest[i];
    }
    if (c + 1 == k) break;
    if (total <= 0) {
      pick = rng.uniform_int(n);
      continue;
    }
    double target = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest[i] <= 0) continue;
      target -= nearest[i];
      if (target < 0) {
        pick = i;
        break;
      }
    }
  }

  r.assignment.assign(n, 0);
  std::vector<double> sums(k * d);
  std::vector<std::size_t> sizes(k);
  bool converged = false;
  for (std::size_t iter = 0;; ++iter) {
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points.row(i), centre(0), d);
      for (std::size_t c = 1; c < k; ++c) {
        const double dist = sq_dist(points.row(i), centre(c), d);
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      r.assignment[i] = best;
      inertia += best_d;
    }
    r.inertia_history.push_back(inertia);
    r.inertia = inertia;
    if (converged || iter == max_iter) break;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++sizes[r.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) sums[r.assignment[i] * d + j] += points.at(i, j);
    }
    double shift = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] == 0) continue;  // an empty cluster keeps its centre
      double moved = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = sums[c * d + j] / static_cast<double>(sizes[c]);
        moved += (v - centre(c)[j]) * (v - centre(c)[j]);
        centre(c)[j] = v;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    ++r.iterations;
    converged = shift < tol;
  }
  return r;
}

PatchClusters patch_clusters(const EncoderParams& target, const ViTConfig& cfg, const Tensor& image, std::size_t k,
                             std::uint64_t seed) {
  const Tensor tokens = target_embeddings(image, target, cfg);
  const std::size_t patches = cfg.patch_count();
  if (k > patches) {
    throw ConfigError("patch_clusters: k = " + std::to_string(k) + " exceeds the " + std::to_string(patches) +
                      " patches");
  }
  FeatureMatrix pts;
  pts.rows = patches;
  pts.cols = cfg.dim;
  const auto data = tokens.data();
  pts.values.assign(data.begin() + static_cast<std::ptrdiff_t>(cfg.dim), data.end());
  const KMeansResult km = kmeans(pts, k, seed);
  return {cfg.grid(), cfg.grid(), km.assignment, km.inertia, km.inertia_history};
}

// ---------------------------------------------------------------------------
// Per-step losses and the order ablation

std::vector<StepLossRow> aggregate_step_losses(const std::vector<std::vector<StepBatch>>& runs, double delta) {
  std::vector<StepLossRow> rows;
  for (const auto& steps : runs) {
    const auto losses = step_losses(steps, delta);
    if (rows.size() < losses.size()) rows.resize(losses.size());
    for (std::size_t k = 0; k < losses.size(); ++k) {
      rows[k].step = k + 1;
      rows[k].mean_loss += losses[k];
      ++rows[k].count;
    }
  }
  for (auto& r : rows) r.mean_loss /= static_cast<double>(r.count);
  return rows;
}

std::vector<StepLossRow> per_step_losses(const TrainState& state, const std::vector<SyntheticSample>& samples,
                                         std::uint64_t seed) {
  const TrainConfig& cfg = state.cfg;
  NoGradGuard no_grad;
  std::vector<int> positions{kClsPosition};
  for (std::size_t i = 0; i < cfg.vit.patch_count(); ++i) positions.push_back(static_cast<int>(i));
  std::vector<std::vector<StepBatch>> runs;
  const Rng root(seed);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng = root.split(i);
    std::vector<Tensor> blocks;
    const Tensor targets = target_embeddings(samples[i].image, state.model.target, cfg.vit, &blocks);
    const SaliencyMap map = saliency_from_tokens(blocks[cfg.layer() - 1], positions, cfg.vit.grid(), cfg.similarity);
    const RegionSet regions = curriculum_select(map, 1.0, 1.0, cfg.selection(), rng);
    runs.push_back(sequential_predict(samples[i].image, regions, OrderScheme::Sequential, state.model, rng, targets));
  }
  return aggregate_step_losses(runs, cfg.delta);
}

void write_step_losses_csv(const std::filesystem::path& path, const std::vector<StepLossRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(9);
  out << "step,target,mean_loss,count\n";
  for (const auto& r : rows) out << r.step << ",top" << r.step + 1 << ',' << r.mean_loss << ',' << r.count << "\n";
}

std::vector<AblationRow> order_ablation(const TrainConfig& base, const std::vector<SyntheticSample>& pretrain,
                                        const std::vector<SyntheticSample>& probe_train,
                                        const std::vector<SyntheticSample>& probe_test,
                                        const AblationOptions& options) {
  if (options.schemes.empty()) throw ConfigError("order_ablation: no schemes requested");
  std::vector<AblationRow> rows;
  for (OrderScheme scheme : options.schemes) {
    TrainConfig cfg = base;
    cfg.order = scheme;
    cfg.out = (std::filesystem::path(base.out) / to_string(scheme)).string();
    if (options.progress) options.progress(std::string("training ") + to_string(scheme));
    TrainOptions topts;
    topts.write_files = options.write_files;
    const TrainResult result = train(cfg, pretrain, topts);

    AblationRow row;
    row.scheme = scheme;
    row.config_hash = config_hash(cfg);
    row.checkpoint = result.final_checkpoint;
    double total = 0;
    std::size_t count = 0;
    for (const auto& l : result.log) {
      if (l.epoch + 1 == cfg.epochs && std::isfinite(l.loss)) {
        total += l.loss;
        ++count;
      }
    }
    row.final_loss = count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
    if (options.progress) options.progress(std::string("probing ") + to_string(scheme));
    row.accuracy = linear_probe(result.state.model, cfg.vit, probe_train, probe_test, options.probe).accuracy;
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(9);
  out << "scheme,probe_accuracy,final_loss,config_hash,checkpoint\n";
  for (const auto& r : rows) {
    out << to_string(r.scheme) << ',' << r.accuracy << ',' << r.final_loss << ',' << r.config_hash << ','
        << r.checkpoint.string() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Saliency localisation

std::vector<bool> object_cells(const SyntheticSample& sample, std::size_t patch_size) {
  const std::size_t s = sample.size();
  if (patch_size == 0 || s % patch_size != 0) throw ConfigError("object_cells: patch size must divide the image");
  const std::size_t grid = s / patch_size;
  std::vector<bool> cells(grid * grid, false);
  for (std::size_t gr = 0; gr < grid; ++gr) {
    for (std::size_t gc = 0; gc < grid; ++gc) {
      std::size_t on = 0;
      for (std::size_t r = 0; r < patch_size; ++r)
        for (std::size_t c = 0; c < patch_size; ++c) on += sample.mask[(gr * patch_size + r) * s + gc * patch_size + c];
      cells[gr * grid + gc] = 2 * on >= patch_size * patch_size;
    }
  }
  return cells;
}

std::size_t saliency_argmax(const SaliencyMap& map) {
  if (map.values.empty()) throw ShapeError("saliency_argmax: empty map");
  return static_cast<std::size_t>(std::max_element(map.values.begin(), map.values.end()) - map.values.begin());
}

SaliencyHitReport saliency_hit_rate(const EncoderParams& target, const ViTConfig& cfg,
                                    const std::vector<SyntheticSample>& samples, std::size_t layer, Similarity sim) {
  SaliencyHitReport r;
  for (const auto& s : samples) {
    const SaliencyMap map = attention_map(s.image, target, cfg, layer, sim);
    r.hits += object_cells(s, cfg.patch_size)[saliency_argmax(map)];
    ++r.total;
  }
  return r;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::filesystem::path& path, const GreyImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ShapeError("write_pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

GreyImage image_to_grey(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("image_to_grey: expected [C, H, W], got " + to_string(image.shape()));
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  GreyImage g{w, h, std::vector<std::uint8_t>(w * h)};
  const auto px = image.data();
  for (std::size_t i = 0; i < h * w; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < ch; ++c) acc += static_cast<double>(px[c * h * w + i]);
    g.pixels[i] = to_byte(acc / static_cast<double>(ch));
  }
  return g;
}

GreyImage saliency_to_grey(const SaliencyMap& map, std::size_t scale) {
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double span = map.values.empty() ? 0.0 : *hi - *lo;
  GreyImage g{map.cols * scale, map.rows * scale, std::vector<std::uint8_t>(map.cols * scale * map.rows * scale)};
  for (std::size_t y = 0; y < g.height; ++y) {
    for (std::size_t x = 0; x < g.width; ++x) {
      const double v = map.values[(y / scale) * map.cols + x / scale];
      g.pixels[y * g.width + x] = to_byte(span > 0 ? (v - *lo) / span : 0.0);
    }
  }
  return g;
}

GreyImage labels_to_grey(const std::vector<std::size_t>& ids, std::size_t rows, std::size_t cols, std::size_t levels,
                         std::size_t scale) {
  if (ids.size() != rows * cols) throw ShapeError("labels_to_grey: label count mismatch");
  GreyImage g{cols * scale, rows * scale, std::vector<std::uint8_t>(cols * scale * rows * scale)};
  const double step = levels > 1 ? 1.0 / static_cast<double>(levels - 1) : 0.0;
  for (std::size_t y = 0; y < g.height; ++y) {
    for (std::size_t x = 0; x < g.width; ++x) {
      g.pixels[y * g.width + x] = to_byte(static_cast<double>(ids[(y / scale) * cols + x / scale]) * step);
    }
  }
  return g;
}

GreyImage side_by_side(const GreyImage& left, const GreyImage& right) {
  GreyImage g{left.width + right.width, std::max(left.height, right.height), {}};
  g.pixels.assign(g.width * g.height, 0);
  for (std::size_t y = 0; y < left.height; ++y)
    std::copy_n(left.pixels.begin() + static_cast<std::ptrdiff_t>(y * left.width), left.width,
                g.pixels.begin() + static_cast<std::ptrdiff_t>(y * g.width));
  for (std::size_t y = 0; y < right.height; ++y)
    std::copy_n(right.pixels.begin() + static_cast<std::ptrdiff_t>(y * right.width), right.width,
                g.pixels.begin() + static_cast<std::ptrdiff_t>(y * g.width + left.width));
  return g;
}

DSEQ_END_NAMESPACE
