#include "dseq/regionsel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

DSEQ_BEGIN_NAMESPACE

const char* to_string(RegionOrigin origin) {
  switch (origin) {
    case RegionOrigin::Discriminative:
      return "discriminative";
    case RegionOrigin::Random:
      return "random";
    case RegionOrigin::Residual:
      return "residual";
  }
  return "?";
}

NormalizedMap normalize_map(const SaliencyMap& map) {
  NormalizedMap out{map, false};
  if (map.values.empty()) {
    out.degenerate = true;
    return out;
  }
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double min = *lo, range = *hi - *lo;
  if (!(range > 0)) {
    std::fill(out.map.values.begin(), out.map.values.end(), 0.0);
    out.degenerate = true;
    return out;
  }
  for (auto& v : out.map.values) v = (v - min) / range;
  return out;
}

std::size_t otsu_bin(double value, std::size_t bins) {
  const double scaled = std::floor(value * static_cast<double>(bins));
  std::size_t b = scaled <= 0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(scaled));
  // Align with the value >= k / bins comparison used by the mask.
  while (b > 0 && value < static_cast<double>(b) / static_cast<double>(bins)) --b;
  while (b + 1 < bins && value >= static_cast<double>(b + 1) / static_cast<double>(bins)) ++b;
  return b;
}

std::optional<OtsuThreshold> otsu(const std::vector<double>& values, std::size_t bins) {
  if (bins < 2) throw ConfigError("otsu: need at least 2 bins");
  if (values.empty()) return std::nullopt;
  std::vector<double> hist(bins, 0.0);
  for (double v : values) hist[otsu_bin(v, bins)] += 1;

  const double n = static_cast<double>(values.size());
  double total_mass = 0;
  for (std::size_t b = 0; b < bins; ++b) total_mass += hist[b] * (static_cast<double>(b) + 0.5) / static_cast<double>(bins);

  std::optional<OtsuThreshold> best;
  double best_var = 0;
  double count0 = 0, mass0 = 0;
  for (std::size_t k = 1; k < bins; ++k) {
    count0 += hist[k - 1];
    mass0 += hist[k - 1] * (static_cast<double>(k - 1) + 0.5) / static_cast<double>(bins);
    const double count1 = n - count0;
    if (count0 == 0 || count1 == 0) continue;
    const double w0 = count0 / n, w1 = count1 / n;
    const double mu0 = mass0 / count0, mu1 = (total_mass - mass0) / count1;
    const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best = OtsuThreshold{static_cast<double>(k) / static_cast<double>(bins), k};
    }
  }
  return best;
}

namespace {

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

std::vector<Region> connected_components(const std::vector<std::uint8_t>& mask, std::size_t rows, std::size_t cols) {
  if (mask.size() != rows * cols) {
    throw ShapeError("connected_components: mask has " + std::to_string(mask.size()) + " cells, grid is " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  DisjointSet sets(mask.size());
  auto id = [cols](std::size_t r, std::size_t c) { return static_cast<int>(r * cols + c); };
  // Scan forward neighbours only: right, down-left, down, down-right.
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask[r * cols + c]) continue;
      if (c + 1 < cols && mask[r * cols + c + 1]) sets.unite(id(r, c), id(r, c + 1));
      if (r + 1 < rows) {
        if (c > 0 && mask[(r + 1) * cols + c - 1]) sets.unite(id(r, c), id(r + 1, c - 1));
        if (mask[(r + 1) * cols + c]) sets.unite(id(r, c), id(r + 1, c));
        if (c + 1 < cols && mask[(r + 1) * cols + c + 1]) sets.unite(id(r, c), id(r + 1, c + 1));
      }
    }
  }
  // Roots are the smallest member, so components come out ordered by first cell.
  std::vector<int> slot(mask.size(), -1);
  std::vector<Region> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const auto root = static_cast<std::size_t>(sets.find(static_cast<int>(i)));
    if (slot[root] < 0) {
      slot[root] = static_cast<int>(out.size());
      out.emplace_back();
    }
    out[static_cast<std::size_t>(slot[root])].push_back(static_cast<int>(i));
  }
  return out;
}

double score_region(const Region& region, const SaliencyMap& normalized) {
  if (region.empty()) throw ConfigError("score_region: empty region");
  double sum = 0;
  for (int cell : region) sum += normalized.values.at(static_cast<std::size_t>(cell));
  return sum / static_cast<double>(region.size());
}

std::pair<std::size_t, std::size_t> block_area_bounds(std::size_t rows, std::size_t cols, const BlockSpec& spec) {
  const double area = static_cast<double>(rows * cols);
  const auto lo = static_cast<std::size_t>(std::ceil(spec.scale_lo * area - 1e-9));
  const auto hi = static_cast<std::size_t>(std::floor(spec.scale_hi * area + 1e-9));
  return {std::max(spec.min_patches, lo), hi};
}

Region random_block(Rng& rng, std::size_t rows, std::size_t cols, const BlockSpec& spec) {
  const auto [area_lo, area_hi] = block_area_bounds(rows, cols, spec);
  std::vector<std::pair<std::size_t, std::size_t>> shapes;  // (height, width)
  for (std::size_t h = 1; h <= rows; ++h) {
    for (std::size_t w = 1; w <= cols; ++w) {
      if (h * w >= area_lo && h * w <= area_hi) shapes.emplace_back(h, w);
    }
  }
  if (shapes.empty()) {
    throw ConfigError("random_block: no block of " + std::to_string(area_lo) + ".." + std::to_string(area_hi) +
                      " cells fits a " + std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  const double target_area = rng.uniform(spec.scale_lo, spec.scale_hi) * static_cast<double>(rows * cols);
  const double target_aspect = rng.uniform(spec.aspect_lo, spec.aspect_hi);
  std::size_t pick = 0;
  double best = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto [h, w] = shapes[i];
    const double da = std::log(static_cast<double>(h * w) / target_area);
    const double dr = std::log(static_cast<double>(h) / static_cast<double>(w) / target_aspect);
    const double dist = da * da + dr * dr;
    if (i == 0 || dist < best) {
      best = dist;
      pick = i;
    }
  }
  const auto [h, w] = shapes[pick];
  const std::size_t top = rng.uniform_int(rows - h + 1);
  const std::size_t left = rng.uniform_int(cols - w + 1);
  Region block;
  for (std::size_t r = top; r < top + h; ++r) {
    for (std::size_t c = left; c < left + w; ++c) block.push_back(static_cast<int>(r * cols + c));
  }
  return block;
}

namespace {

constexpr int kPlacementAttempts = 100;

std::size_t free_count(const std::vector<char>& taken) {
  return static_cast<std::size_t>(std::count(taken.begin(), taken.end(), 0));
}

// Random block that avoids `taken`, retried up to kPlacementAttempts times. On
// exhaustion the attempt with the most free cells is clipped to them. At least
// `reserve` cells stay free for the regions still to come.
Region place_block(Rng& rng, std::vector<char>& taken, std::size_t rows, std::size_t cols, const BlockSpec& spec,
                   std::size_t reserve) {
  const std::size_t available = free_count(taken);
  if (available <= reserve) throw Error("region selection: grid exhausted before the residual region");
  const std::size_t budget = available - reserve;
  Region best;
  std::size_t best_free = 0;
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    Region block = random_block(rng, rows, cols, spec);
    std::size_t n_free = 0;
    for (int c : block) n_free += !taken[static_cast<std::size_t>(c)];
    if (n_free == block.size() && n_free <= budget) {
      best = std::move(block);
      best_free = n_free;
      break;
    }
    if (n_free > best_free) {
      best_free = n_free;
      best = std::move(block);
    }
  }
  Region clipped;
  for (int c : best) {
    if (!taken[static_cast<std::size_t>(c)]) clipped.push_back(c);
  }
  if (clipped.size() > budget) clipped.resize(budget);
  if (clipped.empty()) {
    const std::size_t want = std::max<std::size_t>(1, std::min(budget, available / 2));
    for (std::size_t i = 0; i < taken.size() && clipped.size() < want; ++i) {
      if (!taken[i]) clipped.push_back(static_cast<int>(i));
    }
  }
  for (int c : clipped) taken[static_cast<std::size_t>(c)] = 1;
  return clipped;
}

void mark(std::vector<char>& taken, const Region& region) {
  for (int c : region) taken[static_cast<std::size_t>(c)] = 1;
}

void append_residual(RegionSet& set, const std::vector<char>& taken) {
  Region residual;
  for (std::size_t i = 0; i < taken.size(); ++i) {
    if (!taken[i]) residual.push_back(static_cast<int>(i));
  }
  set.regions.push_back(std::move(residual));
  set.origins.push_back(RegionOrigin::Residual);
}

void check_config(const SelectionConfig& cfg) {
  if (cfg.regions < 2) throw ConfigError("region selection: need at least 2 regions");
  if (!(cfg.alpha > 0 && cfg.alpha < 1)) throw ConfigError("region selection: alpha must lie in (0, 1)");
}

}  // namespace

RegionSet select_regions(const SaliencyMap& map, const SelectionConfig& cfg, Rng& rng) {
  check_config(cfg);
  const std::size_t cells = map.rows * map.cols;
  if (map.values.size() != cells || cells == 0) throw ShapeError("select_regions: map size does not match its grid");

  RegionSet set;
  set.rows = map.rows;
  set.cols = map.cols;
  NormalizedMap norm = normalize_map(map);
  std::optional<OtsuThreshold> threshold;
  if (!norm.degenerate) threshold = otsu(norm.map.values, cfg.bins);
  set.degenerate = !threshold.has_value();

  std::vector<char> taken(cells, 0);
  if (threshold) {
    set.tau = threshold->tau;
    std::vector<std::uint8_t> mask(cells);
    for (std::size_t i = 0; i < cells; ++i) mask[i] = otsu_bin(norm.map.values[i], cfg.bins) >= threshold->boundary;

    struct Candidate {
      Region cells;
      double score;
    };
    std::vector<Candidate> candidates;
    const double floor = cfg.alpha * static_cast<double>(cells);
    for (auto& comp : connected_components(mask, map.rows, map.cols)) {
      if (static_cast<double>(comp.size()) < floor) continue;
      const double score = score_region(comp, norm.map);
      candidates.push_back({std::move(comp), score});
    }
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.cells.size() != b.cells.size()) return a.cells.size() > b.cells.size();
      return a.cells.front() < b.cells.front();
    });
    std::size_t free_cells = cells;
    for (auto& cand : candidates) {
      if (set.regions.size() + 1 == cfg.regions) break;
      // Every later slot and the residual need at least one cell.
      const std::size_t later = cfg.regions - set.regions.size() - 1;
      if (free_cells < cand.cells.size() + later) continue;
      free_cells -= cand.cells.size();
      mark(taken, cand.cells);
      set.regions.push_back(std::move(cand.cells));
      set.scores.push_back(cand.score);
      set.origins.push_back(RegionOrigin::Discriminative);
    }
  }
  while (set.regions.size() + 1 < cfg.regions) {
    Region block = place_block(rng, taken, map.rows, map.cols, cfg.block, cfg.regions - set.regions.size() - 1);
    set.scores.push_back(score_region(block, norm.map));
    set.regions.push_back(std::move(block));
    set.origins.push_back(RegionOrigin::Random);
  }
  append_residual(set, taken);
  return set;
}

double curriculum_lambda(double epoch, double total) {
  if (!(total > 0)) return 1.0;
  return std::clamp(epoch / total, 0.0, 1.0);
}

RegionSet curriculum_select(const SaliencyMap& map, double epoch, double total, const SelectionConfig& cfg, Rng& rng) {
  RegionSet base = select_regions(map, cfg, rng);
  const double lambda = curriculum_lambda(epoch, total);
  const std::size_t slots = cfg.regions - 1;

  std::vector<char> keep(slots, 0);
  for (std::size_t k = 0; k < slots; ++k) {
    keep[k] = rng.bernoulli(lambda) && base.origins[k] == RegionOrigin::Discriminative;
  }

  RegionSet out;
  out.rows = base.rows;
  out.cols = base.cols;
  out.tau = base.tau;
  out.degenerate = base.degenerate;
  out.regions.resize(slots);
  out.scores.resize(slots);
  out.origins.resize(slots);
  std::vector<char> taken(map.rows * map.cols, 0);
  for (std::size_t k = 0; k < slots; ++k) {
    if (!keep[k]) continue;
    out.regions[k] = base.regions[k];
    out.scores[k] = base.scores[k];
    out.origins[k] = RegionOrigin::Discriminative;
    mark(taken, out.regions[k]);
  }
  const SaliencyMap normalized = normalize_map(map).map;
  std::size_t pending = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0));
  for (std::size_t k = 0; k < slots; ++k) {
    if (keep[k]) continue;
    out.regions[k] = place_block(rng, taken, map.rows, map.cols, cfg.block, pending--);
    std::sort(out.regions[k].begin(), out.regions[k].end());
    out.scores[k] = score_region(out.regions[k], normalized);
    out.origins[k] = RegionOrigin::Random;
  }
  append_residual(out, taken);
  return out;
}

void check_partition(const RegionSet& set) {
  const std::size_t cells = set.rows * set.cols;
  std::vector<int> owner(cells, -1);
  for (std::size_t k = 0; k < set.regions.size(); ++k) {
    if (set.regions[k].empty()) throw Error("region " + std::to_string(k) + " is empty");
    for (int c : set.regions[k]) {
      if (c < 0 || static_cast<std::size_t>(c) >= cells) {
        throw Error("region " + std::to_string(k) + " holds out-of-grid cell " + std::to_string(c));
      }
      auto& o = owner[static_cast<std::size_t>(c)];
      if (o >= 0) {
        throw Error("cell " + std::to_string(c) + " is in regions " + std::to_string(o) + " and " + std::to_string(k));
      }
      o = static_cast<int>(k);
    }
  }
  for (std::size_t i = 0; i < cells; ++i) {
    if (owner[i] < 0) throw Error("cell " + std::to_string(i) + " is not covered");
  }
}

DSEQ_END_NAMESPACE
