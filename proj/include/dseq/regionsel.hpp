#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dseq/rng.hpp"
#include "dseq/saliency.hpp"

DSEQ_BEGIN_NAMESPACE

using Region = std::vector<int>;  // sorted row-major cell indices

enum class RegionOrigin { Discriminative, Random, Residual };
const char* to_string(RegionOrigin origin);

/// Ordered regions R_1..R_N. The last region is always the residual: every
/// cell not claimed by an earlier region.
struct RegionSet {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Region> regions;
  std::vector<double> scores;  // one per non-residual region, mean normalized saliency
  std::vector<RegionOrigin> origins;
  std::optional<double> tau;  // Otsu threshold when one existed
  bool degenerate = false;     // saliency carried no usable signal

  std::size_t size() const { return regions.size(); }
};

struct NormalizedMap {
  SaliencyMap map;
  bool degenerate = false;
};

/// Min-max scaling to [0, 1]. A constant map becomes all zeros and is flagged.
NormalizedMap normalize_map(const SaliencyMap& map);

struct OtsuThreshold {
  double tau;             // boundary / bins
  std::size_t boundary;   // first bin of the upper class
};

/// Histogram bin of a value in [0, 1]: the largest k with value >= k / bins.
std::size_t otsu_bin(double value, std::size_t bins);

/// Boundary of a `bins`-bin histogram that maximizes between-class variance.
/// Ties resolve to the lowest boundary. nullopt when every boundary has zero
/// between-class variance (a single occupied bin).
std::optional<OtsuThreshold> otsu(const std::vector<double>& values, std::size_t bins = 64);

/// Maximal 8-connected groups of set cells, each sorted, ordered by their
/// first cell.
std::vector<Region> connected_components(const std::vector<std::uint8_t>& mask, std::size_t rows, std::size_t cols);

double score_region(const Region& region, const SaliencyMap& normalized);

struct BlockSpec {
  double scale_lo = 0.15;
  double scale_hi = 0.2;
  double aspect_lo = 0.75;
  double aspect_hi = 1.5;
  std::size_t min_patches = 10;
};

/// Smallest and largest admissible block area on a rows x cols grid.
std::pair<std::size_t, std::size_t> block_area_bounds(std::size_t rows, std::size_t cols, const BlockSpec& spec);

/// Axis-aligned rectangle of cells with area fraction drawn uniformly from the
/// scale range and aspect (height / width) from the aspect range, snapped to
/// the nearest admissible integer rectangle and placed uniformly in the grid.
Region random_block(Rng& rng, std::size_t rows, std::size_t cols, const BlockSpec& spec);

struct SelectionConfig {
  std::size_t regions = 5;  // N, including the residual
  double alpha = 0.15;
  std::size_t bins = 64;
  BlockSpec block;
};

/// normalize -> Otsu -> mask -> 8-connected components -> size filter ->
/// score -> top N-1, deficit filled with random blocks, then the residual.
/// A degenerate map yields an all-random set with `degenerate` raised.
RegionSet select_regions(const SaliencyMap& map, const SelectionConfig& cfg, Rng& rng);

/// Probability of keeping the discriminative region: clamp(t / T, 0, 1).
double curriculum_lambda(double epoch, double total);

/// Per region index, keeps the discriminative region with probability lambda
/// and otherwise substitutes a random block disjoint from the regions already
/// placed. The residual is recomputed after mixing.
RegionSet curriculum_select(const SaliencyMap& map, double epoch, double total, const SelectionConfig& cfg, Rng& rng);

/// Throws Error unless the regions are non-empty, pairwise disjoint and cover
/// the grid exactly.
void check_partition(const RegionSet& set);

DSEQ_END_NAMESPACE
