#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dseq/tensor.hpp"

DSEQ_BEGIN_NAMESPACE

inline constexpr std::size_t kNumClasses = 4;

/// disk, triangle, cross, ring
const char* class_name(std::size_t label);

struct SyntheticSample {
  Tensor image;                     // [3, S, S], values in [0, 1]
  std::size_t label = 0;
  std::vector<std::uint8_t> mask;   // S * S, 1 on object pixels
  std::uint64_t seed = 0;

  std::size_t size() const { return image.dim(1); }
  double object_fraction() const;
};

struct GenerateOptions {
  /// Random resized crop (scale 0.3..1) of the rendered scene, nearest
  /// neighbour. Off by default; the object-area bounds only hold without it.
  bool crop_jitter = false;
};

/// One image of class `label` on a textured low-contrast background. The
/// object is a flat-coloured shape covering 10-35% of the pixels with a small
/// high-contrast part that tells the classes apart: a bright core (disk), a
/// dark apex (triangle), a bright hub (cross) or bright caps on either side
/// of a gap (ring). Position, scale and colours come from `seed`.
SyntheticSample generate(std::uint64_t seed, std::size_t label, std::size_t size, const GenerateOptions& options = {});

/// Seed of sample `index` in a dataset generated from `dataset_seed`.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index);

/// Sample i has label i % kNumClasses.
std::vector<SyntheticSample> generate_dataset(std::size_t n, std::size_t size, std::uint64_t seed);

struct Dataset {
  std::size_t size = 0;  // pixels per side
  std::uint64_t seed = 0;
  std::vector<SyntheticSample> samples;
};

/// Writes images.dsqt (f32 [n, 3, S, S]), masks.dsqt (u8 [n, S, S]),
/// labels.dsqt (u8 [n]) and index.json into `dir`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

DSEQ_END_NAMESPACE
