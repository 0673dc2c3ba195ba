#include "dseq/datagen.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "dseq/rng.hpp"
#include "dseq/tensor_io.hpp"

DSEQ_BEGIN_NAMESPACE

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kShapeAttempts = 64;

using Rgb = std::array<double, 3>;

// Shape area in units of r^2, used to pick r for a target area fraction.
constexpr std::array<double, kNumClasses> kAreaFactor = {
    kPi,                             // disk of radius r
    1.299038105676658,               // equilateral triangle with circumradius r
    1.8975,                          // cross: arms 2r long, 0.55r wide
    kPi * (1 - 0.3025) * 290 / 360,  // ring 0.55r..r with a 70 degree gap
};

struct Placement {
  double cx, cy, r, theta;
};

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a < -kPi) a += 2 * kPi;
  return a;
}

// 0 outside, 1 on the object body, 2 on the discriminative part.
int classify(std::size_t label, const Placement& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double d = std::hypot(dx, dy);
  // Coordinates in the shape's rotated frame.
  const double u = dx * std::cos(p.theta) + dy * std::sin(p.theta);
  const double v = -dx * std::sin(p.theta) + dy * std::cos(p.theta);
  switch (label) {
    case 0:
      if (d > p.r) return 0;
      return d <= 0.35 * p.r ? 2 : 1;
    case 1: {
      std::array<std::array<double, 2>, 3> vert;
      for (int i = 0; i < 3; ++i) {
        const double a = p.theta - kPi / 2 + 2 * kPi * i / 3;
        vert[static_cast<std::size_t>(i)] = {p.cx + p.r * std::cos(a), p.cy + p.r * std::sin(a)};
      }
      for (int i = 0; i < 3; ++i) {
        const auto& a = vert[static_cast<std::size_t>(i)];
        const auto& b = vert[static_cast<std::size_t>((i + 1) % 3)];
        if ((b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) < 0) return 0;
      }
      return std::hypot(x - vert[0][0], y - vert[0][1]) <= 0.45 * p.r ? 2 : 1;
    }
    case 2: {
      const double w = 0.275 * p.r;
      const bool arm = (std::abs(u) <= p.r && std::abs(v) <= w) || (std::abs(v) <= p.r && std::abs(u) <= w);
      if (!arm) return 0;
      return std::abs(u) <= w && std::abs(v) <= w ? 2 : 1;
    }
    default: {
      if (d < 0.55 * p.r || d > p.r) return 0;
      const double off = std::abs(wrap_angle(std::atan2(dy, dx) - p.theta));
      const double gap = 35 * kPi / 180;
      if (off < gap) return 0;
      return off < gap + 30 * kPi / 180 ? 2 : 1;
    }
  }
}

Rgb part_colour(std::size_t label) {
  if (label == 1) return {0.03, 0.03, 0.03};
  return {0.98, 0.98, 0.98};
}

}  // namespace

const char* class_name(std::size_t label) {
  static constexpr std::array<const char*, kNumClasses> names = {"disk", "triangle", "cross", "ring"};
  if (label >= kNumClasses) throw ConfigError("class label " + std::to_string(label) + " out of range");
  return names[label];
}

double SyntheticSample::object_fraction() const {
  if (mask.empty()) return 0;
  return static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
}

SyntheticSample generate(std::uint64_t seed, std::size_t label, std::size_t size, const GenerateOptions& options) {
  if (label >= kNumClasses) throw ConfigError("generate: label " + std::to_string(label) + " out of range");
  if (size < 8) throw ConfigError("generate: image size must be at least 8");
  Rng rng(seed);
  const auto S = static_cast<double>(size);
  const std::size_t pixels = size * size;

  // Shape: resample until the rasterized area lands in [10%, 35%].
  std::vector<int> cls(pixels);
  for (int attempt = 0;; ++attempt) {
    const double fraction = rng.uniform(0.13, 0.28);
    Placement p{};
    p.r = std::sqrt(fraction * S * S / kAreaFactor[label]);
    p.theta = rng.uniform(-kPi, kPi);
    const double lo = std::min(p.r, S / 2), hi = std::max(S - p.r, S / 2);
    p.cx = rng.uniform(lo, hi);
    p.cy = rng.uniform(lo, hi);
    std::size_t area = 0;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        cls[y * size + x] = classify(label, p, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        area += cls[y * size + x] > 0;
      }
    }
    const double got = static_cast<double>(area) / static_cast<double>(pixels);
    if ((got >= 0.10 && got <= 0.35) || attempt == kShapeAttempts) break;
  }

  // Background: grey base, slight tint, two faint waves and pixel noise.
  const double base = rng.uniform(0.30, 0.45);
  Rgb tint, fill;
  for (auto& t : tint) t = rng.uniform(-0.03, 0.03);
  for (auto& f : fill) f = rng.uniform(0.62, 0.85);
  std::array<double, 2> fx{}, fy{}, phase{};
  for (int i = 0; i < 2; ++i) {
    fx[static_cast<std::size_t>(i)] = rng.uniform(1, 4);
    fy[static_cast<std::size_t>(i)] = rng.uniform(1, 4);
    phase[static_cast<std::size_t>(i)] = rng.uniform(0, 2 * kPi);
  }
  const Rgb part = part_colour(label);

  std::vector<Real> px(3 * pixels);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double wave = 0;
      for (std::size_t i = 0; i < 2; ++i) {
        wave += 0.04 * std::sin(2 * kPi * (fx[i] * static_cast<double>(x) + fy[i] * static_cast<double>(y)) / S + phase[i]);
      }
      const int c = cls[y * size + x];
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double value = c == 0 ? base + tint[ch] + wave : (c == 1 ? fill[ch] : part[ch]);
        value += 0.015 * rng.normal();
        // Round through float so both precisions see the same pixels.
        px[(ch * size + y) * size + x] = static_cast<Real>(static_cast<float>(std::clamp(value, 0.0, 1.0)));
      }
    }
  }

  SyntheticSample out;
  out.label = label;
  out.seed = seed;
  out.mask.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) out.mask[i] = cls[i] > 0;

  if (options.crop_jitter) {
    const double scale = rng.uniform(0.3, 1.0);
    const auto side = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(S * std::sqrt(scale))), 1, size);
    const std::size_t top = rng.uniform_int(size - side + 1), left = rng.uniform_int(size - side + 1);
    std::vector<Real> cropped(px.size());
    std::vector<std::uint8_t> mask(pixels);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t sy = top + y * side / size, sx = left + x * side / size;
        for (std::size_t ch = 0; ch < 3; ++ch) cropped[(ch * size + y) * size + x] = px[(ch * size + sy) * size + sx];
        mask[y * size + x] = out.mask[sy * size + sx];
      }
    }
    px = std::move(cropped);
    out.mask = std::move(mask);
  }
  out.image = Tensor::from({3, size, size}, std::move(px));
  return out;
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index) {
  return Rng(dataset_seed).split(index).next_u64();
}

std::vector<SyntheticSample> generate_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate(sample_seed(seed, i), i % kNumClasses, size));
  return out;
}

namespace {

const char* const kImagesFile = "images.dsqt";
const char* const kMasksFile = "masks.dsqt";
const char* const kLabelsFile = "labels.dsqt";
const char* const kIndexFile = "index.json";

void expect_shape(const DsqtArray& a, const Shape& shape, DType dtype, const std::filesystem::path& path) {
  if (a.shape != shape || a.dtype != dtype) {
    throw FormatError(path.string() + ": expected " + to_string(shape) + " of dtype " +
                      std::to_string(static_cast<int>(dtype)) + ", found " + to_string(a.shape) + " of dtype " +
                      std::to_string(static_cast<int>(a.dtype)));
  }
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = dataset.samples.size(), s = dataset.size;
  std::vector<Real> images;
  images.reserve(n * 3 * s * s);
  std::vector<std::uint8_t> masks, labels;
  nlohmann::json seed_list = nlohmann::json::array();
  for (const auto& sample : dataset.samples) {
    if (sample.image.shape() != Shape{3, s, s}) {
      throw ShapeError("write_dataset: sample image " + to_string(sample.image.shape()) + " does not match size " +
                       std::to_string(s));
    }
    images.insert(images.end(), sample.image.data().begin(), sample.image.data().end());
    masks.insert(masks.end(), sample.mask.begin(), sample.mask.end());
    labels.push_back(static_cast<std::uint8_t>(sample.label));
    seed_list.push_back(std::to_string(sample.seed));
  }
  write_file_bytes(dir / kImagesFile, encode_dsqt(Tensor::from({n, 3, s, s}, std::move(images)), DType::kF32));
  write_file_bytes(dir / kMasksFile, encode_dsqt_u8({n, s, s}, masks));
  write_file_bytes(dir / kLabelsFile, encode_dsqt_u8({n}, labels));

  nlohmann::json index;
  index["format"] = "dseq-synthetic";
  index["version"] = 1;
  index["count"] = n;
  index["size"] = s;
  index["seed"] = std::to_string(dataset.seed);
  index["classes"] = nlohmann::json::array();
  for (std::size_t k = 0; k < kNumClasses; ++k) index["classes"].push_back(class_name(k));
  index["sample_seeds"] = seed_list;
  index["files"] = {{"images", kImagesFile}, {"masks", kMasksFile}, {"labels", kLabelsFile}};
  const std::string text = index.dump(2) + "\n";
  write_file_bytes(dir / kIndexFile, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / kIndexFile;
  const auto bytes = read_file_bytes(index_path);
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  Dataset ds;
  std::size_t n = 0;
  std::vector<std::string> seeds;
  try {
    if (index.at("format") != "dseq-synthetic") throw FormatError(index_path.string() + ": unknown format");
    n = index.at("count").get<std::size_t>();
    ds.size = index.at("size").get<std::size_t>();
    ds.seed = std::stoull(index.at("seed").get<std::string>());
    seeds = index.at("sample_seeds").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  if (seeds.size() != n) throw FormatError(index_path.string() + ": sample_seeds has the wrong length");
  const std::size_t s = ds.size;

  const DsqtArray images = load_array(dir / kImagesFile);
  expect_shape(images, {n, 3, s, s}, DType::kF32, dir / kImagesFile);
  const DsqtArray masks = load_array(dir / kMasksFile);
  expect_shape(masks, {n, s, s}, DType::kU8, dir / kMasksFile);
  const DsqtArray labels = load_array(dir / kLabelsFile);
  expect_shape(labels, {n}, DType::kU8, dir / kLabelsFile);

  const std::vector<double> pixels = images.to_doubles();
  const std::size_t per_image = 3 * s * s, per_mask = s * s;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSample sample;
    sample.label = labels.payload[i];
    if (sample.label >= kNumClasses) {
      throw FormatError((dir / kLabelsFile).string() + ": label " + std::to_string(sample.label) + " at index " +
                        std::to_string(i) + " out of range");
    }
    sample.seed = std::stoull(seeds[i]);
    std::vector<Real> px(pixels.begin() + static_cast<std::ptrdiff_t>(i * per_image),
                         pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_image));
    sample.image = Tensor::from({3, s, s}, std::move(px));
    sample.mask.assign(masks.payload.begin() + static_cast<std::ptrdiff_t>(i * per_mask),
                       masks.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_mask));
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

DSEQ_END_NAMESPACE
