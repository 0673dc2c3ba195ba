#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dseq/ops.hpp"
#include "dseq/seqpred.hpp"
#include "support/oracles.hpp"

using namespace dseq;

namespace {

ViTConfig small_config() {
  ViTConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 4;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.predictor_depth = 1;
  cfg.predictor_dim = 8;
  return cfg;
}

Tensor random_image(const ViTConfig& cfg, Rng& rng) {
  std::vector<Real> px(cfg.channels * cfg.image_size * cfg.image_size);
  for (auto& v : px) v = static_cast<Real>(rng.uniform());
  return Tensor::from({cfg.channels, cfg.image_size, cfg.image_size}, std::move(px));
}

RegionSet random_regions(Rng& rng) {
  SaliencyMap map;
  map.rows = map.cols = 8;
  for (int i = 0; i < 64; ++i) map.values.push_back(rng.uniform());
  return curriculum_select(map, 0, 1, SelectionConfig{}, rng);
}

// Adds noise to every pixel of the given grid cells.
Tensor perturb_cells(const Tensor& image, const ViTConfig& cfg, const std::vector<int>& cells, Rng& rng) {
  Tensor out = image.detach();
  auto px = out.mutable_data();
  const std::size_t s = cfg.image_size, p = cfg.patch_size;
  for (int cell : cells) {
    const std::size_t gr = static_cast<std::size_t>(cell) / cfg.grid(), gc = static_cast<std::size_t>(cell) % cfg.grid();
    for (std::size_t ch = 0; ch < cfg.channels; ++ch)
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) px[(ch * s + gr * p + r) * s + gc * p + c] += static_cast<Real>(rng.normal());
  }
  return out;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

StepBatch manual_step(std::vector<Real> pred, std::vector<Real> target, std::size_t rows) {
  StepBatch s;
  const std::size_t d = pred.size() / rows;
  s.predicted = Tensor::from({rows, d}, std::move(pred));
  s.target = Tensor::from({rows, d}, std::move(target));
  return s;
}

}  // namespace

TEST_CASE("huber values and continuity") {
  CHECK(huber_elem(0, 1) == 0.0);
  CHECK(huber_elem(0.5, 1) == 0.125);
  CHECK(huber_elem(2, 1) == 1.5);
  CHECK(huber_elem(-2, 1) == 1.5);
  CHECK(huber_elem(1, 1) == 0.5);
  CHECK(std::abs(huber_elem(1 + 1e-7, 1) - huber_elem(1 - 1e-7, 1)) < 1e-6);
  CHECK(huber_elem(3, 2) == 4.0);
}

TEST_CASE("dseq_loss hand examples") {
  auto zero = manual_step({0.3f, -1.2f, 4.0f, 0.0f}, {0.3f, -1.2f, 4.0f, 0.0f}, 2);
  CHECK(dseq_loss({zero}, 1.0).item() == 0);

  auto one = manual_step({0.5f, 2.0f}, {0.0f, 0.0f}, 1);
  CHECK(dseq_loss({one}, 1.0).item() == doctest::Approx(0.8125).epsilon(1e-7));

  CHECK_THROWS_AS(dseq_loss({}, 1.0), ConfigError);
  auto bad = manual_step({1, 2}, {1, 2}, 1);
  bad.target = Tensor::from({2, 1}, {1, 2});
  CHECK_THROWS_AS(dseq_loss({bad}, 1.0), ShapeError);
}

TEST_CASE("dseq_loss equals a scalar loop on random steps") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<StepBatch> steps;
    double expected = 0;
    const std::size_t n_steps = 1 + rng.uniform_int(5);
    for (std::size_t k = 0; k < n_steps; ++k) {
      const std::size_t rows = 1 + rng.uniform_int(12), d = 1 + rng.uniform_int(16);
      std::vector<Real> p(rows * d), t(rows * d);
      for (auto& v : p) v = static_cast<Real>(rng.uniform(-3, 3));
      for (auto& v : t) v = static_cast<Real>(rng.uniform(-3, 3));
      double acc = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += oracle::huber(static_cast<double>(p[i]) - static_cast<double>(t[i]), 1.0);
      }
      expected += acc / static_cast<double>(p.size());
      steps.push_back(manual_step(p, t, rows));
    }
    expected /= static_cast<double>(n_steps);
    CHECK(std::abs(dseq_loss(steps, 1.0).item() - expected) < 1e-6);
  }
}

TEST_CASE("order scheme names round-trip") {
  for (auto s : {OrderScheme::Sequential, OrderScheme::Flat, OrderScheme::Random, OrderScheme::Spatial}) {
    CHECK(parse_order_scheme(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_order_scheme("zigzag"), ConfigError);
}

TEST_CASE("order permutations keep the residual last") {
  Rng rng(2);
  RegionSet set = random_regions(rng);
  auto seq = order_permutation(set, OrderScheme::Sequential, rng);
  CHECK(seq == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(order_permutation(set, OrderScheme::Flat, rng) == seq);
  for (int i = 0; i < 20; ++i) {
    auto r = order_permutation(set, OrderScheme::Random, rng);
    CHECK(r.back() == 4);
    auto sorted = r;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == seq);
  }
}

TEST_CASE("spatial order equals a centre sort") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    RegionSet set = random_regions(rng);
    // Oracle: selection sort on (mean row, mean col) computed from scratch.
    std::vector<std::pair<double, double>> centres;
    for (std::size_t k = 0; k + 1 < set.size(); ++k) {
      double r = 0, c = 0;
      for (int cell : set.regions[k]) {
        r += cell / 8;
        c += cell % 8;
      }
      centres.emplace_back(r / static_cast<double>(set.regions[k].size()), c / static_cast<double>(set.regions[k].size()));
    }
    std::vector<std::size_t> expected, left{0, 1, 2, 3};
    while (!left.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < left.size(); ++i) {
        const auto& a = centres[left[i]];
        const auto& b = centres[left[best]];
        if (a.first < b.first || (a.first == b.first && a.second < b.second)) best = i;
      }
      expected.push_back(left[best]);
      left.erase(left.begin() + static_cast<std::ptrdiff_t>(best));
    }
    expected.push_back(4);
    CHECK(order_permutation(set, OrderScheme::Spatial, rng) == expected);
  }
}

TEST_CASE("five regions give four steps with growing contexts") {
  ViTConfig cfg = small_config();
  Model model = Model::init(cfg, 4);
  Rng rng(4);
  RegionSet set = random_regions(rng);
  auto steps = sequential_predict(random_image(cfg, rng), set, OrderScheme::Sequential, model, rng);
  REQUIRE(steps.size() == 4);
  std::size_t expected = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    expected += set.regions[k].size();
    CHECK(steps[k].step == k + 1);
    CHECK(steps[k].context_positions.size() == expected);
    CHECK(steps[k].target_positions == set.regions[k + 1]);
    CHECK(steps[k].predicted.shape() == Shape{set.regions[k + 1].size(), cfg.dim});
    CHECK(steps[k].target.shape() == steps[k].predicted.shape());
    CHECK_FALSE(steps[k].target.requires_grad());
  }
  Tape::current().clear();
}

TEST_CASE("step k depends only on the first k regions") {
  ViTConfig cfg = small_config();
  Model model = Model::init(cfg, 5);
  Rng rng(5);
  for (auto scheme : {OrderScheme::Sequential, OrderScheme::Spatial, OrderScheme::Random}) {
    RegionSet set = random_regions(rng);
    Tensor image = random_image(cfg, rng);
    Rng order_a(9), order_b(9);
    auto order = order_permutation(set, scheme, order_a);
    auto base = sequential_predict(image, set, scheme, model, order_b);
    for (std::size_t k = 1; k < order.size(); ++k) {
      std::vector<int> later;
      for (std::size_t j = k; j < order.size(); ++j) {
        later.insert(later.end(), set.regions[order[j]].begin(), set.regions[order[j]].end());
      }
      Tensor changed = perturb_cells(image, cfg, later, rng);
      Rng again(9);
      auto steps = sequential_predict(changed, set, scheme, model, again);
      CHECK(same_values(steps[k - 1].predicted, base[k - 1].predicted));
      // The targets do see the change: they come from the full image.
      CHECK_FALSE(same_values(steps[k - 1].target, base[k - 1].target));
    }
  }
  Tape::current().clear();
}

TEST_CASE("flat and sequential agree on the first step only") {
  ViTConfig cfg = small_config();
  Model model = Model::init(cfg, 6);
  Rng rng(6);
  RegionSet set = random_regions(rng);
  Tensor image = random_image(cfg, rng);
  auto seq = sequential_predict(image, set, OrderScheme::Sequential, model, rng);
  auto flat = sequential_predict(image, set, OrderScheme::Flat, model, rng);
  CHECK(same_values(seq[0].predicted, flat[0].predicted));
  for (std::size_t k = 1; k < 4; ++k) {
    CHECK_FALSE(same_values(seq[k].predicted, flat[k].predicted));
    CHECK(flat[k].context_positions == set.regions[0]);
    CHECK(same_values(seq[k].target, flat[k].target));
  }
  Tape::current().clear();
}

TEST_CASE("prediction order changes the loss") {
  ViTConfig cfg = small_config();
  Model model = Model::init(cfg, 7);
  Rng rng(7);
  int differ = 0;
  for (int trial = 0; trial < 5; ++trial) {
    RegionSet set = random_regions(rng);
    Tensor image = random_image(cfg, rng);
    const double a = dseq_loss(sequential_predict(image, set, OrderScheme::Sequential, model, rng), 1).item();
    Rng shuffler(100 + static_cast<std::uint64_t>(trial));
    auto perm = order_permutation(set, OrderScheme::Random, shuffler);
    if (perm == order_permutation(set, OrderScheme::Sequential, shuffler)) continue;
    Rng replay(100 + static_cast<std::uint64_t>(trial));
    const double b = dseq_loss(sequential_predict(image, set, OrderScheme::Random, model, replay), 1).item();
    differ += a != b;
  }
  CHECK(differ >= 4);
  Tape::current().clear();
}

TEST_CASE("backward reaches context encoder and predictor only") {
  ViTConfig cfg = small_config();
  Model model = Model::init(cfg, 8);
  Rng rng(8);
  Tape::current().clear();
  RegionSet set = random_regions(rng);
  Tensor loss = dseq_loss(sequential_predict(random_image(cfg, rng), set, OrderScheme::Sequential, model, rng), 1);
  backward(loss);
  for (const auto& p : named_parameters(model.target, "")) CHECK_FALSE(p.tensor.has_grad());
  std::size_t with_grad = 0;
  for (const auto& p : model.trainable()) with_grad += p.tensor.has_grad();
  CHECK(with_grad == model.trainable().size());
  Tape::current().clear();
}

TEST_CASE("sequential_predict rejects invalid region sets") {
  ViTConfig cfg = small_config();
  Model model = Model::init(cfg, 9);
  Rng rng(9);
  RegionSet set = random_regions(rng);
  set.regions.back().pop_back();
  CHECK_THROWS_AS(sequential_predict(random_image(cfg, rng), set, OrderScheme::Sequential, model, rng), Error);
}
