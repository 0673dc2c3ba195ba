#include "dseq/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "dseq/gradcheck.hpp"
#include "dseq/ops.hpp"
#include "dseq/seqpred.hpp"

#ifndef DSEQ_DOUBLE
#error "the gradient suite must be compiled in 64-bit mode"
#endif

namespace dseq::gradsuite {

namespace {


Tensor uniform_tensor(Rng& rng, Shape shape) {
  std::vector<Real> values(numel(shape));
  for (auto& v : values) v = static_cast<Real>(rng.uniform(-1, 1));
  return Tensor::from(std::move(shape), std::move(values), true);
}

// Fixed random weights turn a tensor-valued op into a scalar with a
// non-trivial upstream gradient.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> w(y.numel());
  for (auto& v : w) v = static_cast<Real>(rng.uniform(-1, 1));
  return sum(mul(y, Tensor::from(y.shape(), std::move(w))));
}

struct Case {
  std::string op;
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  std::function<Tensor(const std::vector<Tensor>&)> apply;
};

std::vector<Case> primitive_cases() {
  std::vector<Case> cases;
  auto one = [](Shape s) { return [s](Rng& r) { return std::vector<Tensor>{uniform_tensor(r, s)}; }; };
  auto two = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return std::vector<Tensor>{uniform_tensor(r, a), uniform_tensor(r, b)}; };
  };
  cases.push_back({"matmul", two({4, 4}, {4, 4}), [](auto& in) { return matmul(in[0], in[1]); }});
  cases.push_back({"matmul_rect", two({3, 5}, {5, 2}), [](auto& in) { return matmul(in[0], in[1]); }});
  cases.push_back({"add", two({4, 4}, {4, 4}), [](auto& in) { return add(in[0], in[1]); }});
  cases.push_back({"sub", two({4, 4}, {4, 4}), [](auto& in) { return sub(in[0], in[1]); }});
  cases.push_back({"mul", two({4, 4}, {4, 4}), [](auto& in) { return mul(in[0], in[1]); }});
  cases.push_back({"mul_scalar", two({4, 4}, {}), [](auto& in) { return mul(in[0], in[1]); }});
  cases.push_back({"scale", one({4, 4}), [](auto& in) { return scale(in[0], Real(-1.7)); }});
  cases.push_back({"add_rows", two({4, 4}, {4}), [](auto& in) { return add_rows(in[0], in[1]); }});
  cases.push_back({"transpose", one({3, 5}), [](auto& in) { return transpose(in[0]); }});
  cases.push_back({"reshape", one({4, 4}), [](auto& in) { return reshape(in[0], {2, 8}); }});
  cases.push_back({"gather_rows", one({4, 4}), [](auto& in) { return gather_rows(in[0], {3, 0, 3, 1}); }});
  cases.push_back({"embedding_lookup", one({6, 3}), [](auto& in) { return embedding_lookup(in[0], {5, 2, 2}); }});
  cases.push_back({"slice_rows", one({4, 4}), [](auto& in) { return slice_rows(in[0], 1, 3); }});
  cases.push_back({"concat_rows", two({2, 4}, {3, 4}), [](auto& in) { return concat_rows({in[0], in[1], in[0]}); }});
  cases.push_back({"softmax_axis1", one({4, 4}), [](auto& in) { return softmax(in[0], 1); }});
  cases.push_back({"softmax_axis0", one({3, 4, 2}), [](auto& in) { return softmax(in[0], 0); }});
  cases.push_back({"layer_norm",
                   [](Rng& r) {
                     return std::vector<Tensor>{uniform_tensor(r, {4, 4}), uniform_tensor(r, {4}),
                                                uniform_tensor(r, {4})};
                   },
                   [](auto& in) { return layer_norm(in[0], in[1], in[2], 1); }});
  cases.push_back({"layer_norm_axis0",
                   [](Rng& r) {
                     return std::vector<Tensor>{uniform_tensor(r, {5, 3}), uniform_tensor(r, {5}),
                                                uniform_tensor(r, {5})};
                   },
                   [](auto& in) { return layer_norm(in[0], in[1], in[2], 0); }});
  cases.push_back({"gelu", one({4, 4}), [](auto& in) { return gelu(scale(in[0], 3)); }});
  cases.push_back({"scaled_dot_attention",
                   [](Rng& r) {
                     return std::vector<Tensor>{uniform_tensor(r, {4, 4}), uniform_tensor(r, {5, 4}),
                                                uniform_tensor(r, {5, 4})};
                   },
                   [](auto& in) { return scaled_dot_attention(scale(in[0], 2), scale(in[1], 2), in[2], 2); }});
  cases.push_back({"mean", one({4, 4}), [](auto& in) { return mean(in[0]); }});
  cases.push_back({"mean_axis", one({3, 4, 2}), [](auto& in) { return mean(in[0], 1); }});
  cases.push_back({"sum", one({4, 4}), [](auto& in) { return sum(in[0]); }});
  cases.push_back({"huber", one({4, 4}), [](auto& in) { return huber(scale(in[0], 2.5), Real(1)); }});
  cases.push_back({"composite", two({4, 4}, {4, 4}), [](auto& in) {
                     Tensor h = gelu(matmul(in[0], in[1]));
                     return softmax(add(h, mul(in[0], h)), 1);
                   }});
  return cases;
}

ViTConfig toy_config() {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.predictor_depth = 1;
  cfg.predictor_dim = 8;
  return cfg;
}

RegionSet toy_regions() {
  RegionSet set;
  set.rows = set.cols = 4;
  set.regions = {{0, 1, 4, 5}, {2, 3}, {10, 11, 14, 15}, {6, 7, 8, 9, 12, 13}};
  set.scores = {0.9, 0.7, 0.5};
  set.origins = {RegionOrigin::Discriminative, RegionOrigin::Discriminative, RegionOrigin::Discriminative,
                 RegionOrigin::Residual};
  return set;
}

}  // namespace

std::vector<Row> run_primitives(int instances, std::uint64_t seed, double tol) {
  std::vector<Row> results;
  Rng root(seed);
  std::uint64_t case_id = 0;
  for (const auto& c : primitive_cases()) {
    Row r;
    r.op = c.op;
    Rng rng = root.split(++case_id);
    for (int i = 0; i < instances; ++i) {
      auto inputs = c.make_inputs(rng);
      const std::uint64_t wseed = rng.next_u64();
      auto f = [&]() {
        Tensor y = c.apply(inputs);
        return y.rank() == 0 ? y : weighted_sum(y, wseed);
      };
      auto report = grad_check(f, inputs, 1e-5, tol);
      ++r.instances;
      if (report.passed) ++r.passed;
      r.max_rel_error = std::max(r.max_rel_error, report.max_rel_error);
    }
    results.push_back(r);
  }
  return results;
}

Row run_dseq_loss(int instances, std::uint64_t seed, double tol, std::size_t sample) {
  const ViTConfig cfg = toy_config();
  const RegionSet regions = toy_regions();
  Row result{"dseq_loss", instances, 0, 0.0};
  Rng root(seed);
  for (int i = 0; i < instances; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    Model model = Model::init(cfg, rng.next_u64());
    // Let the target encoder drift away from the context encoder, as after EMA steps.
    for (auto& p : named_parameters(model.target, "")) {
      for (auto& v : p.tensor.mutable_data()) v += static_cast<Real>(0.05 * rng.normal());
    }
    std::vector<Real> px(cfg.channels * cfg.image_size * cfg.image_size);
    for (auto& v : px) v = static_cast<Real>(rng.uniform());
    const Tensor image = Tensor::from({cfg.channels, cfg.image_size, cfg.image_size}, px);
    const Tensor targets = target_embeddings(image, model.target, cfg);

    std::vector<Tensor> inputs;
    for (const auto& p : model.trainable()) inputs.push_back(p.tensor);
    auto loss = [&]() {
      Rng order_rng(0);
      return dseq_loss(sequential_predict(image, regions, OrderScheme::Sequential, model, order_rng, targets), 1.0);
    };
    GradCheckReport report = grad_check(loss, inputs, 1e-5, tol, sample, rng.next_u64());
    result.max_rel_error = std::max(result.max_rel_error, report.max_rel_error);
    result.passed += report.passed;
  }
  return result;
}

}  // namespace dseq::gradsuite
