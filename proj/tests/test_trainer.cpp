#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dseq/ops.hpp"
#include "dseq/tensor_io.hpp"
#include "dseq/trainer.hpp"

using namespace dseq;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(const fs::path& out) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.warmup_epochs = 1;
  cfg.vit.image_size = 32;
  cfg.vit.patch_size = 4;
  cfg.vit.depth = 2;
  cfg.vit.dim = 16;
  cfg.vit.heads = 2;
  cfg.vit.mlp_ratio = 2.0;
  cfg.vit.predictor_depth = 1;
  cfg.vit.predictor_dim = 8;
  cfg.out = out.string();
  return cfg;
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("dseq_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const std::vector<SyntheticSample>& images64() {
  static const auto data = generate_dataset(64, 32, 11);
  return data;
}

std::vector<NamedTensor> single_param(std::vector<Real> values, bool decay) {
  const std::size_t n = values.size();
  Tensor t = Tensor::from({n}, std::move(values), true);
  return {{"p", t, decay}};
}

void set_grad(std::vector<NamedTensor>& params, const std::vector<Real>& g) {
  Tensor t = params[0].tensor;
  backward(sum(mul(t, Tensor::from({g.size()}, g))));
  Tape::current().clear();
}

std::vector<Real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const EncoderParams& a, const EncoderParams& b) {
  double worst = 0;
  auto pa = named_parameters(a, ""), pb = named_parameters(b, "");
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i].tensor.numel(); ++j) {
      worst = std::max(worst, std::abs(static_cast<double>(pa[i].tensor.data()[j]) - pb[i].tensor.data()[j]));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("schedules hit their endpoints exactly") {
  TrainConfig cfg;
  const Schedule s = Schedule::from(cfg, 32);
  REQUIRE(s.total_steps == 50 * 32);
  REQUIRE(s.warmup_steps == 5 * 32);
  const auto last = s.total_steps - 1;
  CHECK(s.lr_at(0) == 1e-4);
  CHECK(s.lr_at(s.warmup_steps) == 1e-3);
  CHECK(s.lr_at(last) == 1e-6);
  CHECK(s.wd_at(0) == 4e-2);
  CHECK(s.wd_at(last) == 4e-1);
  CHECK(s.ema_at(0) == 0.996);
  CHECK(s.ema_at(last) == 1.0);
}

TEST_CASE("schedule shapes") {
  TrainConfig cfg;
  const Schedule s = Schedule::from(cfg, 10);
  for (std::int64_t t = 1; t <= s.warmup_steps; ++t) CHECK(s.lr_at(t) > s.lr_at(t - 1));
  CHECK(s.lr_at(s.warmup_steps / 2) == doctest::Approx(0.5 * (1e-4 + 1e-3)));
  for (std::int64_t t = s.warmup_steps + 1; t < s.total_steps; ++t) {
    CHECK(s.lr_at(t) <= s.lr_at(t - 1));
    CHECK(s.wd_at(t) >= s.wd_at(t - 1));
    CHECK(s.ema_at(t) >= s.ema_at(t - 1));
  }
  const std::int64_t mid = s.warmup_steps + (s.total_steps - 1 - s.warmup_steps) / 2;
  CHECK(s.lr_at(mid) == doctest::Approx(0.5 * (1e-3 + 1e-6)).epsilon(1e-3));
}

TEST_CASE("ema_update examples") {
  ViTConfig vit = tiny_config("x").vit;
  Model a = Model::init(vit, 1);
  EncoderParams target = clone(a.context);
  for (auto& p : named_parameters(target, "")) {
    Tensor t = p.tensor;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), Real(1));
  }
  EncoderParams zero = clone(a.context);
  for (auto& p : named_parameters(zero, "")) {
    Tensor t = p.tensor;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), Real(0));
  }
  EncoderParams same = clone(target);
  ema_update(same, zero, 1.0);
  CHECK(max_abs_diff(same, target) == 0);

  EncoderParams copy = clone(target);
  ema_update(copy, a.context, 0.0);
  CHECK(max_abs_diff(copy, a.context) == 0);

  ema_update(target, zero, 0.996);
  for (const auto& p : named_parameters(target, "")) {
    for (Real v : p.tensor.data()) CHECK(v == static_cast<Real>(0.996));
  }
  CHECK_THROWS_AS(ema_update(target, zero, 1.5), ConfigError);

  ViTConfig other = vit;
  other.dim = 8;
  other.heads = 2;
  Model b = Model::init(other, 1);
  CHECK_THROWS_AS(ema_update(target, b.context, 0.5), ShapeError);
}

TEST_CASE("ema contraction") {
  ViTConfig vit = tiny_config("x").vit;
  Model m = Model::init(vit, 3);
  EncoderParams target = Model::init(vit, 4).context;
  double prev = max_abs_diff(target, m.context);
  for (int i = 0; i < 30; ++i) {
    ema_update(target, m.context, 0.9);
    const double now = max_abs_diff(target, m.context);
    CHECK(now <= prev);
    prev = now;
  }
  CHECK(prev < 0.1 * max_abs_diff(Model::init(vit, 4).context, m.context));
}

TEST_CASE("AdamW with zero gradient and zero weight decay leaves parameters unchanged") {
  auto params = single_param({0.5f, -2.0f, 3.25f}, true);
  AdamW opt;
  opt.init(params);
  set_grad(params, {0, 0, 0});
  REQUIRE(opt.step(params, 1e-3, 0.0));
  CHECK(values(params[0].tensor) == std::vector<Real>{0.5f, -2.0f, 3.25f});
}

TEST_CASE("AdamW weight decay alone shrinks by 1 - lr*wd") {
  const std::vector<Real> start{0.5f, -2.0f, 3.25f};
  auto params = single_param(start, true);
  AdamW opt;
  opt.init(params);
  REQUIRE(opt.step(params, 1e-2, 0.4));  // no gradient recorded at all
  for (std::size_t i = 0; i < start.size(); ++i) {
    CHECK(params[0].tensor.data()[i] == static_cast<Real>(static_cast<double>(start[i]) * (1 - 1e-2 * 0.4)));
  }
  auto bias = single_param(start, false);
  AdamW opt2;
  opt2.init(bias);
  REQUIRE(opt2.step(bias, 1e-2, 0.4));
  CHECK(values(bias[0].tensor) == start);
}

TEST_CASE("AdamW rejects a non-finite gradient without touching state") {
  auto params = single_param({1, 2}, true);
  AdamW opt;
  opt.init(params);
  set_grad(params, {0.5f, std::numeric_limits<Real>::quiet_NaN()});
  CHECK_FALSE(opt.step(params, 1e-3, 0.1));
  CHECK(opt.steps() == 0);
  CHECK(values(params[0].tensor) == std::vector<Real>{1, 2});
  CHECK(opt.first_moments()[0][0] == 0);
}

TEST_CASE("clip_grad_norm") {
  auto params = single_param({0, 0}, true);
  set_grad(params, {3, 4});
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(params[0].tensor.grad()[0] == doctest::Approx(0.6));
  CHECK(params[0].tensor.grad()[1] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0));
  CHECK(params[0].tensor.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("config text round-trips and hashes stably") {
  TrainConfig cfg;
  cfg.order = OrderScheme::Spatial;
  cfg.similarity = Similarity::Dot;
  cfg.lr_peak = 2.5e-3;
  cfg.vit.depth = 6;
  const TrainConfig back = parse_config(config_text(cfg));
  CHECK(config_text(back) == config_text(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(config_hash(cfg).size() == 16);
  CHECK(config_hash(cfg) != config_hash(TrainConfig{}));

  const TrainConfig parsed = parse_config("# comment\n\n epochs = 3 \nlr_peak=0.002\norder=random\n");
  CHECK(parsed.epochs == 3);
  CHECK(parsed.lr_peak == 0.002);
  CHECK(parsed.order == OrderScheme::Random);
  CHECK(parsed.batch_size == TrainConfig{}.batch_size);
}

TEST_CASE("shipped desk config equals the built-in defaults") {
  const TrainConfig cfg = load_config(std::string(DSEQ_CONFIG_DIR) + "/desk.cfg");
  CHECK(config_hash(cfg) == config_hash(TrainConfig{}));
}

TEST_CASE("config errors name the line") {
  try {
    parse_config("epochs=2\nbogus=1\n", "run.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("run.cfg:2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("epochs=two"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr_peak=1e-3x"), ConfigError);
  CHECK_THROWS_AS(parse_config("no equals sign"), ConfigError);
  CHECK_THROWS_AS(parse_config("similarity=euclid"), ConfigError);
  TrainConfig bad;
  bad.warmup_epochs = bad.epochs;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.vit.image_size = 16;  // 4x4 grid cannot hold a 10-patch block under 20% area
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint save-load-save is byte-identical") {
  const fs::path dir = scratch("ckpt");
  TrainState state = TrainState::fresh(tiny_config(dir));
  state.step = 17;
  state.epoch = 1;
  state.optimizer.set_steps(17);
  Rng rng(5);
  for (auto& m : state.optimizer.first_moments())
    for (auto& v : m) v = static_cast<Real>(rng.normal());
  for (auto& m : state.optimizer.second_moments())
    for (auto& v : m) v = static_cast<Real>(rng.uniform());

  const auto bytes = encode_checkpoint(state);
  save_checkpoint(dir / "a.ckpt", state);
  const TrainState loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded.step == 17);
  CHECK(loaded.epoch == 1);
  CHECK(loaded.optimizer.steps() == 17);
  CHECK(config_hash(loaded.cfg) == config_hash(state.cfg));
  CHECK(encode_checkpoint(loaded) == bytes);
  auto all_a = state.model.all(), all_b = loaded.model.all();
  REQUIRE(all_a.size() == all_b.size());
  for (std::size_t i = 0; i < all_a.size(); ++i) CHECK(values(all_a[i].tensor) == values(all_b[i].tensor));
}

TEST_CASE("corrupt checkpoints report offsets") {
  const fs::path dir = scratch("corrupt");
  const auto bytes = encode_checkpoint(TrainState::fresh(tiny_config(dir)));
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() - 100));
  try {
    decode_checkpoint(cut, "cut.ckpt");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("cut.ckpt") != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
  }
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad, "bad"), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(10), "short"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
}

TEST_CASE("two-epoch smoke run on 64 images") {
  const fs::path dir = scratch("smoke");
  const TrainConfig cfg = tiny_config(dir);
  std::vector<EpochSummary> epochs;
  TrainOptions opts;
  opts.on_epoch = [&](const EpochSummary& s) { epochs.push_back(s); };
  const TrainResult r = train(cfg, images64(), opts);

  CHECK(r.log.size() == 8);  // 2 epochs x 4 batches
  CHECK(r.state.step == 8);
  CHECK(r.state.epoch == 2);
  CHECK(epochs.size() == 2);
  CHECK(epochs[0].lambda == 0.0);
  CHECK(epochs[1].lambda == 1.0);
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    CHECK(r.log[i].step == static_cast<std::int64_t>(i));
    CHECK(std::isfinite(r.log[i].loss));
  }

  std::ifstream log(dir / "loss_log.csv");
  std::string line;
  std::getline(log, line);
  CHECK(line == kLossLogHeader);
  std::size_t rows = 0;
  while (std::getline(log, line)) rows += !line.empty();
  CHECK(rows == r.log.size());

  REQUIRE(fs::exists(r.final_checkpoint));
  const auto bytes = read_file_bytes(r.final_checkpoint);
  const TrainState loaded = decode_checkpoint(bytes, "final");
  CHECK(encode_checkpoint(loaded) == bytes);
  CHECK(encode_checkpoint(r.state) == bytes);
}

TEST_CASE("identical config and seed give identical checkpoints") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  TrainConfig ca = tiny_config(a), cb = tiny_config(b);
  cb.out = ca.out;  // the output path is part of the config text
  TrainOptions opts;
  opts.write_files = false;
  const auto ra = train(ca, images64(), opts);
  const auto rb = train(cb, images64(), opts);
  CHECK(encode_checkpoint(ra.state) == encode_checkpoint(rb.state));

  TrainConfig cc = ca;
  cc.seed = 8;
  CHECK(encode_checkpoint(train(cc, images64(), opts).state) != encode_checkpoint(ra.state));
}

TEST_CASE("resuming from a mid-run checkpoint matches an uninterrupted run") {
  const fs::path dir = scratch("resume");
  TrainConfig cfg = tiny_config(dir);
  cfg.epochs = 3;
  cfg.checkpoint_every = 1;
  const auto full = train(cfg, images64());
  const auto full_bytes = read_file_bytes(full.final_checkpoint);

  TrainOptions opts;
  opts.resume = dir / "epoch_2.ckpt";
  const auto resumed = train(cfg, images64(), opts);
  CHECK(read_file_bytes(resumed.final_checkpoint) == full_bytes);
  CHECK(resumed.log.size() == 4);

  TrainConfig other = cfg;
  other.lr_peak = 5e-3;
  CHECK_THROWS_AS(train(other, images64(), opts), ConfigError);
}

TEST_CASE("the optimizer never touches the target encoder") {
  const fs::path dir = scratch("frozen");
  TrainConfig cfg = tiny_config(dir);
  cfg.epochs = 2;
  cfg.ema_start = cfg.ema_end = 1.0;
  TrainOptions opts;
  opts.write_files = false;
  const TrainState before = TrainState::fresh(cfg);
  const auto r = train(cfg, images64(), opts);
  CHECK(max_abs_diff(r.state.model.target, before.model.target) == 0);
  CHECK(max_abs_diff(r.state.model.context, before.model.context) > 0);
}

TEST_CASE("repeated non-finite losses abort training") {
  auto data = std::vector<SyntheticSample>(images64().begin(), images64().end());
  for (auto& s : data) {
    s.image = s.image.detach();
    std::fill(s.image.mutable_data().begin(), s.image.mutable_data().end(), std::numeric_limits<Real>::quiet_NaN());
  }
  TrainOptions opts;
  opts.write_files = false;
  CHECK_THROWS_AS(train(tiny_config(scratch("nan")), data, opts), NonFiniteError);
}

TEST_CASE("train rejects mismatched or empty data") {
  TrainOptions opts;
  opts.write_files = false;
  const TrainConfig cfg = tiny_config(scratch("bad"));
  CHECK_THROWS_AS(train(cfg, std::vector<SyntheticSample>{}, opts), ConfigError);
  CHECK_THROWS_AS(train(cfg, generate_dataset(4, 16, 1), opts), ShapeError);
}
