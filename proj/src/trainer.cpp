#include "dseq/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dseq/ops.hpp"
#include "dseq/tensor_io.hpp"

DSEQ_BEGIN_NAMESPACE

// ---------------------------------------------------------------------------
// Config

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw ConfigError("config: '" + key + "' expects a finite number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + text + "'");
  }
  return v;
}

const char* similarity_name(Similarity s) { return s == Similarity::Cosine ? "cosine" : "dot"; }

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <class T>
Field size_field(const char* key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_uint(key, v)); }};
}

Field real_field(const char* key, double TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return format_double(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_double(key, v); }};
}

Field vit_size_field(const char* key, std::size_t ViTConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.vit.*member); },
          [key, member](TrainConfig& c, const std::string& v) { c.vit.*member = parse_uint(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      size_field("epochs", &TrainConfig::epochs),
      size_field("batch_size", &TrainConfig::batch_size),
      real_field("lr_start", &TrainConfig::lr_start),
      real_field("lr_peak", &TrainConfig::lr_peak),
      real_field("lr_final", &TrainConfig::lr_final),
      size_field("warmup_epochs", &TrainConfig::warmup_epochs),
      real_field("wd_start", &TrainConfig::wd_start),
      real_field("wd_end", &TrainConfig::wd_end),
      real_field("ema_start", &TrainConfig::ema_start),
      real_field("ema_end", &TrainConfig::ema_end),
      real_field("grad_clip", &TrainConfig::grad_clip),
      real_field("delta", &TrainConfig::delta),
      size_field("regions", &TrainConfig::regions),
      real_field("alpha", &TrainConfig::alpha),
      size_field("otsu_bins", &TrainConfig::otsu_bins),
      real_field("scale_min", &TrainConfig::scale_min),
      real_field("scale_max", &TrainConfig::scale_max),
      real_field("aspect_min", &TrainConfig::aspect_min),
      real_field("aspect_max", &TrainConfig::aspect_max),
      size_field("min_patches", &TrainConfig::min_patches),
      size_field("saliency_layer", &TrainConfig::saliency_layer),
      {"similarity", [](const TrainConfig& c) { return std::string(similarity_name(c.similarity)); },
       [](TrainConfig& c, const std::string& v) {
         if (v == "cosine") {
           c.similarity = Similarity::Cosine;
         } else if (v == "dot") {
           c.similarity = Similarity::Dot;
         } else {
           throw ConfigError("config: 'similarity' must be cosine or dot, got '" + v + "'");
         }
       }},
      {"order", [](const TrainConfig& c) { return std::string(to_string(c.order)); },
       [](TrainConfig& c, const std::string& v) { c.order = parse_order_scheme(v); }},
      size_field("seed", &TrainConfig::seed),
      vit_size_field("image_size", &ViTConfig::image_size),
      vit_size_field("patch_size", &ViTConfig::patch_size),
      vit_size_field("channels", &ViTConfig::channels),
      vit_size_field("depth", &ViTConfig::depth),
      vit_size_field("dim", &ViTConfig::dim),
      vit_size_field("heads", &ViTConfig::heads),
      {"mlp_ratio", [](const TrainConfig& c) { return format_double(c.vit.mlp_ratio); },
       [](TrainConfig& c, const std::string& v) { c.vit.mlp_ratio = parse_double("mlp_ratio", v); }},
      vit_size_field("predictor_depth", &ViTConfig::predictor_depth),
      vit_size_field("predictor_dim", &ViTConfig::predictor_dim),
      {"dataset", [](const TrainConfig& c) { return c.dataset; },
       [](TrainConfig& c, const std::string& v) { c.dataset = v; }},
      size_field("max_images", &TrainConfig::max_images),
      {"out", [](const TrainConfig& c) { return c.out; }, [](TrainConfig& c, const std::string& v) { c.out = v; }},
      size_field("checkpoint_every", &TrainConfig::checkpoint_every),
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

SelectionConfig TrainConfig::selection() const {
  SelectionConfig s;
  s.regions = regions;
  s.alpha = alpha;
  s.bins = otsu_bins;
  s.block.scale_lo = scale_min;
  s.block.scale_hi = scale_max;
  s.block.aspect_lo = aspect_min;
  s.block.aspect_hi = aspect_max;
  s.block.min_patches = min_patches;
  return s;
}

void TrainConfig::validate() const {
  vit.validate();
  if (vit.channels != 3) throw ConfigError("config: channels must be 3 for the synthetic dataset");
  if (epochs == 0) throw ConfigError("config: epochs must be positive");
  if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (warmup_epochs >= epochs) throw ConfigError("config: warmup_epochs must be smaller than epochs");
  for (double v : {lr_start, lr_peak, lr_final}) {
    if (!(v > 0)) throw ConfigError("config: learning rates must be positive");
  }
  if (wd_start < 0 || wd_end < 0) throw ConfigError("config: weight decay must be non-negative");
  if (!(ema_start >= 0 && ema_start <= 1 && ema_end >= 0 && ema_end <= 1)) {
    throw ConfigError("config: EMA decay must lie in [0, 1]");
  }
  if (!(delta > 0)) throw ConfigError("config: delta must be positive");
  if (grad_clip < 0) throw ConfigError("config: grad_clip must be non-negative");
  if (regions < 2) throw ConfigError("config: regions must be at least 2");
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("config: alpha must lie in (0, 1)");
  if (otsu_bins < 2) throw ConfigError("config: otsu_bins must be at least 2");
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max < 1)) {
    throw ConfigError("config: need 0 < scale_min <= scale_max < 1");
  }
  if (!(aspect_min > 0 && aspect_min <= aspect_max)) throw ConfigError("config: need 0 < aspect_min <= aspect_max");
  if (saliency_layer > vit.depth) throw ConfigError("config: saliency_layer exceeds depth");
  const auto [lo, hi] = block_area_bounds(vit.grid(), vit.grid(), selection().block);
  if (lo > hi) throw ConfigError("config: no random block satisfies min_patches and the scale range on this grid");
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

std::string config_text(const TrainConfig& cfg) {
  std::string text;
  for (const auto& [k, v] : config_entries(cfg)) text += k + "=" + v + "\n";
  return text;
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config_text(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

TrainConfig parse_config(const std::string& text, const std::string& source) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
    }
    try {
      apply_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Schedules

Schedule Schedule::from(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  Schedule s;
  s.total_steps = static_cast<std::int64_t>(cfg.epochs * steps_per_epoch);
  s.warmup_steps = static_cast<std::int64_t>(cfg.warmup_epochs * steps_per_epoch);
  s.lr_start = cfg.lr_start;
  s.lr_peak = cfg.lr_peak;
  s.lr_final = cfg.lr_final;
  s.wd_start = cfg.wd_start;
  s.wd_end = cfg.wd_end;
  s.ema_start = cfg.ema_start;
  s.ema_end = cfg.ema_end;
  return s;
}

namespace {

// Fraction of the way from a to b, clamped to [0, 1]; 0 for an empty span.
double progress(std::int64_t step, std::int64_t a, std::int64_t b) {
  if (b <= a) return 0.0;
  return std::clamp(static_cast<double>(step - a) / static_cast<double>(b - a), 0.0, 1.0);
}

double cosine_weight(double p) { return 0.5 * (1.0 + std::cos(std::numbers::pi * p)); }

}  // namespace

double Schedule::lr_at(std::int64_t step) const {
  if (step < warmup_steps) {
    return lr_start + (lr_peak - lr_start) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double c = cosine_weight(progress(step, warmup_steps, total_steps - 1));
  return lr_peak * c + lr_final * (1.0 - c);
}

double Schedule::wd_at(std::int64_t step) const {
  const double c = cosine_weight(progress(step, 0, total_steps - 1));
  return wd_start * c + wd_end * (1.0 - c);
}

double Schedule::ema_at(std::int64_t step) const {
  const double p = progress(step, 0, total_steps - 1);
  return ema_start * (1.0 - p) + ema_end * p;
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

void AdamW::init(const std::vector<NamedTensor>& params) {
  m_.clear();
  v_.clear();
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), Real(0));
    v_.emplace_back(p.tensor.numel(), Real(0));
  }
  t_ = 0;
}

bool AdamW::step(const std::vector<NamedTensor>& params, double lr, double wd) {
  if (params.size() != m_.size()) throw ConfigError("AdamW: parameter list does not match the optimizer state");
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) return false;
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto data = t.mutable_data();
    auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const double shrink = params[i].decay ? 1.0 - lr * wd : 1.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * g;
      const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * g * g;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
      data[j] = static_cast<Real>(static_cast<double>(data[j]) * shrink - lr * update);
    }
  }
  return true;
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      for (auto& g : t.mutable_grad()) g = static_cast<Real>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

void ema_update(EncoderParams& target, const EncoderParams& source, double m) {
  if (!(m >= 0 && m <= 1)) throw ConfigError("ema_update: decay must lie in [0, 1]");
  auto dst = named_parameters(target, "");
  auto src = named_parameters(source, "");
  if (dst.size() != src.size()) throw ShapeError("ema_update: encoders have different parameter counts");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw ShapeError("ema_update: " + dst[i].name + " is " + to_string(dst[i].tensor.shape()) + " vs " +
                       to_string(src[i].tensor.shape()));
    }
    auto d = dst[i].tensor.mutable_data();
    auto s = src[i].tensor.data();
    for (std::size_t j = 0; j < d.size(); ++j) {
      d[j] = static_cast<Real>(m * static_cast<double>(d[j]) + (1.0 - m) * static_cast<double>(s[j]));
    }
  }
}

TrainState TrainState::fresh(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  s.model = Model::init(cfg.vit, cfg.seed);
  s.optimizer.init(s.model.trainable());
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'S', 'E', 'Q', 'C', 'K', 'P', 'T'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::vector<std::pair<std::string, Tensor>> checkpoint_tensors(const TrainState& state) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : state.model.all()) out.emplace_back(p.name, p.tensor);
  const auto trainable = state.model.trainable();
  const auto& m = state.optimizer.first_moments();
  const auto& v = state.optimizer.second_moments();
  for (std::size_t i = 0; i < trainable.size() && i < m.size(); ++i) {
    const Shape& shape = trainable[i].tensor.shape();
    out.emplace_back("adam.m." + trainable[i].name,
                     Tensor::from(shape, std::vector<Real>(m[i].begin(), m[i].end())));
    out.emplace_back("adam.v." + trainable[i].name,
                     Tensor::from(shape, std::vector<Real>(v[i].begin(), v[i].end())));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state) {
  nlohmann::json manifest;
  manifest["format"] = "dseq-checkpoint";
  manifest["version"] = 1;
  manifest["step"] = state.step;
  manifest["epoch"] = state.epoch;
  manifest["adam_steps"] = state.optimizer.steps();
  manifest["config_hash"] = config_hash(state.cfg);
  nlohmann::json config = nlohmann::json::array();
  for (const auto& [k, v] : config_entries(state.cfg)) config.push_back({k, v});
  manifest["config"] = config;

  std::vector<std::uint8_t> data;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, tensor] : checkpoint_tensors(state)) {
    const auto record = encode_dsqt(tensor);
    tensors.push_back({{"name", name}, {"offset", data.size()}, {"bytes", record.size()}, {"shape", tensor.shape()}});
    data.insert(data.end(), record.begin(), record.end());
  }
  manifest["tensors"] = tensors;

  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

TrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 16) {
    throw FormatError(source + ": truncated checkpoint header at offset " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(source + ": bad checkpoint magic at offset 0");
  }
  const std::uint64_t manifest_len = get_u64(bytes, 8);
  if (manifest_len > bytes.size() - 16) {
    throw FormatError(source + ": manifest of " + std::to_string(manifest_len) + " bytes runs past the end at offset " +
                      std::to_string(bytes.size()));
  }
  const std::size_t data_start = 16 + static_cast<std::size_t>(manifest_len);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": manifest at offset 16: " + e.what());
  }

  TrainState state;
  std::map<std::string, DsqtArray> arrays;
  try {
    if (manifest.at("format") != "dseq-checkpoint") throw FormatError(source + ": not a checkpoint");
    for (const auto& kv : manifest.at("config")) {
      apply_config_value(state.cfg, kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
    }
    state.step = manifest.at("step").get<std::int64_t>();
    state.epoch = manifest.at("epoch").get<std::size_t>();
    for (const auto& t : manifest.at("tensors")) {
      const auto offset = t.at("offset").get<std::size_t>();
      const auto length = t.at("bytes").get<std::size_t>();
      const std::size_t at = data_start + offset;
      if (at > bytes.size() || length > bytes.size() - at) {
        throw FormatError(source + ": tensor '" + t.at("name").get<std::string>() + "' at offset " +
                          std::to_string(at) + " runs past the end of the file (" + std::to_string(bytes.size()) +
                          " bytes)");
      }
      std::size_t consumed = 0;
      arrays[t.at("name").get<std::string>()] = decode_dsqt(bytes.subspan(at, length), at, &consumed, source);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": malformed manifest: " + e.what());
  }

  state.cfg.validate();
  state.model = Model::init(state.cfg.vit, state.cfg.seed);
  auto fill = [&](const std::string& name, std::span<Real> dst, const Shape& shape) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError(source + ": missing tensor '" + name + "'");
    if (it->second.shape != shape) {
      throw FormatError(source + ": tensor '" + name + "' has shape " + to_string(it->second.shape) + ", expected " +
                        to_string(shape));
    }
    const auto values = it->second.to_doubles();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(values[i]);
  };
  for (auto& p : state.model.all()) fill(p.name, p.tensor.mutable_data(), p.tensor.shape());
  state.optimizer.init(state.model.trainable());
  const auto trainable = state.model.trainable();
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    fill("adam.m." + trainable[i].name, state.optimizer.first_moments()[i], trainable[i].tensor.shape());
    fill("adam.v." + trainable[i].name, state.optimizer.second_moments()[i], trainable[i].tensor.shape());
  }
  state.optimizer.set_steps(manifest.at("adam_steps").get<std::int64_t>());
  return state;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  write_file_bytes(path, encode_checkpoint(state));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Training

Tensor image_loss(const TrainState& state, const Tensor& image, double epoch, Rng& rng,
                  std::vector<StepBatch>* steps_out) {
  const TrainConfig& cfg = state.cfg;
  std::vector<Tensor> blocks;
  const Tensor targets = target_embeddings(image, state.model.target, cfg.vit, &blocks);
  std::vector<int> positions{kClsPosition};
  for (std::size_t i = 0; i < cfg.vit.patch_count(); ++i) positions.push_back(static_cast<int>(i));
  const SaliencyMap map = saliency_from_tokens(blocks[cfg.layer() - 1], positions, cfg.vit.grid(), cfg.similarity);
  const double total = static_cast<double>(cfg.epochs > 1 ? cfg.epochs - 1 : 1);
  const RegionSet regions = curriculum_select(map, epoch, total, cfg.selection(), rng);
  auto steps = sequential_predict(image, regions, cfg.order, state.model, rng, targets);
  Tensor loss = dseq_loss(steps, cfg.delta);
  if (steps_out) *steps_out = std::move(steps);
  return loss;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<LossRow>& rows, bool append) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw Error("cannot write loss log " + path.string());
  if (header) out << kLossLogHeader << "\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.epoch << ',' << format_double(r.loss) << ',' << format_double(r.lambda) << ','
        << format_double(r.lr) << ',' << format_double(r.wd) << ',' << format_double(r.ema) << "\n";
  }
}

namespace {

constexpr int kMaxNonFinite = 3;

void zero_grads(const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<SyntheticSample>& data, const TrainOptions& options) {
  cfg.validate();
  std::size_t n = data.size();
  if (cfg.max_images) n = std::min(n, cfg.max_images);
  if (n == 0) throw ConfigError("train: dataset is empty");
  for (std::size_t i = 0; i < n; ++i) {
    if (data[i].image.shape() != Shape{cfg.vit.channels, cfg.vit.image_size, cfg.vit.image_size}) {
      throw ShapeError("train: sample " + std::to_string(i) + " is " + to_string(data[i].image.shape()) +
                       ", model expects image_size " + std::to_string(cfg.vit.image_size));
    }
  }

  TrainResult result;
  TrainState& state = result.state;
  if (options.resume) {
    state = load_checkpoint(*options.resume);
    if (config_hash(state.cfg) != config_hash(cfg)) {
      throw ConfigError("train: checkpoint " + options.resume->string() + " was written with a different config");
    }
  } else {
    state = TrainState::fresh(cfg);
  }

  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const Schedule schedule = Schedule::from(cfg, per_epoch);
  const auto trainable = state.model.trainable();
  const Rng root(cfg.seed);
  const std::filesystem::path out_dir(cfg.out);
  if (options.write_files) std::filesystem::create_directories(out_dir);

  int non_finite = 0;
  std::vector<LossRow> epoch_rows;
  for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lambda = curriculum_lambda(static_cast<double>(epoch), static_cast<double>(cfg.epochs > 1 ? cfg.epochs - 1 : 1));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffler = root.split(1).split(epoch);
    shuffler.shuffle(order);
    const Rng image_root = root.split(2).split(epoch);

    double epoch_loss = 0;
    std::size_t epoch_batches = 0;
    epoch_rows.clear();
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size, end = std::min(n, begin + cfg.batch_size);
      const auto scale_factor = static_cast<Real>(1.0 / static_cast<double>(end - begin));
      zero_grads(trainable);
      double batch_loss = 0;
      for (std::size_t i = begin; i < end; ++i) {
        Tape::current().clear();
        Rng rng = image_root.split(order[i]);
        Tensor loss = image_loss(state, data[order[i]].image, static_cast<double>(epoch), rng);
        batch_loss += static_cast<double>(loss.item());
        backward(scale(loss, scale_factor));
      }
      Tape::current().clear();
      batch_loss /= static_cast<double>(end - begin);

      const double lr = schedule.lr_at(state.step), wd = schedule.wd_at(state.step), m = schedule.ema_at(state.step);
      bool applied = std::isfinite(batch_loss);
      if (applied) {
        clip_grad_norm(trainable, cfg.grad_clip);
        applied = state.optimizer.step(trainable, lr, wd);
      }
      if (!applied) {
        if (++non_finite >= kMaxNonFinite) {
          throw NonFiniteError("training aborted at step " + std::to_string(state.step) + ": " +
                               std::to_string(non_finite) + " consecutive non-finite losses or gradients");
        }
      } else {
        non_finite = 0;
        ema_update(state.model.target, state.model.context, m);
      }
      zero_grads(trainable);
      epoch_rows.push_back({state.step, epoch, batch_loss, lambda, lr, wd, m});
      if (std::isfinite(batch_loss)) {
        epoch_loss += batch_loss;
        ++epoch_batches;
      }
      ++state.step;
    }
    state.epoch = epoch + 1;
    result.log.insert(result.log.end(), epoch_rows.begin(), epoch_rows.end());

    if (options.write_files) {
      // Rows are flushed per epoch so a resumed run appends without duplicates.
      write_loss_log(out_dir / "loss_log.csv", epoch_rows, options.resume.has_value() || epoch > 0);
      const bool last = state.epoch == cfg.epochs;
      if (last || (cfg.checkpoint_every && state.epoch % cfg.checkpoint_every == 0)) {
        const auto path = out_dir / (last ? std::string("final.ckpt") : "epoch_" + std::to_string(state.epoch) + ".ckpt");
        save_checkpoint(path, state);
        if (last) result.final_checkpoint = path;
      }
    }
    if (options.on_epoch) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      options.on_epoch({epoch, epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : NAN, lambda, secs});
    }
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const TrainOptions& options) {
  Dataset ds = read_dataset(cfg.dataset);
  return train(cfg, ds.samples, options);
}

DSEQ_END_NAMESPACE
