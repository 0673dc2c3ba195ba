#include "dseq/vit.hpp"

#include <algorithm>
#include <string>

#include "dseq/ops.hpp"

DSEQ_BEGIN_NAMESPACE

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_param(Rng& rng, Shape shape) {
  std::vector<Real> values(numel(shape));
  for (auto& v : values) v = static_cast<Real>(kInitStd * rng.normal());
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor zero_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor one_param(Shape shape) { return Tensor::full(std::move(shape), Real(1), true); }

BlockParams init_block(std::size_t dim, std::size_t hidden, Rng& rng) {
  BlockParams b;
  b.ln1_gain = one_param({dim});
  b.ln1_bias = zero_param({dim});
  b.wq = normal_param(rng, {dim, dim});
  b.bq = zero_param({dim});
  b.wk = normal_param(rng, {dim, dim});
  b.bk = zero_param({dim});
  b.wv = normal_param(rng, {dim, dim});
  b.bv = zero_param({dim});
  b.wo = normal_param(rng, {dim, dim});
  b.bo = zero_param({dim});
  b.ln2_gain = one_param({dim});
  b.ln2_bias = zero_param({dim});
  b.w1 = normal_param(rng, {dim, hidden});
  b.b1 = zero_param({hidden});
  b.w2 = normal_param(rng, {hidden, dim});
  b.b2 = zero_param({dim});
  return b;
}

void append_block(std::vector<NamedTensor>& out, const BlockParams& b, const std::string& prefix) {
  out.push_back({prefix + "ln1.gain", b.ln1_gain, false});
  out.push_back({prefix + "ln1.bias", b.ln1_bias, false});
  out.push_back({prefix + "attn.wq", b.wq, true});
  out.push_back({prefix + "attn.bq", b.bq, false});
  out.push_back({prefix + "attn.wk", b.wk, true});
  out.push_back({prefix + "attn.bk", b.bk, false});
  out.push_back({prefix + "attn.wv", b.wv, true});
  out.push_back({prefix + "attn.bv", b.bv, false});
  out.push_back({prefix + "attn.wo", b.wo, true});
  out.push_back({prefix + "attn.bo", b.bo, false});
  out.push_back({prefix + "ln2.gain", b.ln2_gain, false});
  out.push_back({prefix + "ln2.bias", b.ln2_bias, false});
  out.push_back({prefix + "mlp.w1", b.w1, true});
  out.push_back({prefix + "mlp.b1", b.b1, false});
  out.push_back({prefix + "mlp.w2", b.w2, true});
  out.push_back({prefix + "mlp.b2", b.b2, false});
}

Tensor deep_copy(const Tensor& t) { return t.detach(); }

BlockParams copy_block(const BlockParams& b) {
  return {deep_copy(b.ln1_gain), deep_copy(b.ln1_bias), deep_copy(b.wq),       deep_copy(b.bq),
          deep_copy(b.wk),       deep_copy(b.bk),       deep_copy(b.wv),       deep_copy(b.bv),
          deep_copy(b.wo),       deep_copy(b.bo),       deep_copy(b.ln2_gain), deep_copy(b.ln2_bias),
          deep_copy(b.w1),       deep_copy(b.b1),       deep_copy(b.w2),       deep_copy(b.b2)};
}

void check_cells(const char* what, const std::vector<int>& cells, std::size_t patch_count) {
  std::vector<char> seen(patch_count, 0);
  for (int c : cells) {
    if (c < 0 || static_cast<std::size_t>(c) >= patch_count) {
      throw ConfigError(std::string(what) + ": cell " + std::to_string(c) + " outside the patch grid");
    }
    if (seen[static_cast<std::size_t>(c)]) {
      throw ConfigError(std::string(what) + ": duplicate cell " + std::to_string(c));
    }
    seen[static_cast<std::size_t>(c)] = 1;
  }
}

}  // namespace

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size must be a positive multiple of patch_size");
  }
  if (heads == 0 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
  if (predictor_dim % heads != 0) throw ConfigError("predictor_dim must be divisible by heads");
  if (depth == 0) throw ConfigError("depth must be positive");
  if (channels == 0) throw ConfigError("channels must be positive");
  if (!(mlp_ratio > 0)) throw ConfigError("mlp_ratio must be positive");
}

EncoderParams init_encoder(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams p;
  p.patch_weight = normal_param(rng, {cfg.patch_dim(), cfg.dim});
  p.patch_bias = zero_param({cfg.dim});
  p.pos_embed = normal_param(rng, {cfg.patch_count(), cfg.dim});
  p.cls_token = normal_param(rng, {1, cfg.dim});
  p.cls_pos = normal_param(rng, {1, cfg.dim});
  for (std::size_t i = 0; i < cfg.depth; ++i) p.blocks.push_back(init_block(cfg.dim, cfg.hidden_dim(), rng));
  p.norm_gain = one_param({cfg.dim});
  p.norm_bias = zero_param({cfg.dim});
  return p;
}

PredictorParams init_predictor(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  PredictorParams p;
  p.embed_weight = normal_param(rng, {cfg.dim, cfg.predictor_dim});
  p.embed_bias = zero_param({cfg.predictor_dim});
  p.mask_token = normal_param(rng, {1, cfg.predictor_dim});
  p.pos_embed = normal_param(rng, {cfg.patch_count(), cfg.predictor_dim});
  p.cls_pos = normal_param(rng, {1, cfg.predictor_dim});
  for (std::size_t i = 0; i < cfg.predictor_depth; ++i) {
    p.blocks.push_back(init_block(cfg.predictor_dim, cfg.predictor_hidden_dim(), rng));
  }
  p.norm_gain = one_param({cfg.predictor_dim});
  p.norm_bias = zero_param({cfg.predictor_dim});
  p.out_weight = normal_param(rng, {cfg.predictor_dim, cfg.dim});
  p.out_bias = zero_param({cfg.dim});
  return p;
}

EncoderParams clone(const EncoderParams& params) {
  EncoderParams p;
  p.patch_weight = deep_copy(params.patch_weight);
  p.patch_bias = deep_copy(params.patch_bias);
  p.pos_embed = deep_copy(params.pos_embed);
  p.cls_token = deep_copy(params.cls_token);
  p.cls_pos = deep_copy(params.cls_pos);
  for (const auto& b : params.blocks) p.blocks.push_back(copy_block(b));
  p.norm_gain = deep_copy(params.norm_gain);
  p.norm_bias = deep_copy(params.norm_bias);
  return p;
}

std::vector<NamedTensor> named_parameters(const EncoderParams& p, const std::string& prefix) {
  std::vector<NamedTensor> out;
  out.push_back({prefix + "patch.weight", p.patch_weight, true});
  out.push_back({prefix + "patch.bias", p.patch_bias, false});
  out.push_back({prefix + "pos_embed", p.pos_embed, false});
  out.push_back({prefix + "cls_token", p.cls_token, false});
  out.push_back({prefix + "cls_pos", p.cls_pos, false});
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    append_block(out, p.blocks[i], prefix + "blocks." + std::to_string(i) + ".");
  }
  out.push_back({prefix + "norm.gain", p.norm_gain, false});
  out.push_back({prefix + "norm.bias", p.norm_bias, false});
  return out;
}

std::vector<NamedTensor> named_parameters(const PredictorParams& p, const std::string& prefix) {
  std::vector<NamedTensor> out;
  out.push_back({prefix + "embed.weight", p.embed_weight, true});
  out.push_back({prefix + "embed.bias", p.embed_bias, false});
  out.push_back({prefix + "mask_token", p.mask_token, false});
  out.push_back({prefix + "pos_embed", p.pos_embed, false});
  out.push_back({prefix + "cls_pos", p.cls_pos, false});
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    append_block(out, p.blocks[i], prefix + "blocks." + std::to_string(i) + ".");
  }
  out.push_back({prefix + "norm.gain", p.norm_gain, false});
  out.push_back({prefix + "norm.bias", p.norm_bias, false});
  out.push_back({prefix + "out.weight", p.out_weight, true});
  out.push_back({prefix + "out.bias", p.out_bias, false});
  return out;
}

Model Model::init(const ViTConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Rng encoder_rng = rng.split(1);
  Rng predictor_rng = rng.split(2);
  Model m;
  m.cfg = cfg;
  m.context = init_encoder(cfg, encoder_rng);
  m.target = clone(m.context);
  m.predictor = init_predictor(cfg, predictor_rng);
  return m;
}

std::vector<NamedTensor> Model::trainable() const {
  auto out = named_parameters(context, "context.");
  auto pred = named_parameters(predictor, "predictor.");
  out.insert(out.end(), pred.begin(), pred.end());
  return out;
}

std::vector<NamedTensor> Model::all() const {
  auto out = trainable();
  auto tgt = named_parameters(target, "target.");
  out.insert(out.end(), tgt.begin(), tgt.end());
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return add_rows(matmul(x, weight), bias); }

Tensor block_forward(const Tensor& x, const BlockParams& b, std::size_t heads) {
  Tensor h = layer_norm(x, b.ln1_gain, b.ln1_bias, 1);
  Tensor attn = scaled_dot_attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv), heads);
  Tensor x1 = add(x, linear(attn, b.wo, b.bo));
  Tensor h2 = layer_norm(x1, b.ln2_gain, b.ln2_bias, 1);
  return add(x1, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
}

TokenSequence patchify(const Tensor& image, const EncoderParams& params, const ViTConfig& cfg) {
  const std::size_t c = cfg.channels, s = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  if (image.shape() != Shape{c, s, s}) {
    throw ShapeError("patchify: expected image " + to_string({c, s, s}) + ", got " + to_string(image.shape()));
  }
  // Patch vector layout: channel-major, then row, then column within the patch.
  std::vector<Real> patches(cfg.patch_count() * cfg.patch_dim());
  auto px = image.data();
  for (std::size_t gr = 0; gr < g; ++gr) {
    for (std::size_t gc = 0; gc < g; ++gc) {
      Real* dst = patches.data() + (gr * g + gc) * cfg.patch_dim();
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t r = 0; r < p; ++r) {
          for (std::size_t col = 0; col < p; ++col) {
            *dst++ = px[(ch * s + gr * p + r) * s + gc * p + col];
          }
        }
      }
    }
  }
  Tensor patch_matrix = Tensor::from({cfg.patch_count(), cfg.patch_dim()}, std::move(patches));
  Tensor tokens = add(linear(patch_matrix, params.patch_weight, params.patch_bias), params.pos_embed);
  Tensor cls = add(params.cls_token, params.cls_pos);

  TokenSequence seq;
  seq.tokens = concat_rows({cls, tokens});
  seq.positions.resize(cfg.patch_count() + 1);
  seq.positions[0] = kClsPosition;
  for (std::size_t i = 0; i < cfg.patch_count(); ++i) seq.positions[i + 1] = static_cast<int>(i);
  seq.grid = g;
  return seq;
}

TokenSequence encode(const TokenSequence& seq, const std::optional<std::vector<int>>& visible,
                     const EncoderParams& params, const ViTConfig& cfg, std::vector<Tensor>* block_outputs) {
  std::vector<std::size_t> rows;
  TokenSequence out;
  out.grid = seq.grid;
  if (visible) {
    if (visible->empty()) throw ConfigError("encode: empty visible set");
    check_cells("encode", *visible, seq.grid * seq.grid);
    // Map each requested cell to its row in `seq`.
    std::vector<int> row_of(seq.grid * seq.grid, -1);
    int cls_row = -1;
    for (std::size_t r = 0; r < seq.positions.size(); ++r) {
      if (seq.positions[r] == kClsPosition) {
        cls_row = static_cast<int>(r);
      } else {
        row_of[static_cast<std::size_t>(seq.positions[r])] = static_cast<int>(r);
      }
    }
    if (cls_row < 0) throw ConfigError("encode: sequence has no class token");
    rows.push_back(static_cast<std::size_t>(cls_row));
    out.positions.push_back(kClsPosition);
    for (int cell : *visible) {
      const int r = row_of[static_cast<std::size_t>(cell)];
      if (r < 0) throw ConfigError("encode: cell " + std::to_string(cell) + " not present in the sequence");
      rows.push_back(static_cast<std::size_t>(r));
      out.positions.push_back(cell);
    }
  } else {
    rows.resize(seq.size());
    for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r;
    out.positions = seq.positions;
  }

  Tensor x = gather_rows(seq.tokens, rows);
  if (block_outputs) block_outputs->clear();
  for (const auto& block : params.blocks) {
    x = block_forward(x, block, cfg.heads);
    if (block_outputs) block_outputs->push_back(x);
  }
  out.tokens = layer_norm(x, params.norm_gain, params.norm_bias, 1);
  return out;
}

Tensor predict(const TokenSequence& context, const std::vector<int>& target_positions, const PredictorParams& params,
               const ViTConfig& cfg) {
  if (target_positions.empty()) throw ConfigError("predict: empty target set");
  const std::size_t cells = cfg.patch_count();
  check_cells("predict", target_positions, cells);
  std::vector<char> in_context(cells, 0);
  for (int p : context.positions) {
    if (p != kClsPosition) in_context[static_cast<std::size_t>(p)] = 1;
  }
  for (int t : target_positions) {
    if (in_context[static_cast<std::size_t>(t)]) {
      throw ConfigError("predict: target cell " + std::to_string(t) + " is also a context position");
    }
  }

  // Row 0 of the table is the class-token position, row 1 + cell a grid cell.
  Tensor pos_table = concat_rows({params.cls_pos, params.pos_embed});
  std::vector<std::size_t> context_rows;
  for (int p : context.positions) context_rows.push_back(p == kClsPosition ? 0 : static_cast<std::size_t>(p) + 1);
  std::vector<std::size_t> target_rows;
  for (int t : target_positions) target_rows.push_back(static_cast<std::size_t>(t) + 1);

  Tensor ctx = add(linear(context.tokens, params.embed_weight, params.embed_bias), gather_rows(pos_table, context_rows));
  Tensor masks = add(gather_rows(params.mask_token, std::vector<std::size_t>(target_positions.size(), 0)),
                     gather_rows(pos_table, target_rows));
  Tensor x = concat_rows({ctx, masks});
  for (const auto& block : params.blocks) x = block_forward(x, block, cfg.heads);
  x = layer_norm(x, params.norm_gain, params.norm_bias, 1);
  Tensor slots = slice_rows(x, context.size(), context.size() + target_positions.size());
  return linear(slots, params.out_weight, params.out_bias);
}

DSEQ_END_NAMESPACE
