#include "maskseg/decoder.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "maskseg/encoder.hpp"

namespace maskseg {

namespace {

/// Attention within each depth slice: (N, D', T, E) inputs.
Tensor slice_attention(const Attention& attn, const Tensor& q, const Tensor& k, const Tensor& v) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  const std::size_t b = qs[0] * qs[1];
  Tensor out = attn.forward(reshape(q, {b, qs[2], qs[3]}), reshape(k, {b, ks[2], ks[3]}), reshape(v, {b, ks[2], ks[3]}));
  return reshape(out, qs);
}

AdapterConfig sized(AdapterConfig a, const DecoderConfig& cfg) {
  a.dim = cfg.embed_dim;
  a.depth = cfg.depth;
  return a;
}

bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

}  // namespace

PositionEncoding::PositionEncoding(std::size_t embed_dim, std::uint64_t seed) {
  if (embed_dim % 2 != 0) throw std::invalid_argument("position encoding: embed_dim must be even");
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  gaussian_ = Tensor::zeros({embed_dim / 2, 2});
  for (auto& v : gaussian_.data()) v = n(rng);
}

Tensor PositionEncoding::encode(const Tensor& coords) const {
  const Shape& s = coords.shape();
  if (s.empty() || s.back() != 2) throw_shape_error("position encoding", s, "last axis must be 2");
  const std::size_t rows = coords.numel() / 2;
  Tensor c = add_scalar(scale(reshape(coords, {rows, 2}), 2.0), -1.0);
  Tensor proj = scale(linear(c, gaussian_, Tensor()), 2.0 * std::numbers::pi);
  Tensor out = concat({sin(proj), cos(proj)}, 1);
  Shape os = s;
  os.back() = 2 * gaussian_.size(0);
  return reshape(out, os);
}

Tensor PositionEncoding::grid(std::size_t h, std::size_t w) const {
  std::vector<double> xy(h * w * 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      xy[(y * w + x) * 2 + 0] = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      xy[(y * w + x) * 2 + 1] = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
    }
  return encode(Tensor::from({h * w, 2}, std::move(xy)));
}

PromptEncoder::PromptEncoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg), pe_(cfg.embed_dim) {
  const std::size_t E = cfg.embed_dim;
  corner_embed = register_parameter("corner_embed", trunc_normal_param({2, E}, 0.02, rng));
  if (!cfg.mask_prompts) {
    no_mask_embed = register_parameter("no_mask_embed", trunc_normal_param({E}, 0.02, rng));
    return;
  }
  if (!is_pow2(cfg.patch)) throw std::invalid_argument("mask prompts need a power-of-two patch size");
  std::size_t in = 1, out = 4;
  for (std::size_t f = cfg.patch, i = 0; f > 1; f /= 2, ++i) {
    mask_downscale.push_back(
        std::make_unique<Conv3d>(in, out, Extent3{1, 2, 2}, rng, Conv3dOptions{{1, 2, 2}, {0, 0, 0}, 1}));
    register_module("mask_downscale/" + std::to_string(i), *mask_downscale.back());
    in = out;
    out = std::min<std::size_t>(16, out * 4);
  }
  mask_proj = std::make_unique<Conv3d>(in, E, Extent3{1, 1, 1}, rng);
  register_module("mask_proj", *mask_proj);
}

SparseDense PromptEncoder::forward(const Tensor& boxes, const std::optional<Tensor>& masks) const {
  if (boxes.dim() != 2 || boxes.size(1) != 4) throw_shape_error("prompt encoder", boxes.shape(), "expected (N, 4)");
  const std::size_t N = boxes.size(0), E = cfg_.embed_dim;
  const std::size_t D = cfg_.depth, gh = cfg_.grid_h(), gw = cfg_.grid_w();
  SparseDense out;
  out.sparse = add(pe_.encode(reshape(boxes, {N, 2, 2})), expand(reshape(corner_embed, {1, 2, E}), {N, 2, E}));
  if (masks) {
    if (!cfg_.mask_prompts) throw std::invalid_argument("prompt encoder built without a mask path");
    const Shape& ms = masks->shape();
    if (ms.size() != 4 || ms[0] != N) throw_shape_error("prompt encoder", ms, "expected mask prompts (N, D, H, W)");
    Tensor x = reshape(*masks, {N, 1, ms[1], ms[2], ms[3]});
    for (const auto& conv : mask_downscale) x = gelu(conv->forward(x));
    out.dense = mask_proj->forward(x);
    if (out.dense.shape() != Shape{N, E, D, gh, gw})
      throw_shape_error("prompt encoder", out.dense.shape(), "mask prompts do not match the embedding grid");
  } else {
    if (cfg_.mask_prompts) throw std::invalid_argument("prompt encoder expects mask prompts");
    out.dense = expand(reshape(no_mask_embed, {1, E, 1, 1, 1}), {N, E, D, gh, gw});
  }
  return out;
}

TwoWayBlock::TwoWayBlock(const DecoderConfig& cfg, bool skip_first_pe, Rng& rng)
    : self_attn(cfg.embed_dim, cfg.heads, rng),
      norm1(cfg.embed_dim),
      cross_t2i(cfg.embed_dim, cfg.heads, rng),
      norm2(cfg.embed_dim),
      mlp(cfg.embed_dim, cfg.mlp_dim, cfg.embed_dim, rng),
      norm3(cfg.embed_dim),
      cross_i2t(cfg.embed_dim, cfg.heads, rng),
      norm4(cfg.embed_dim),
      skip_first_pe_(skip_first_pe) {
  register_module("self_attn", self_attn);
  register_module("norm1", norm1);
  register_module("cross_t2i", cross_t2i);
  register_module("norm2", norm2);
  register_module("mlp", mlp);
  register_module("norm3", norm3);
  register_module("cross_i2t", cross_i2t);
  register_module("norm4", norm4);
  if (!cfg.adapters) return;
  if (cfg.token_adapter.kind == DepthBranch::depth_conv)
    throw std::invalid_argument("decoder: token adapters cannot use a depth conv (tokens have no grid)");
  const AdapterConfig tok = sized(cfg.token_adapter, cfg);
  self_adapter = std::make_unique<Adapter>(tok, rng);
  cross_adapter = std::make_unique<Adapter>(tok, rng);
  mlp_adapter = std::make_unique<Adapter>(tok, rng);
  image_adapter = std::make_unique<Adapter>(sized(cfg.image_adapter, cfg), rng);
  register_module("self_adapter", *self_adapter);
  register_module("cross_adapter", *cross_adapter);
  register_module("mlp_adapter", *mlp_adapter);
  register_module("image_adapter", *image_adapter);
}

void TwoWayBlock::forward(Tensor& queries, Tensor& keys, const Tensor& query_pe, const Tensor& key_pe,
                          GridHW grid) const {
  if (skip_first_pe_) {
    queries = slice_attention(self_attn, queries, queries, queries);
  } else {
    Tensor q = add(queries, query_pe);
    queries = add(queries, slice_attention(self_attn, q, q, queries));
  }
  queries = norm1.forward(queries);
  if (self_adapter) queries = self_adapter->forward(queries);

  Tensor q = add(queries, query_pe);
  Tensor k = add(keys, key_pe);
  queries = norm2.forward(add(queries, slice_attention(cross_t2i, q, k, keys)));
  if (cross_adapter) queries = cross_adapter->forward(queries);

  Tensor m = add(queries, mlp.forward(queries));
  if (mlp_adapter) m = add(m, mlp_adapter->branch(queries));
  queries = norm3.forward(m);

  q = add(queries, query_pe);
  k = add(keys, key_pe);
  keys = norm4.forward(add(keys, slice_attention(cross_i2t, k, q, queries)));
  if (image_adapter) keys = image_adapter->forward(keys, grid);
}

MaskDecoder::MaskDecoder(const DecoderConfig& cfg, Rng& rng)
    : final_attn(cfg.embed_dim, cfg.heads, rng),
      final_norm(cfg.embed_dim),
      upscale1(cfg.embed_dim, cfg.embed_dim / 4, {1, 2, 2}, rng),
      upscale2(cfg.embed_dim / 4, cfg.embed_dim / 8, {1, 2, 2}, rng),
      hyper(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim / 8, rng),
      class_head(cfg.embed_dim, cfg.classes + 1, rng),
      cfg_(cfg) {
  if (cfg.embed_dim % 8 != 0) throw std::invalid_argument("decoder: embed_dim must be divisible by 8");
  const std::size_t E = cfg.embed_dim;
  cls_token = register_parameter("cls_token", trunc_normal_param({1, E}, 0.02, rng));
  mask_token = register_parameter("mask_token", trunc_normal_param({1, E}, 0.02, rng));
  if (cfg.depth_pos_embed) depth_embed = register_parameter("depth_embed", Tensor::zeros({1, cfg.depth, 1, E}));
  for (std::size_t i = 0; i < cfg.rounds; ++i) {
    blocks.push_back(std::make_unique<TwoWayBlock>(cfg, i == 0, rng));
    register_module("blocks/" + std::to_string(i), *blocks.back());
  }
  register_module("final_attn", final_attn);
  register_module("final_norm", final_norm);
  register_module("upscale1", upscale1);
  register_module("upscale2", upscale2);
  register_module("hyper", hyper);
  register_module("class_head", class_head);
}

std::vector<Adapter*> MaskDecoder::adapters() const {
  std::vector<Adapter*> out;
  for (const auto& b : blocks)
    for (Adapter* a : {b->self_adapter.get(), b->cross_adapter.get(), b->mlp_adapter.get(), b->image_adapter.get()})
      if (a) out.push_back(a);
  return out;
}

DecoderOutput MaskDecoder::forward(const Tensor& image_embed, const SparseDense& prompts, const Tensor& cls_tokens,
                                   const PositionEncoding& pe) const {
  const std::size_t E = cfg_.embed_dim, D = cfg_.depth;
  const GridHW grid{cfg_.grid_h(), cfg_.grid_w()};
  const std::size_t L = grid.h * grid.w;
  if (image_embed.shape() != Shape{1, E, D, grid.h, grid.w})
    throw_shape_error("decoder", image_embed.shape(), "image embedding does not match the configured grid");
  if (cls_tokens.dim() != 2 || cls_tokens.size(1) != E) throw_shape_error("decoder", cls_tokens.shape(), "expected (N, E)");
  const std::size_t N = cls_tokens.size(0);
  if (prompts.sparse.shape() != Shape{N, 2, E}) throw_shape_error("decoder", prompts.sparse.shape(), "expected (N, 2, E)");

  Tensor keys = grid_to_tokens(add(expand(image_embed, {N, E, D, grid.h, grid.w}), prompts.dense));  // (N, D', L, E)
  Tensor key_pe = reshape(pe.grid(grid.h, grid.w), {1, 1, L, E});
  key_pe = expand(key_pe, {1, D, L, E});
  if (depth_embed.defined()) key_pe = add(key_pe, expand(depth_embed, {1, D, L, E}));
  key_pe = expand(key_pe, {N, D, L, E});

  Tensor cls = reshape(add(expand(cls_token, {N, E}), cls_tokens), {N, 1, E});
  Tensor tokens = concat({cls, expand(reshape(mask_token, {1, 1, E}), {N, 1, E}), prompts.sparse}, 1);  // (N, T, E)
  const std::size_t T = tokens.size(1);
  Tensor queries = expand(reshape(tokens, {N, 1, T, E}), {N, D, T, E});
  const Tensor query_pe = queries;

  for (const auto& b : blocks) b->forward(queries, keys, query_pe, key_pe, grid);
  {
    Tensor q = add(queries, query_pe);
    Tensor k = add(keys, key_pe);
    queries = final_norm.forward(add(queries, slice_attention(final_attn, q, k, keys)));
  }

  DecoderOutput out;
  Tensor cls_out = mean(reshape(slice(queries, 2, 0, 1), {N, D, E}), 1);  // (N, E)
  out.class_logits = class_head.forward(cls_out);

  Tensor hyp = hyper.forward(reshape(slice(queries, 2, 1, 2), {N, D, E}));  // (N, D', E/8)
  Tensor up = gelu(upscale2.forward(gelu(upscale1.forward(tokens_to_grid(keys, grid)))));  // (N, E/8, D', 4H', 4W')
  const std::size_t C = up.size(1), UH = up.size(3), UW = up.size(4);
  Tensor feats = reshape(permute(up, {0, 2, 1, 3, 4}), {N, D, C, UH * UW});
  Tensor masks = matmul(reshape(hyp, {N, D, 1, C}), feats);  // (N, D', 1, UH*UW)
  masks = reshape(masks, {N, 1, D, UH, UW});
  if (UH != cfg_.height || UW != cfg_.width) masks = upsample_trilinear(masks, {cfg_.depth, cfg_.height, cfg_.width});
  out.mask_logits = reshape(masks, {N, cfg_.depth, cfg_.height, cfg_.width});
  return out;
}

}  // namespace maskseg
