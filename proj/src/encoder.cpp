#include "maskseg/encoder.hpp"

#include <sstream>
#include <stdexcept>

namespace maskseg {

namespace {

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

}  // namespace

void EncoderConfig::validate() const {
  if (modalities == 0 || patch == 0 || embed_dim == 0 || blocks == 0 || heads == 0 || tap_period == 0)
    throw std::invalid_argument("encoder: counts must be positive");
  if (blocks % tap_period != 0) throw std::invalid_argument("encoder: blocks must be divisible by tap_period");
  if (embed_dim % heads != 0) throw std::invalid_argument("encoder: embed_dim must be divisible by heads");
  if (height % patch != 0 || width % patch != 0) {
    std::ostringstream os;
    os << "encoder: patch extents " << height << "x" << width << " not divisible by patch size " << patch
       << "; pad to " << round_up(height, patch) << "x" << round_up(width, patch);
    throw std::invalid_argument(os.str());
  }
}

Tensor tokens_to_grid(const Tensor& tokens, GridHW grid) {
  const Shape& s = tokens.shape();
  return permute(reshape(tokens, {s[0], s[1], grid.h, grid.w, s[3]}), {0, 4, 1, 2, 3});
}

Tensor grid_to_tokens(const Tensor& grid) {
  const Shape& s = grid.shape();
  return reshape(permute(grid, {0, 2, 3, 4, 1}), {s[0], s[2], s[3] * s[4], s[1]});
}

ConvStem::ConvStem(std::size_t modalities, Rng& rng)
    : conv1(modalities, 4 * modalities, {1, 1, 1}, rng), conv2(4 * modalities, 3, {1, 1, 1}, rng) {
  register_module("conv1", conv1);
  register_module("conv2", conv2);
}

namespace {

AdapterConfig encoder_adapter(const EncoderConfig& cfg) {
  AdapterConfig a = cfg.adapter;
  a.dim = cfg.embed_dim;
  a.depth = cfg.depth;
  return a;
}

}  // namespace

EncoderBlock::EncoderBlock(const EncoderConfig& cfg, Rng& rng)
    : norm1(cfg.embed_dim),
      attn(cfg.embed_dim, cfg.heads, rng),
      norm2(cfg.embed_dim),
      mlp(cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim, cfg.embed_dim, rng) {
  register_module("norm1", norm1);
  register_module("attn", attn);
  register_module("norm2", norm2);
  register_module("mlp", mlp);
  if (cfg.adapters) {
    attn_adapter = std::make_unique<Adapter>(encoder_adapter(cfg), rng);
    mlp_adapter = std::make_unique<Adapter>(encoder_adapter(cfg), rng);
    register_module("attn_adapter", *attn_adapter);
    register_module("mlp_adapter", *mlp_adapter);
  }
}

Tensor EncoderBlock::forward(const Tensor& x, GridHW grid) const {
  const Shape s = x.shape();  // (B, D, L, E)
  // attention within each depth slice
  Tensor n = reshape(norm1.forward(x), {s[0] * s[1], s[2], s[3]});
  Tensor h = add(x, reshape(attn.forward(n, n, n), s));
  if (attn_adapter) h = attn_adapter->forward(h, grid);
  Tensor m = norm2.forward(h);
  Tensor out = add(h, mlp.forward(m));
  if (mlp_adapter) out = add(out, mlp_adapter->branch(m, grid));
  return out;
}

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, Rng& rng)
    : stem(cfg.modalities, rng),
      patch_embed(3, cfg.embed_dim, {1, cfg.patch, cfg.patch}, rng, Conv3dOptions{{1, cfg.patch, cfg.patch}, {0, 0, 0}, 1}),
      neck_proj(cfg.embed_dim, cfg.embed_dim, rng, false),
      neck_norm1(cfg.embed_dim),
      neck_conv(cfg.embed_dim, cfg.embed_dim, {1, 3, 3}, rng, Conv3dOptions{{1, 1, 1}, {0, 1, 1}, 1}),
      neck_norm2(cfg.embed_dim),
      cfg_(cfg) {
  cfg_.validate();
  register_module("stem", stem);
  register_module("patch_embed", patch_embed);
  const std::size_t L = cfg.grid_h() * cfg.grid_w();
  pos_embed = register_parameter("pos_embed", trunc_normal_param({1, 1, L, cfg.embed_dim}, 0.02, rng));
  if (cfg.depth_pos_embed)
    depth_embed = register_parameter("depth_embed", Tensor::zeros({1, cfg.depth, 1, cfg.embed_dim}));
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    blocks.push_back(std::make_unique<EncoderBlock>(cfg_, rng));
    register_module("blocks/" + std::to_string(i), *blocks.back());
  }
  register_module("neck_proj", neck_proj);
  register_module("neck_norm1", neck_norm1);
  register_module("neck_conv", neck_conv);
  register_module("neck_norm2", neck_norm2);
}

std::vector<Adapter*> ImageEncoder::adapters() const {
  std::vector<Adapter*> out;
  for (const auto& b : blocks) {
    if (b->attn_adapter) out.push_back(b->attn_adapter.get());
    if (b->mlp_adapter) out.push_back(b->mlp_adapter.get());
  }
  return out;
}

EncoderOutput ImageEncoder::forward(const Tensor& image) const {
  const Shape& s = image.shape();
  if (s.size() != 5 || s[1] != cfg_.modalities) throw_shape_error("encoder", s, "expected (B, modalities, D, H, W)");
  if (s[3] % cfg_.patch != 0 || s[4] % cfg_.patch != 0) {
    std::ostringstream os;
    os << "H x W = " << s[3] << "x" << s[4] << " not divisible by patch " << cfg_.patch << "; pad to "
       << round_up(s[3], cfg_.patch) << "x" << round_up(s[4], cfg_.patch);
    throw_shape_error("encoder", s, os.str());
  }
  if (s[2] != cfg_.depth || s[3] != cfg_.height || s[4] != cfg_.width)
    throw_shape_error("encoder", s, "extents differ from the configured patch size");

  const std::size_t B = s[0], D = cfg_.depth, E = cfg_.embed_dim;
  const GridHW grid{cfg_.grid_h(), cfg_.grid_w()};
  const std::size_t L = grid.h * grid.w;

  Tensor x = grid_to_tokens(patch_embed.forward(stem.forward(image)));  // (B, D, L, E)
  x = add(x, expand(pos_embed, {B, D, L, E}));
  if (depth_embed.defined()) x = add(x, expand(depth_embed, {B, D, L, E}));

  EncoderOutput out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = blocks[i]->forward(x, grid);
    if ((i + 1) % cfg_.tap_period == 0) out.taps.push_back(tokens_to_grid(x, grid));
  }
  Tensor n = neck_norm1.forward(neck_proj.forward(x));
  n = grid_to_tokens(neck_conv.forward(tokens_to_grid(n, grid)));
  out.embedding = tokens_to_grid(neck_norm2.forward(n), grid);
  out.taps.push_back(out.embedding);
  return out;
}

}  // namespace maskseg
