#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "maskseg/adapter.hpp"

namespace maskseg {

struct DecoderConfig {
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t rounds = 2;
  std::size_t mlp_dim = 64;
  std::size_t classes = 3;  // K; the class head emits K + 1 logits
  std::size_t patch = 4;
  std::size_t depth = 4, height = 16, width = 16;  // patch extents
  bool mask_prompts = true;  // false for the box-only variant
  bool adapters = true;
  AdapterConfig token_adapter;  // after self/cross attention and parallel to the MLP
  AdapterConfig image_adapter;  // on the image side after image->token attention
  bool depth_pos_embed = true;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
};

struct SparseDense {
  Tensor sparse;  // (N, 2, E)
  Tensor dense;   // (N, E, D', H', W')
};

/// Random-Fourier encoding of normalized (x, y) coordinates.
class PositionEncoding {
 public:
  PositionEncoding(std::size_t embed_dim, std::uint64_t seed = 0x5eedULL);
  /// coords (..., 2) in [0, 1] -> (..., E)
  Tensor encode(const Tensor& coords) const;
  /// Dense encoding of an h x w grid of cell centres: (h*w, E).
  Tensor grid(std::size_t h, std::size_t w) const;

 private:
  Tensor gaussian_;  // (2, E/2), fixed
};

class PromptEncoder : public Module {
 public:
  PromptEncoder(const DecoderConfig& cfg, Rng& rng);

  /// boxes (N, 4); mask logits (N, D, H, W) when the variant has mask prompts.
  SparseDense forward(const Tensor& boxes, const std::optional<Tensor>& masks) const;
  const PositionEncoding& pe() const { return pe_; }

  Tensor corner_embed;   // (2, E)
  Tensor no_mask_embed;  // (E), only without mask prompts
  std::vector<std::unique_ptr<Conv3d>> mask_downscale;
  std::unique_ptr<Conv3d> mask_proj;

 private:
  DecoderConfig cfg_;
  PositionEncoding pe_;
};

struct DecoderOutput {
  Tensor mask_logits;   // (N, D, H, W)
  Tensor class_logits;  // (N, K + 1)
};

class TwoWayBlock : public Module {
 public:
  TwoWayBlock(const DecoderConfig& cfg, bool skip_first_pe, Rng& rng);
  /// queries (N, D', T, E), keys (N, D', L, E); pes have matching shapes.
  void forward(Tensor& queries, Tensor& keys, const Tensor& query_pe, const Tensor& key_pe, GridHW grid) const;

  Attention self_attn;
  LayerNorm norm1;
  Attention cross_t2i;
  LayerNorm norm2;
  Mlp mlp;
  LayerNorm norm3;
  Attention cross_i2t;
  LayerNorm norm4;
  std::unique_ptr<Adapter> self_adapter, cross_adapter, mlp_adapter, image_adapter;

 private:
  bool skip_first_pe_;
};

class MaskDecoder : public Module {
 public:
  MaskDecoder(const DecoderConfig& cfg, Rng& rng);

  /// image_embed (1, E, D', H', W'); cls_tokens (N, E) from the prompt generator.
  DecoderOutput forward(const Tensor& image_embed, const SparseDense& prompts, const Tensor& cls_tokens,
                        const PositionEncoding& pe) const;
  std::vector<Adapter*> adapters() const;
  const DecoderConfig& config() const { return cfg_; }

  Tensor cls_token;    // (1, E), shared across slots
  Tensor mask_token;   // (1, E)
  Tensor depth_embed;  // (1, D', 1, E), undefined when disabled
  std::vector<std::unique_ptr<TwoWayBlock>> blocks;
  Attention final_attn;
  LayerNorm final_norm;
  ConvTranspose3d upscale1;
  ConvTranspose3d upscale2;
  Mlp hyper;
  Linear class_head;

 private:
  DecoderConfig cfg_;
};

}  // namespace maskseg
