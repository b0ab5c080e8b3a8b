#pragma once

#include <memory>
#include <vector>

#include "maskseg/adapter.hpp"

namespace maskseg {

struct EncoderConfig {
  std::size_t modalities = 1;
  std::size_t patch = 4;  // on H and W; depth is tokenized at stride 1
  std::size_t embed_dim = 32;
  std::size_t blocks = 12;
  std::size_t heads = 4;
  std::size_t tap_period = 3;
  std::size_t mlp_ratio = 4;
  // input patch extents; the token grid is (depth, height/patch, width/patch)
  std::size_t depth = 4, height = 16, width = 16;
  bool adapters = true;
  AdapterConfig adapter;  // dim/depth are filled in from the fields above
  bool depth_pos_embed = true;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tap_count() const { return blocks / tap_period + 1; }
  void validate() const;
};

struct EncoderOutput {
  Tensor embedding;           // (B, E, D', H', W') after the neck
  std::vector<Tensor> taps;   // shallow -> deep, same layout; the last one is `embedding`
};

/// 1x1x1 conv M -> 4M, GELU, 1x1x1 conv 4M -> 3.
class ConvStem : public Module {
 public:
  ConvStem(std::size_t modalities, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2.forward(gelu(conv1.forward(x))); }

  Conv3d conv1, conv2;
};

class EncoderBlock : public Module {
 public:
  EncoderBlock(const EncoderConfig& cfg, Rng& rng);
  /// x: (B, D, L, E)
  Tensor forward(const Tensor& x, GridHW grid) const;

  LayerNorm norm1;
  Attention attn;
  LayerNorm norm2;
  Mlp mlp;
  std::unique_ptr<Adapter> attn_adapter;  // after attention
  std::unique_ptr<Adapter> mlp_adapter;   // parallel to the MLP
};

class ImageEncoder : public Module {
 public:
  ImageEncoder(const EncoderConfig& cfg, Rng& rng);

  /// image: (B, M, D, H, W)
  EncoderOutput forward(const Tensor& image) const;
  const EncoderConfig& config() const { return cfg_; }
  /// Adapters in block order (attention, then MLP adapter per block).
  std::vector<Adapter*> adapters() const;

  ConvStem stem;
  Conv3d patch_embed;
  Tensor pos_embed;        // (1, 1, L, E)
  Tensor depth_embed;      // (1, D', 1, E), undefined when disabled
  std::vector<std::unique_ptr<EncoderBlock>> blocks;
  Linear neck_proj;
  LayerNorm neck_norm1;
  Conv3d neck_conv;
  LayerNorm neck_norm2;

 private:
  EncoderConfig cfg_;
};

/// Tokens (B, D, L, E) -> grid (B, E, D, H, W) and back.
Tensor tokens_to_grid(const Tensor& tokens, GridHW grid);
Tensor grid_to_tokens(const Tensor& grid);

}  // namespace maskseg
