#pragma once

#include <string>

#include "maskseg/decoder.hpp"
#include "maskseg/encoder.hpp"
#include "maskseg/prompt_generator.hpp"

namespace maskseg {

struct ModelConfig {
  std::size_t modalities = 1;
  std::size_t classes = 3;
  std::size_t depth = 4, height = 16, width = 16;  // patch extents
  std::size_t patch = 4;
  std::size_t embed_dim = 32;
  std::size_t encoder_blocks = 4;
  std::size_t encoder_heads = 4;
  std::size_t tap_period = 2;
  std::size_t decoder_rounds = 2;
  std::size_t decoder_heads = 4;
  std::size_t decoder_mlp_dim = 64;
  std::size_t prompts = 10;
  PromptVariant variant = PromptVariant::mask_avg_box;
  bool adapters = true;
  AdapterConfig encoder_adapter;
  AdapterConfig token_adapter;
  AdapterConfig image_adapter;
  bool depth_pos_embed = true;
  std::uint64_t seed = 1;

  EncoderConfig encoder() const;
  PromptGeneratorConfig prompt_generator() const;
  DecoderConfig decoder() const;
};

/// Rows of the ablation table. B9 is the full model.
enum class Ablation { B1, B2, B3, B4, B5, B6, B7, B8, B9 };
Ablation parse_ablation(const std::string& s);
std::string to_string(Ablation a);
void apply_ablation(ModelConfig& cfg, Ablation a);

struct ModelOutput {
  PromptBundle bundle;
  ResolvedPrompts prompts;
  DecoderOutput decoded;
};

class MaskSegModel : public Module {
 public:
  explicit MaskSegModel(const ModelConfig& cfg);

  /// image (1, M, D, H, W) at the configured patch extents.
  ModelOutput forward(const Tensor& image) const;
  const ModelConfig& config() const { return cfg_; }
  std::vector<Adapter*> adapters() const;

 private:
  ModelConfig cfg_;
  Rng rng_;

 public:
  ImageEncoder encoder;
  PromptGenerator prompt_generator;
  PromptEncoder prompt_encoder;
  MaskDecoder decoder;
};

/// Parameters that come from the original segment-anything architecture
/// (everything except adapters, depth embeddings, stem, prompt generator,
/// classifier tokens and the class head).
bool is_sam_original(const std::string& name);

}  // namespace maskseg
