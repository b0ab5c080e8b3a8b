#include "maskseg/model.hpp"

#include <stdexcept>

namespace maskseg {

EncoderConfig ModelConfig::encoder() const {
  EncoderConfig e;
  e.modalities = modalities;
  e.patch = patch;
  e.embed_dim = embed_dim;
  e.blocks = encoder_blocks;
  e.heads = encoder_heads;
  e.tap_period = tap_period;
  e.depth = depth;
  e.height = height;
  e.width = width;
  e.adapters = adapters;
  e.adapter = encoder_adapter;
  e.depth_pos_embed = depth_pos_embed;
  return e;
}

PromptGeneratorConfig ModelConfig::prompt_generator() const {
  PromptGeneratorConfig p;
  p.prompts = prompts;
  p.variant = variant;
  p.embed_dim = embed_dim;
  p.taps = encoder().tap_count();
  p.patch = patch;
  p.depth = depth;
  p.height = height;
  p.width = width;
  return p;
}

DecoderConfig ModelConfig::decoder() const {
  DecoderConfig d;
  d.embed_dim = embed_dim;
  d.heads = decoder_heads;
  d.rounds = decoder_rounds;
  d.mlp_dim = decoder_mlp_dim;
  d.classes = classes;
  d.patch = patch;
  d.depth = depth;
  d.height = height;
  d.width = width;
  d.mask_prompts = has_mask_head(variant);
  d.adapters = adapters;
  d.token_adapter = token_adapter;
  d.image_adapter = image_adapter;
  d.depth_pos_embed = depth_pos_embed;
  return d;
}

Ablation parse_ablation(const std::string& s) {
  static const char* names[] = {"B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B9"};
  for (int i = 0; i < 9; ++i)
    if (s == names[i]) return static_cast<Ablation>(i);
  throw std::invalid_argument("unknown ablation '" + s + "' (B1..B9)");
}

std::string to_string(Ablation a) { return "B" + std::to_string(static_cast<int>(a) + 1); }

void apply_ablation(ModelConfig& cfg, Ablation a) {
  auto set = [](AdapterConfig& c, DepthBranch k, BranchPosition p) {
    c.kind = k;
    c.position = p;
  };
  const auto none = DepthBranch::none, mlp = DepthBranch::depth_mlp, conv = DepthBranch::depth_conv;
  const auto mid = BranchPosition::middle;
  cfg.adapters = true;
  switch (a) {
    case Ablation::B1: cfg.variant = PromptVariant::mask_only; break;
    case Ablation::B2: cfg.variant = PromptVariant::box_only; break;
    case Ablation::B3: cfg.variant = PromptVariant::mask_and_box; break;
    default: cfg.variant = PromptVariant::mask_avg_box; break;
  }
  cfg.depth_pos_embed = a >= Ablation::B5;
  BranchPosition pos = mid;
  DepthBranch kind = none;
  if (a == Ablation::B6) kind = mlp, pos = BranchPosition::after_up;
  if (a == Ablation::B7) kind = mlp, pos = BranchPosition::before_down;
  if (a == Ablation::B8 || a == Ablation::B9) kind = mlp;
  set(cfg.encoder_adapter, kind, pos);
  set(cfg.token_adapter, kind, pos);
  set(cfg.image_adapter, kind, pos);
  if (a == Ablation::B9) {
    set(cfg.encoder_adapter, conv, mid);
    set(cfg.image_adapter, conv, mid);
  }
}

MaskSegModel::MaskSegModel(const ModelConfig& cfg)
    : cfg_(cfg),
      rng_(cfg.seed),
      encoder(cfg.encoder(), rng_),
      prompt_generator(cfg.prompt_generator(), rng_),
      prompt_encoder(cfg.decoder(), rng_),
      decoder(cfg.decoder(), rng_) {
  register_module("encoder", encoder);
  register_module("prompt_generator", prompt_generator);
  register_module("prompt_encoder", prompt_encoder);
  register_module("decoder", decoder);
}

std::vector<Adapter*> MaskSegModel::adapters() const {
  auto out = encoder.adapters();
  auto d = decoder.adapters();
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

ModelOutput MaskSegModel::forward(const Tensor& image) const {
  if (image.dim() != 5 || image.size(0) != 1) throw_shape_error("model", image.shape(), "expected (1, M, D, H, W)");
  ModelOutput out;
  EncoderOutput enc = encoder.forward(image);
  out.bundle = prompt_generator.forward(enc.taps);
  out.prompts = resolve_prompts(out.bundle);
  SparseDense sd = prompt_encoder.forward(out.prompts.boxes, out.prompts.masks);
  out.decoded = decoder.forward(enc.embedding, sd, out.bundle.aux_cls_tokens, prompt_encoder.pe());
  return out;
}

bool is_sam_original(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  auto has = [&](const char* p) { return name.find(p) != std::string::npos; };
  if (has("adapter") || has("depth_embed")) return false;
  if (starts("prompt_generator/") || starts("encoder/stem/")) return false;
  if (starts("decoder/cls_token") || starts("decoder/class_head/")) return false;
  return starts("encoder/") || starts("prompt_encoder/") || starts("decoder/");
}

}  // namespace maskseg
