#include "maskseg/prompt_generator.hpp"

#include <algorithm>
#include <stdexcept>

namespace maskseg {

std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::mask_only: return "mask";
    case PromptVariant::box_only: return "box";
    case PromptVariant::mask_and_box: return "mask_box";
    case PromptVariant::mask_avg_box: return "mask_avg_box";
  }
  return "?";
}

PromptVariant parse_prompt_variant(const std::string& s) {
  if (s == "mask") return PromptVariant::mask_only;
  if (s == "box") return PromptVariant::box_only;
  if (s == "mask_box") return PromptVariant::mask_and_box;
  if (s == "mask_avg_box") return PromptVariant::mask_avg_box;
  throw std::invalid_argument("unknown prompt variant '" + s + "' (mask, box, mask_box, mask_avg_box)");
}

Tensor mask_derived_boxes(const Tensor& mask_logits, std::vector<bool>* empty) {
  const Shape& s = mask_logits.shape();
  if (s.size() != 4) throw_shape_error("mask_derived_boxes", s, "expected (N, D, H, W)");
  const std::size_t n = s[0], per = s[1] * s[2] * s[3];
  std::vector<double> out(n * 4);
  if (empty) empty->assign(n, false);
  auto v = mask_logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    auto b = box_of(v.subspan(i * per, per), s[1], s[2], s[3], 0.0);
    if (!b) {
      b = Box{0, 0, 1, 1};
      if (empty) (*empty)[i] = true;
    }
    out[i * 4 + 0] = b->x_min;
    out[i * 4 + 1] = b->y_min;
    out[i * 4 + 2] = b->x_max;
    out[i * 4 + 3] = b->y_max;
  }
  return Tensor::from({n, 4}, std::move(out));
}

PromptGenerator::PromptGenerator(const PromptGeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.taps == 0 || cfg.prompts == 0) throw std::invalid_argument("prompt generator: taps and prompts must be >= 1");
  const std::size_t E = cfg.embed_dim;
  const std::size_t gh = cfg.height / cfg.patch, gw = cfg.width / cfg.patch;
  std::size_t c = E;
  for (std::size_t i = 0; i < cfg.taps; ++i) {
    if (i > 0) c = std::max(cfg.min_channels, c / 2);
    channels_.push_back(c);
    const std::size_t f = std::size_t{1} << std::min<std::size_t>(i, 30);
    level_extent_.push_back({cfg.depth, std::min(cfg.height, gh * f), std::min(cfg.width, gw * f)});
  }
  const Conv3dOptions same{{1, 1, 1}, {1, 1, 1}, 1};
  std::size_t box_features = 0, cls_features = 0;
  for (std::size_t i = 0; i < cfg.taps; ++i) {
    const std::size_t in = i == 0 ? E : channels_[i - 1] + channels_[i];
    level_convs.push_back(std::make_unique<Conv3d>(in, channels_[i], Extent3{3, 3, 3}, rng, same));
    register_module("levels/" + std::to_string(i) + "/conv", *level_convs.back());
    if (i > 0) {
      skip_projs.push_back(std::make_unique<Conv3d>(E, channels_[i], Extent3{1, 1, 1}, rng));
      register_module("levels/" + std::to_string(i) + "/skip", *skip_projs.back());
    }
    const auto& ex = level_extent_[i];
    box_features += channels_[i] * std::min<std::size_t>(2, ex[1]) * std::min<std::size_t>(2, ex[2]);
    cls_features += channels_[i];
  }
  if (has_mask_head(cfg.variant)) {
    mask_out = std::make_unique<Conv3d>(channels_.back(), cfg.prompts, Extent3{1, 1, 1}, rng);
    register_module("mask_out", *mask_out);
  }
  if (has_box_head(cfg.variant)) {
    box_mlp = std::make_unique<Mlp>(box_features, 2 * box_features, cfg.prompts * 4, rng);
    register_module("box_head", *box_mlp);
  }
  cls_mlp = std::make_unique<Mlp>(cls_features, 2 * E, cfg.prompts * E, rng);
  register_module("cls_head", *cls_mlp);
}

PromptBundle PromptGenerator::forward(const std::vector<Tensor>& taps) const {
  if (taps.size() != cfg_.taps) throw std::invalid_argument("prompt generator: expected " + std::to_string(cfg_.taps) + " taps");
  for (const auto& t : taps)
    if (t.dim() != 5 || t.size(0) != 1 || t.size(1) != cfg_.embed_dim)
      throw_shape_error("prompt generator", t.shape(), "expected tap (1, E, D', H', W')");
  const std::size_t N = cfg_.prompts, E = cfg_.embed_dim, T = cfg_.taps;

  std::vector<Tensor> box_parts, cls_parts;
  Tensor x;
  for (std::size_t i = 0; i < T; ++i) {
    const Tensor& tap = taps[T - 1 - i];
    const Extent3& ex = level_extent_[i];
    if (i == 0) {
      x = gelu(level_convs[0]->forward(tap));
    } else {
      Tensor up = upsample_nearest(x, ex);
      Tensor skip = upsample_nearest(skip_projs[i - 1]->forward(tap), ex);
      x = gelu(level_convs[i]->forward(concat({up, skip}, 1)));
    }
    const std::size_t c = channels_[i];
    if (box_mlp) {
      const Extent3 bins{1, std::min<std::size_t>(2, ex[1]), std::min<std::size_t>(2, ex[2])};
      box_parts.push_back(reshape(adaptive_avg_pool3d(x, bins), {1, c * bins[1] * bins[2]}));
    }
    cls_parts.push_back(reshape(adaptive_avg_pool3d(x, {1, 1, 1}), {1, c}));
  }

  PromptBundle b;
  b.variant = cfg_.variant;
  const Extent3 full{cfg_.depth, cfg_.height, cfg_.width};
  if (mask_out) {
    Tensor last = level_extent_.back() == full ? x : upsample_trilinear(x, full);
    b.aux_mask_logits = reshape(mask_out->forward(last), {N, full[0], full[1], full[2]});
  }
  if (box_mlp) {
    Tensor raw = sigmoid(reshape(box_mlp->forward(concat(box_parts, 1)), {N, 4}));
    Tensor p = slice(raw, 1, 0, 2), q = slice(raw, 1, 2, 4);
    b.aux_boxes = concat({minimum(p, q), maximum(p, q)}, 1);
  } else {
    b.aux_boxes = mask_derived_boxes(b.aux_mask_logits, &b.empty_mask);
  }
  if (cfg_.variant == PromptVariant::mask_avg_box) mask_derived_boxes(b.aux_mask_logits, &b.empty_mask);
  if (b.empty_mask.empty()) b.empty_mask.assign(N, false);
  b.aux_cls_tokens = reshape(cls_mlp->forward(concat(cls_parts, 1)), {N, E});
  return b;
}

ResolvedPrompts resolve_prompts(const PromptBundle& b) {
  ResolvedPrompts r;
  r.empty_mask = b.empty_mask;
  switch (b.variant) {
    case PromptVariant::mask_only:
      r.masks = b.aux_mask_logits;
      r.boxes = b.aux_boxes;
      break;
    case PromptVariant::box_only:
      r.boxes = b.aux_boxes;
      break;
    case PromptVariant::mask_and_box:
      r.masks = b.aux_mask_logits;
      r.boxes = b.aux_boxes;
      break;
    case PromptVariant::mask_avg_box:
      r.masks = b.aux_mask_logits;
      r.boxes = scale(add(mask_derived_boxes(b.aux_mask_logits, &r.empty_mask), b.aux_boxes), 0.5);
      break;
  }
  return r;
}

}  // namespace maskseg
