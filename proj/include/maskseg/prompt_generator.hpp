#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "maskseg/encoder.hpp"
#include "maskseg/volume.hpp"

namespace maskseg {

enum class PromptVariant { mask_only, box_only, mask_and_box, mask_avg_box };

std::string to_string(PromptVariant v);
/// Accepts the config spellings mask, box, mask_box, mask_avg_box.
PromptVariant parse_prompt_variant(const std::string& s);

inline bool has_mask_head(PromptVariant v) { return v != PromptVariant::box_only; }
inline bool has_box_head(PromptVariant v) { return v != PromptVariant::mask_only; }

struct PromptGeneratorConfig {
  std::size_t prompts = 10;  // N
  PromptVariant variant = PromptVariant::mask_avg_box;
  std::size_t embed_dim = 32;
  std::size_t taps = 3;
  std::size_t patch = 4;
  std::size_t depth = 4, height = 16, width = 16;  // full-resolution target
  std::size_t min_channels = 8;
};

/// Auxiliary prompts for one image. Box rows are (x_min, y_min, x_max, y_max).
struct PromptBundle {
  Tensor aux_mask_logits;  // (N, D, H, W); undefined for box_only
  Tensor aux_boxes;        // (N, 4): learned boxes, or mask-derived constants for mask_only
  Tensor aux_cls_tokens;   // (N, E)
  PromptVariant variant = PromptVariant::mask_avg_box;
  std::vector<bool> empty_mask;  // slots whose thresholded mask was empty (mask-derived variants)
};

struct ResolvedPrompts {
  std::optional<Tensor> masks;  // (N, D, H, W) logits
  Tensor boxes;                 // (N, 4)
  std::vector<bool> empty_mask;
};

/// Boxes of {logit > 0} per slot, full-image box for empty slots. Constant tensor.
Tensor mask_derived_boxes(const Tensor& mask_logits, std::vector<bool>* empty = nullptr);

class PromptGenerator : public Module {
 public:
  PromptGenerator(const PromptGeneratorConfig& cfg, Rng& rng);

  /// taps: shallow -> deep grids (1, E, D', H', W'), batch of one.
  PromptBundle forward(const std::vector<Tensor>& taps) const;
  const PromptGeneratorConfig& config() const { return cfg_; }

  std::vector<std::unique_ptr<Conv3d>> level_convs;   // level 0 is the deepest tap
  std::vector<std::unique_ptr<Conv3d>> skip_projs;    // for levels 1..T-1
  std::unique_ptr<Conv3d> mask_out;                   // 1x1x1 -> N
  std::unique_ptr<Mlp> box_mlp;
  std::unique_ptr<Mlp> cls_mlp;

 private:
  PromptGeneratorConfig cfg_;
  std::vector<std::size_t> channels_;
  std::vector<Extent3> level_extent_;
};

ResolvedPrompts resolve_prompts(const PromptBundle& bundle);

}  // namespace maskseg
