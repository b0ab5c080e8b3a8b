#include "maskseg/adapter.hpp"

#include <cmath>
#include <stdexcept>

namespace maskseg {

std::string to_string(DepthBranch k) {
  switch (k) {
    case DepthBranch::none: return "none";
    case DepthBranch::depth_mlp: return "depth_mlp";
    case DepthBranch::depth_conv: return "depth_conv";
  }
  return "?";
}

std::string to_string(BranchPosition p) {
  switch (p) {
    case BranchPosition::middle: return "middle";
    case BranchPosition::after_up: return "after_up";
    case BranchPosition::before_down: return "before_down";
  }
  return "?";
}

DepthBranch parse_depth_branch(const std::string& s) {
  if (s == "none") return DepthBranch::none;
  if (s == "depth_mlp") return DepthBranch::depth_mlp;
  if (s == "depth_conv") return DepthBranch::depth_conv;
  throw std::invalid_argument("unknown adapter kind '" + s + "' (none, depth_mlp, depth_conv)");
}

BranchPosition parse_branch_position(const std::string& s) {
  if (s == "middle") return BranchPosition::middle;
  if (s == "after_up") return BranchPosition::after_up;
  if (s == "before_down") return BranchPosition::before_down;
  throw std::invalid_argument("unknown adapter position '" + s + "' (middle, after_up, before_down)");
}

void AdapterConfig::validate() const {
  if (dim == 0 || depth == 0) throw std::invalid_argument("adapter: dim and depth must be positive");
  if (!(bottleneck_ratio > 0) || !(depth_expansion > 0)) throw std::invalid_argument("adapter: ratios must be > 0");
  if (kind == DepthBranch::none && position != BranchPosition::middle)
    throw std::invalid_argument("adapter: a position needs a depth branch");
}

namespace {

std::string branch_name(DepthBranch k, BranchPosition p) {
  std::string n = k == DepthBranch::depth_mlp ? "dmlp" : "dconv";
  switch (p) {
    case BranchPosition::middle: return n + "_mid";
    case BranchPosition::after_up: return n + "_post_up";
    case BranchPosition::before_down: return n + "_pre_down";
  }
  return n;
}

std::size_t ratio_of(std::size_t n, double r) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) * r)));
}

}  // namespace

Adapter::Adapter(const AdapterConfig& cfg, Rng& rng)
    : down(cfg.dim, ratio_of(cfg.dim, cfg.bottleneck_ratio), rng),
      up(ratio_of(cfg.dim, cfg.bottleneck_ratio), cfg.dim, rng),
      cfg_(cfg) {
  cfg_.validate();
  up.zero();
  register_module("down", down);
  register_module("up", up);
  if (cfg.kind == DepthBranch::none) return;

  // the branch acts on bottleneck features in the middle, full width otherwise
  const std::size_t ch = cfg.position == BranchPosition::middle ? ratio_of(cfg.dim, cfg.bottleneck_ratio) : cfg.dim;
  const std::string name = branch_name(cfg.kind, cfg.position);
  if (cfg.kind == DepthBranch::depth_mlp) {
    const std::size_t hidden = ratio_of(cfg.depth, cfg.depth_expansion);
    dmlp_fc1_ = std::make_unique<Linear>(cfg.depth, hidden, rng, false);
    dmlp_fc2_ = std::make_unique<Linear>(hidden, cfg.depth, rng, false);
    dmlp_fc2_->zero();
    register_parameter(name + "/fc1/weight", dmlp_fc1_->weight);
    register_parameter(name + "/fc2/weight", dmlp_fc2_->weight);
  } else {
    dconv_weight_ = register_parameter(name + "/weight", Tensor::zeros({ch, 1, 3, 1, 1}));
  }
}

Tensor Adapter::depth_mix(const Tensor& z, std::optional<GridHW> grid) const {
  const Shape& s = z.shape();  // (B, D, L, C)
  if (cfg_.kind == DepthBranch::depth_mlp) {
    if (s[1] != cfg_.depth) throw_shape_error("depth-mlp adapter", s, "depth differs from configured depth");
    Tensor t = permute(z, {0, 2, 3, 1});  // (B, L, C, D)
    t = dmlp_fc2_->forward(gelu(dmlp_fc1_->forward(t)));
    return add(z, permute(t, {0, 3, 1, 2}));
  }
  if (!grid) throw std::invalid_argument("depth-conv adapter requires grid mode");
  if (grid->h * grid->w != s[2]) throw_shape_error("depth-conv adapter", s, "token count differs from grid h*w");
  // (B, D, H, W, C) -> (B, C, D, H, W)
  Tensor g = permute(reshape(z, {s[0], s[1], grid->h, grid->w, s[3]}), {0, 4, 1, 2, 3});
  g = depthwise_conv3d(g, dconv_weight_, Tensor(), {1, 0, 0});
  g = reshape(permute(g, {0, 2, 3, 4, 1}), s);
  return add(z, g);
}

Tensor Adapter::branch(const Tensor& x, std::optional<GridHW> grid) const {
  if (x.dim() != 4 || x.size(3) != cfg_.dim) throw_shape_error("adapter", x.shape(), "expected (B, D, L, dim)");
  if (cfg_.kind == DepthBranch::depth_conv && !grid) throw std::invalid_argument("depth-conv adapter requires grid mode");
  const bool depth = cfg_.kind != DepthBranch::none;
  Tensor in = depth && cfg_.position == BranchPosition::before_down ? depth_mix(x, grid) : x;
  Tensor h = gelu(down.forward(in));
  if (depth && cfg_.position == BranchPosition::middle) h = depth_mix(h, grid);
  Tensor y = up.forward(h);
  if (depth && cfg_.position == BranchPosition::after_up) y = depth_mix(y, grid);
  return scale(y, cfg_.scale);
}

}  // namespace maskseg
