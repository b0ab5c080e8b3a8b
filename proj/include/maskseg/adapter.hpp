#pragma once

#include <memory>
#include <optional>
#include <string>

#include "maskseg/module.hpp"

namespace maskseg {

enum class DepthBranch { none, depth_mlp, depth_conv };
enum class BranchPosition { middle, after_up, before_down };

std::string to_string(DepthBranch k);
std::string to_string(BranchPosition p);
DepthBranch parse_depth_branch(const std::string& s);
BranchPosition parse_branch_position(const std::string& s);

struct AdapterConfig {
  std::size_t dim = 32;
  double bottleneck_ratio = 0.25;
  DepthBranch kind = DepthBranch::none;
  BranchPosition position = BranchPosition::middle;
  double depth_expansion = 2.0;
  double scale = 0.5;
  std::size_t depth = 1;  // token-grid depth, needed by the depth MLP

  void validate() const;
};

/// Spatial layout of the token axis for grid-mode calls.
struct GridHW {
  std::size_t h = 1, w = 1;
};

/// x + s * up(act(down(x))) with an optional depth-mixing branch.
/// Inputs are (B, D, L, C): depth slices of L tokens with C channels.
class Adapter : public Module {
 public:
  Adapter(const AdapterConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, std::optional<GridHW> grid = std::nullopt) const {
    return add(x, branch(x, grid));
  }
  /// The scaled residual branch alone, for parallel placement.
  Tensor branch(const Tensor& x, std::optional<GridHW> grid = std::nullopt) const;

  const AdapterConfig& config() const { return cfg_; }

  Linear down;
  Linear up;

 private:
  /// z + f(z) where f mixes along depth.
  Tensor depth_mix(const Tensor& z, std::optional<GridHW> grid) const;

  AdapterConfig cfg_;
  std::unique_ptr<Linear> dmlp_fc1_, dmlp_fc2_;
  Tensor dconv_weight_;
};

}  // namespace maskseg
