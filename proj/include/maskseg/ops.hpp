#pragma once

#include <array>
#include <span>
#include <vector>

#include "maskseg/tensor.hpp"

// Differentiable ops. Layout is channels-first; volumetric ops take
// (batch, channels, depth, height, width). Binary element-wise ops accept
// equal shapes or a single-element operand, nothing else.
namespace maskseg {

using Extent3 = std::array<std::size_t, 3>;

// element-wise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor abs(const Tensor& x);
/// Same values, cut from the tape.
Tensor stop_gradient(const Tensor& x);

// shape
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, std::size_t a, std::size_t b);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Repeats size-1 axes of `x` up to `shape`; ranks must agree.
Tensor expand(const Tensor& x, Shape shape);
Tensor flip(const Tensor& x, std::size_t axis);

// reductions
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor max_project(const Tensor& x, std::size_t axis);

// linear algebra and normalization
/// (..., m, k) x (..., k, n) with identical leading dims, or plain 2-D.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (..., in), weight (out, in), bias (out) or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// volumetric
struct Conv3dOptions {
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  std::size_t groups = 1;
};
/// x (B, Cin, D, H, W), weight (Cout, Cin/groups, kd, kh, kw), bias (Cout) or undefined.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dOptions& opt = {});
/// Per-channel conv; weight (C, 1, kd, kh, kw).
Tensor depthwise_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Extent3 padding);
/// x (B, Cin, D, H, W), weight (Cin, Cout, kd, kh, kw), no padding.
Tensor conv_transpose3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Extent3 stride);
Tensor upsample_nearest(const Tensor& x, Extent3 out);
/// Half-pixel-centre sampling (align_corners = false).
Tensor upsample_trilinear(const Tensor& x, Extent3 out);
/// Contiguous bins whose sizes differ by at most one; requires in >= out per axis.
Tensor adaptive_avg_pool3d(const Tensor& x, Extent3 out);

// losses
/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);

}  // namespace maskseg
