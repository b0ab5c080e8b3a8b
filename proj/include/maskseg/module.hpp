#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "maskseg/checkpoint.hpp"
#include "maskseg/ops.hpp"

namespace maskseg {

using Rng = std::mt19937_64;

Tensor uniform_param(Shape shape, double bound, Rng& rng);
/// Normal(0, std) resampled outside two standard deviations.
Tensor trunc_normal_param(Shape shape, double std, Rng& rng);

/// Owner of named parameters and child modules. Names are slash-separated
/// paths; modules are pinned in memory once constructed.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  NamedTensors named_parameters(const std::string& prefix = "") const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Copies values by name; every parameter must be present with a matching shape.
  void load_state(const NamedTensors& state, const std::string& prefix = "");

 protected:
  Tensor register_parameter(std::string name, Tensor t);
  void register_module(std::string name, Module& child);

 private:
  NamedTensors params_;
  std::vector<std::pair<std::string, Module*>> children_;
};

class Linear : public Module {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  /// Sets weight and bias to zero.
  void zero();

  Tensor weight;
  Tensor bias;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t dim);
  Tensor forward(const Tensor& x) const { return layernorm(x, gamma, beta); }

  Tensor gamma;
  Tensor beta;
};

class Conv3d : public Module {
 public:
  Conv3d(std::size_t in, std::size_t out, Extent3 kernel, Rng& rng, Conv3dOptions opt = {});
  Tensor forward(const Tensor& x) const { return conv3d(x, weight, bias, opt_); }

  Tensor weight;
  Tensor bias;

 private:
  Conv3dOptions opt_;
};

/// Transposed conv with kernel equal to stride.
class ConvTranspose3d : public Module {
 public:
  ConvTranspose3d(std::size_t in, std::size_t out, Extent3 stride, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv_transpose3d(x, weight, bias, stride_); }

  Tensor weight;
  Tensor bias;

 private:
  Extent3 stride_;
};

/// Linear -> GELU -> Linear.
class Mlp : public Module {
 public:
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  Linear fc1;
  Linear fc2;
};

/// Multi-head attention over (batch, tokens, dim) tensors.
class Attention : public Module {
 public:
  Attention(std::size_t dim, std::size_t heads, Rng& rng);
  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const;

  Linear q_proj, k_proj, v_proj, out_proj;

 private:
  std::size_t heads_;
};

}  // namespace maskseg
