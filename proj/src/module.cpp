#include "maskseg/module.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace maskseg {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor trunc_normal_param(Shape shape, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) {
    do {
      v = dist(rng);
    } while (std::fabs(v) > 2.0 * std);
  }
  return t;
}

Tensor Module::register_parameter(std::string name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(std::move(name), t);
  return t;
}

void Module::register_module(std::string name, Module& child) { children_.emplace_back(std::move(name), &child); }

NamedTensors Module::named_parameters(const std::string& prefix) const {
  NamedTensors out;
  for (const auto& [n, t] : params_) out.emplace_back(prefix + n, t);
  for (const auto& [n, m] : children_) {
    auto sub = m->named_parameters(prefix + n + "/");
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void Module::load_state(const NamedTensors& state, const std::string& prefix) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : state) by_name[n] = &t;
  for (auto& [n, t] : named_parameters(prefix)) {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw std::runtime_error("load_state: missing parameter " + n);
    if (it->second->shape() != t.shape())
      throw std::runtime_error("load_state: " + n + " has shape " + shape_str(it->second->shape()) + ", expected " +
                               shape_str(t.shape()));
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), t.data().begin());
  }
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = register_parameter("weight", uniform_param({out, in}, bound, rng));
  if (with_bias) bias = register_parameter("bias", uniform_param({out}, bound, rng));
}

void Linear::zero() {
  for (auto& v : weight.data()) v = 0.0;
  if (bias.defined())
    for (auto& v : bias.data()) v = 0.0;
}

LayerNorm::LayerNorm(std::size_t dim) {
  gamma = register_parameter("gamma", Tensor::full({dim}, 1.0));
  beta = register_parameter("beta", Tensor::zeros({dim}));
}

Conv3d::Conv3d(std::size_t in, std::size_t out, Extent3 kernel, Rng& rng, Conv3dOptions opt) : opt_(opt) {
  const std::size_t fan_in = in / opt.groups * kernel[0] * kernel[1] * kernel[2];
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  weight = register_parameter("weight", uniform_param({out, in / opt.groups, kernel[0], kernel[1], kernel[2]}, bound, rng));
  bias = register_parameter("bias", uniform_param({out}, bound, rng));
}

ConvTranspose3d::ConvTranspose3d(std::size_t in, std::size_t out, Extent3 stride, Rng& rng) : stride_(stride) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = register_parameter("weight", uniform_param({in, out, stride[0], stride[1], stride[2]}, bound, rng));
  bias = register_parameter("bias", uniform_param({out}, bound, rng));
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {
  register_module("fc1", fc1);
  register_module("fc2", fc2);
}

Attention::Attention(std::size_t dim, std::size_t heads, Rng& rng)
    : q_proj(dim, dim, rng), k_proj(dim, dim, rng), v_proj(dim, dim, rng), out_proj(dim, dim, rng), heads_(heads) {
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("Attention: dim must be divisible by heads");
  register_module("q_proj", q_proj);
  register_module("k_proj", k_proj);
  register_module("v_proj", v_proj);
  register_module("out_proj", out_proj);
}

Tensor Attention::forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in) const {
  if (q_in.dim() != 3 || k_in.dim() != 3 || k_in.shape() != v_in.shape() || q_in.size(0) != k_in.size(0))
    throw_shape_error("attention", q_in.shape(), k_in.shape());
  const std::size_t b = q_in.size(0), nq = q_in.size(1), nk = k_in.size(1), dim = q_in.size(2);
  const std::size_t hd = dim / heads_;
  auto split = [&](const Tensor& t, std::size_t n) {
    return permute(reshape(t, {b, n, heads_, hd}), {0, 2, 1, 3});  // (b, h, n, hd)
  };
  Tensor q = split(q_proj.forward(q_in), nq);
  Tensor k = split(k_proj.forward(k_in), nk);
  Tensor v = split(v_proj.forward(v_in), nk);
  Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor attn = softmax(scores, 3);
  Tensor out = permute(matmul(attn, v), {0, 2, 1, 3});
  return out_proj.forward(reshape(out, {b, nq, dim}));
}

}  // namespace maskseg
