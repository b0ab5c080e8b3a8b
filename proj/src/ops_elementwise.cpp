#include <cmath>
#include <numbers>

#include "maskseg/ops.hpp"

namespace maskseg {

namespace {

// Resolves the operand shape rule shared by all binary ops.
Shape binary_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw_shape_error(op, a.shape(), b.shape());
}

// f(x, y) and its partials df/dx, df/dy evaluated per element.
template <typename F, typename Dx, typename Dy>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, Dx dx, Dy dy) {
  Shape shape = binary_shape(op, a, b);
  const std::size_t n = numel(shape);
  const bool a1 = a.numel() == 1 && a.shape() != shape;
  const bool b1 = b.numel() == 1 && b.shape() != shape;
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a1 ? 0 : i], bv[b1 ? 0 : i]);
  return make_result(op, std::move(shape), std::move(out), {a, b},
                     [a1, b1, n, dx, dy](const Node& node, std::span<const double> g, GradSlots& gin) {
                       const auto& x = node.inputs[0]->data;
                       const auto& y = node.inputs[1]->data;
                       for (std::size_t i = 0; i < n; ++i) {
                         double xv = x[a1 ? 0 : i];
                         double yv = y[b1 ? 0 : i];
                         if (gin[0]) (*gin[0])[a1 ? 0 : i] += g[i] * dx(xv, yv);
                         if (gin[1]) (*gin[1])[b1 ? 0 : i] += g[i] * dy(xv, yv);
                       }
                     });
}

// y = f(x) with dy/dx expressed through x and y.
template <typename F, typename D>
Tensor unary(std::string_view op, const Tensor& x, F f, D d) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x},
                     [d](const Node& node, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       const auto& xs = node.inputs[0]->data;
                       const auto& ys = node.output->data;
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += g[i] * d(xs[i], ys[i]);
                     });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

// Ties send the gradient to the first operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scalar-mul", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      "add-scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sin(const Tensor& x) {
  return unary(
      "sin", x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

Tensor cos(const Tensor& x) {
  return unary(
      "cos", x, [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) throw_shape_error("bce_with_logits", logits.shape(), target.shape());
  auto z = logits.data();
  auto t = target.data();
  const std::size_t n = z.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // max(z,0) - z t + log(1 + exp(-|z|))
    acc += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::fabs(z[i])));
  }
  return make_result("bce_with_logits", {1}, {acc / static_cast<double>(n)}, {logits, target},
                     [n](const Node& node, std::span<const double> g, GradSlots& gin) {
                       const auto& zs = node.inputs[0]->data;
                       const auto& ts = node.inputs[1]->data;
                       const double s = g[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         if (gin[0]) (*gin[0])[i] += s * (sigmoid_scalar(zs[i]) - ts[i]);
                         if (gin[1]) (*gin[1])[i] += s * (-zs[i]);
                       }
                     });
}

}  // namespace maskseg
