#include <algorithm>
#include <cmath>

#include "maskseg/ops.hpp"

namespace maskseg {

namespace {

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double acc = 0.0;
      const double* gi = g + i * n;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      c[i * k + p] += acc;
    }
}

// c[k,n] += a[m,k]^T * g[m,n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* gi = g + i * n;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(std::string_view op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw_shape_error(op, shape, "axis out of range");
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size()) throw_shape_error("matmul", sa, sb);
  const std::size_t r = sa.size();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (sa[i] != sb[i]) throw_shape_error("matmul", sa, sb);
  const std::size_t m = sa[r - 2], k = sa[r - 1], n = sb[r - 1];
  if (sb[r - 2] != k) throw_shape_error("matmul", sa, sb);
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) batch *= sa[i];
  Shape out_shape = sa;
  out_shape[r - 1] = n;
  std::vector<double> out(batch * m * n, 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t t = 0; t < batch; ++t)
    gemm_nn(av.data() + t * m * k, bv.data() + t * k * n, out.data() + t * m * n, m, k, n);
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n](const Node& node, std::span<const double> g, GradSlots& gin) {
                       const double* ad = node.inputs[0]->data.data();
                       const double* bd = node.inputs[1]->data.data();
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* gt = g.data() + t * m * n;
                         if (gin[0]) gemm_nt(gt, bd + t * k * n, gin[0]->data() + t * m * k, m, n, k);
                         if (gin[1]) gemm_tn(ad + t * m * k, gt, gin[1]->data() + t * k * n, m, k, n);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[1]) throw_shape_error("linear", sx, sw);
  const std::size_t out_f = sw[0], in_f = sw[1];
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != out_f)) throw_shape_error("linear", sw, bias.shape());
  const std::size_t rows = x.numel() / in_f;
  Shape out_shape = sx;
  out_shape.back() = out_f;
  std::vector<double> out(rows * out_f, 0.0);
  // y = x W^T + b
  gemm_nt(x.data().data(), weight.data().data(), out.data(), rows, in_f, out_f);
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] += bv[o];
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("linear", std::move(out_shape), std::move(out), inputs,
                     [rows, in_f, out_f](const Node& node, std::span<const double> g, GradSlots& gin) {
                       const double* xd = node.inputs[0]->data.data();
                       const double* wd = node.inputs[1]->data.data();
                       if (gin[0]) gemm_nn(g.data(), wd, gin[0]->data(), rows, out_f, in_f);
                       if (gin[1]) gemm_tn(g.data(), xd, gin[1]->data(), rows, out_f, in_f);
                       if (gin.size() > 2 && gin[2]) {
                         auto& gb = *gin[2];
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at("softmax", x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += (out[base + l * s.inner] = std::exp(xv[base + l * s.inner] - mx));
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [s](const Node& node, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       const auto& y = node.output->data;
                       auto& gx = *gin[0];
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.len * s.inner + i;
                           double dot = 0.0;
                           for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
                           for (std::size_t l = 0; l < s.len; ++l) {
                             const std::size_t k = base + l * s.inner;
                             gx[k] += y[k] * (g[k] - dot);
                           }
                         }
                     });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at("log_softmax", x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(xv[base + l * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = xv[base + l * s.inner] - lz;
    }
  return make_result("log_softmax", x.shape(), std::move(out), {x},
                     [s](const Node& node, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       const auto& y = node.output->data;
                       auto& gx = *gin[0];
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.len * s.inner + i;
                           double gs = 0.0;
                           for (std::size_t l = 0; l < s.len; ++l) gs += g[base + l * s.inner];
                           for (std::size_t l = 0; l < s.len; ++l) {
                             const std::size_t k = base + l * s.inner;
                             gx[k] += g[k] - std::exp(y[k]) * gs;
                           }
                         }
                     });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() == 0) throw_shape_error("layernorm", x.shape(), "rank 0");
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) throw_shape_error("layernorm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / c;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * rs;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](const Node& node, std::span<const double> g,
                                                               GradSlots& gin) {
        const auto& gam = node.inputs[1]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = xhat.data() + r * c;
          if (gin[1])
            for (std::size_t j = 0; j < c; ++j) (*gin[1])[j] += gr[j] * hr[j];
          if (gin[2])
            for (std::size_t j = 0; j < c; ++j) (*gin[2])[j] += gr[j];
          if (gin[0]) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = gr[j] * gam[j];
              m1 += dh;
              m2 += dh * hr[j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
              (*gin[0])[r * c + j] += rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
          }
        }
      });
}

}  // namespace maskseg
