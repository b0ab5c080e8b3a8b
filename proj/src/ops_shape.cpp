#include <algorithm>
#include <numeric>

#include "maskseg/ops.hpp"

namespace maskseg {

namespace {

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(std::string_view op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw_shape_error(op, shape, "axis " + std::to_string(axis) + " out of range");
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

}  // namespace

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) throw_shape_error("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  std::vector<bool> used(r, false);
  if (order.size() != r) throw_shape_error("transpose", in, "permutation rank mismatch");
  for (auto o : order) {
    if (o >= r || used[o]) throw_shape_error("transpose", in, "invalid permutation");
    used[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[order[i]];
  auto in_st = strides_of(in);
  // source stride for each output axis
  std::vector<std::size_t> src_st(r);
  for (std::size_t i = 0; i < r; ++i) src_st[i] = in_st[order[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += src_st[a];
      if (idx[a] < out_shape[a]) break;
      src -= src_st[a] * idx[a];
      idx[a] = 0;
    }
  }
  auto xv = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[map[i]];
  return make_result("transpose", std::move(out_shape), std::move(out), {x},
                     [map = std::move(map)](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[map[i]] += g[i];
                     });
}

Tensor transpose(const Tensor& x, std::size_t a, std::size_t b) {
  std::vector<std::size_t> order(x.dim());
  std::iota(order.begin(), order.end(), 0);
  if (a >= order.size() || b >= order.size()) throw_shape_error("transpose", x.shape(), "axis out of range");
  std::swap(order[a], order[b]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw_shape_error("concat", out_shape, "axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = out_shape;
    if (a.size() != b.size()) throw_shape_error("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) throw_shape_error("concat", out_shape, p.shape());
    total += p.size(axis);
  }
  out_shape[axis] = total;
  const auto s = split_at("concat", out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.size(axis);
    auto pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.begin() + o * len * s.inner, len * s.inner, out.begin() + (o * s.len + off) * s.inner);
    off += len;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [s, offsets = std::move(offsets)](const Node& node, std::span<const double> g, GradSlots& gin) {
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         if (!gin[k]) continue;
                         auto& gp = *gin[k];
                         const std::size_t len = gp.size() / (s.outer * s.inner);
                         for (std::size_t o = 0; o < s.outer; ++o)
                           for (std::size_t j = 0; j < len * s.inner; ++j)
                             gp[o * len * s.inner + j] += g[(o * s.len + offsets[k]) * s.inner + j];
                       }
                       (void)node;
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_at("slice", x.shape(), axis);
  if (begin >= end || end > s.len) {
    throw_shape_error("slice", x.shape(),
                      "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " + std::to_string(axis));
  }
  Shape out_shape = x.shape();
  const std::size_t len = end - begin;
  out_shape[axis] = len;
  auto xv = x.data();
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.begin() + (o * s.len + begin) * s.inner, len * s.inner, out.begin() + o * len * s.inner);
  return make_result("slice", std::move(out_shape), std::move(out), {x},
                     [s, begin, len](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t j = 0; j < len * s.inner; ++j)
                           gx[(o * s.len + begin) * s.inner + j] += g[o * len * s.inner + j];
                     });
}

Tensor expand(const Tensor& x, Shape shape) {
  const Shape& in = x.shape();
  if (in.size() != shape.size()) throw_shape_error("expand", in, shape);
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] != shape[i] && in[i] != 1) throw_shape_error("expand", in, shape);
  auto in_st = strides_of(in);
  const std::size_t r = in.size();
  std::vector<std::size_t> src_st(r);
  for (std::size_t i = 0; i < r; ++i) src_st[i] = in[i] == 1 ? 0 : in_st[i];
  const std::size_t n = numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += src_st[a];
      if (idx[a] < shape[a]) break;
      src -= src_st[a] * idx[a];
      idx[a] = 0;
    }
  }
  auto xv = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[map[i]];
  return make_result("expand", std::move(shape), std::move(out), {x},
                     [map = std::move(map)](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[map[i]] += g[i];
                     });
}

Tensor flip(const Tensor& x, std::size_t axis) {
  const auto s = split_at("flip", x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      std::copy_n(xv.begin() + (o * s.len + l) * s.inner, s.inner,
                  out.begin() + (o * s.len + (s.len - 1 - l)) * s.inner);
  return make_result("flip", x.shape(), std::move(out), {x},
                     [s](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t l = 0; l < s.len; ++l)
                           for (std::size_t i = 0; i < s.inner; ++i)
                             gx[(o * s.len + l) * s.inner + i] += g[(o * s.len + (s.len - 1 - l)) * s.inner + i];
                     });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result("sum", {1}, {acc}, {x}, [](const Node&, std::span<const double> g, GradSlots& gin) {
    if (!gin[0]) return;
    for (auto& v : *gin[0]) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result("mean", {1}, {acc / n}, {x}, [n](const Node&, std::span<const double> g, GradSlots& gin) {
    if (!gin[0]) return;
    for (auto& v : *gin[0]) v += g[0] / n;
  });
}

namespace {

Tensor reduce_axis(std::string_view op, const Tensor& x, std::size_t axis, double factor) {
  const auto s = split_at(op, x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  auto xv = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
  if (factor != 1.0)
    for (auto& v : out) v *= factor;
  return make_result(op, std::move(out_shape), std::move(out), {x},
                     [s, factor](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t l = 0; l < s.len; ++l)
                           for (std::size_t i = 0; i < s.inner; ++i)
                             gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i] * factor;
                     });
}

}  // namespace

Tensor sum(const Tensor& x, std::size_t axis) { return reduce_axis("sum", x, axis, 1.0); }

Tensor mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) throw_shape_error("mean", x.shape(), "axis out of range");
  return reduce_axis("mean", x, axis, 1.0 / static_cast<double>(x.size(axis)));
}

Tensor max_project(const Tensor& x, std::size_t axis) {
  const auto s = split_at("max-project", x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  auto xv = x.data();
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.len * s.inner + i;
      for (std::size_t l = 1; l < s.len; ++l) {
        std::size_t k = (o * s.len + l) * s.inner + i;
        if (xv[k] > xv[best]) best = k;
      }
      out[o * s.inner + i] = xv[best];
      arg[o * s.inner + i] = best;
    }
  return make_result("max-project", std::move(out_shape), std::move(out), {x},
                     [arg = std::move(arg)](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       for (std::size_t j = 0; j < g.size(); ++j) (*gin[0])[arg[j]] += g[j];
                     });
}

}  // namespace maskseg
