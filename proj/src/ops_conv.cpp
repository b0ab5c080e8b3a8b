#include <algorithm>
#include <cmath>

#include "maskseg/ops.hpp"

namespace maskseg {

namespace {

struct Vol5 {
  std::size_t b, c, d, h, w;
  std::size_t plane() const { return d * h * w; }
};

Vol5 vol5(std::string_view op, const Tensor& x) {
  if (x.dim() != 5) throw_shape_error(op, x.shape(), "expected (B, C, D, H, W)");
  const auto& s = x.shape();
  return {s[0], s[1], s[2], s[3], s[4]};
}

// Valid output range [lo, hi) along one axis for kernel offset k.
inline void out_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad, std::size_t k,
                      std::size_t& lo, std::size_t& hi) {
  // need 0 <= o*stride - pad + k < in
  const long long kk = static_cast<long long>(k) - static_cast<long long>(pad);
  const long long st = static_cast<long long>(stride);
  long long l = kk >= 0 ? 0 : (-kk + st - 1) / st;
  long long h = (static_cast<long long>(in) - kk + st - 1) / st;
  h = std::min<long long>(h, static_cast<long long>(out));
  if (h < l) h = l;
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

// Per-axis linear interpolation table for half-pixel-centre resampling.
struct Lerp {
  std::vector<std::size_t> i0, i1;
  std::vector<double> t;
};

Lerp lerp_table(std::size_t in, std::size_t out) {
  Lerp l;
  l.i0.resize(out);
  l.i1.resize(out);
  l.t.resize(out);
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
    if (src < 0) src = 0;
    std::size_t a = static_cast<std::size_t>(std::floor(src));
    if (a > in - 1) a = in - 1;
    l.i0[o] = a;
    l.i1[o] = std::min(a + 1, in - 1);
    l.t[o] = src - static_cast<double>(a);
  }
  return l;
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dOptions& opt) {
  const Vol5 in = vol5("conv3d", x);
  if (weight.dim() != 5) throw_shape_error("conv3d", x.shape(), weight.shape());
  const auto& ws = weight.shape();
  const std::size_t groups = opt.groups;
  if (groups == 0 || in.c % groups != 0 || ws[0] % groups != 0 || ws[1] * groups != in.c)
    throw_shape_error("conv3d", x.shape(), weight.shape());
  const std::size_t cout = ws[0], cg = ws[1], kd = ws[2], kh = ws[3], kw = ws[4];
  const std::size_t cout_g = cout / groups;
  if (bias.defined() && bias.numel() != cout) throw_shape_error("conv3d", weight.shape(), bias.shape());
  const auto [sd, sh, sw] = opt.stride;
  const auto [pd, ph, pw] = opt.padding;
  if (in.d + 2 * pd < kd || in.h + 2 * ph < kh || in.w + 2 * pw < kw)
    throw_shape_error("conv3d", x.shape(), weight.shape());
  const Vol5 out{in.b, cout, (in.d + 2 * pd - kd) / sd + 1, (in.h + 2 * ph - kh) / sh + 1,
                 (in.w + 2 * pw - kw) / sw + 1};

  // Visits every (input, output, weight) index triple once.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < in.b; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t g = co / cout_g;
        for (std::size_t cj = 0; cj < cg; ++cj) {
          const std::size_t ci = g * cg + cj;
          const std::size_t xbase = (b * in.c + ci) * in.plane();
          const std::size_t obase = (b * cout + co) * out.plane();
          for (std::size_t z = 0; z < kd; ++z) {
            std::size_t z0, z1;
            out_range(in.d, out.d, sd, pd, z, z0, z1);
            for (std::size_t y = 0; y < kh; ++y) {
              std::size_t y0, y1;
              out_range(in.h, out.h, sh, ph, y, y0, y1);
              for (std::size_t xk = 0; xk < kw; ++xk) {
                std::size_t x0, x1;
                out_range(in.w, out.w, sw, pw, xk, x0, x1);
                const std::size_t widx = (((co * cg + cj) * kd + z) * kh + y) * kw + xk;
                for (std::size_t oz = z0; oz < z1; ++oz) {
                  const std::size_t iz = oz * sd + z - pd;
                  for (std::size_t oy = y0; oy < y1; ++oy) {
                    const std::size_t iy = oy * sh + y - ph;
                    const std::size_t orow = obase + (oz * out.h + oy) * out.w;
                    const std::size_t irow = xbase + (iz * in.h + iy) * in.w;
                    fn(widx, orow, irow, x0, x1, xk);
                  }
                }
              }
            }
          }
        }
      }
  };

  std::vector<double> res(out.b * out.c * out.plane(), 0.0);
  {
    const double* xd = x.data().data();
    const double* wd = weight.data().data();
    double* od = res.data();
    for_each_tap([&](std::size_t widx, std::size_t orow, std::size_t irow, std::size_t x0, std::size_t x1,
                     std::size_t xk) {
      const double wv = wd[widx];
      for (std::size_t ox = x0; ox < x1; ++ox) od[orow + ox] += wv * xd[irow + ox * sw + xk - pw];
    });
    if (bias.defined()) {
      auto bv = bias.data();
      for (std::size_t b = 0; b < out.b; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
          double* p = od + (b * cout + co) * out.plane();
          for (std::size_t i = 0; i < out.plane(); ++i) p[i] += bv[co];
        }
    }
  }

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  Shape out_shape{out.b, out.c, out.d, out.h, out.w};
  return make_result(opt.groups > 1 && opt.groups == in.c ? "depthwise-conv3d" : "conv3d", std::move(out_shape),
                     std::move(res), inputs,
                     [for_each_tap, out, sw, pw](const Node& node, std::span<const double> g, GradSlots& gin) {
                       const double* xd = node.inputs[0]->data.data();
                       const double* wd = node.inputs[1]->data.data();
                       double* gx = gin[0] ? gin[0]->data() : nullptr;
                       double* gw = gin[1] ? gin[1]->data() : nullptr;
                       if (gx || gw) {
                         for_each_tap([&](std::size_t widx, std::size_t orow, std::size_t irow, std::size_t x0,
                                          std::size_t x1, std::size_t xk) {
                           const double wv = wd[widx];
                           double acc = 0.0;
                           for (std::size_t ox = x0; ox < x1; ++ox) {
                             const std::size_t ix = irow + ox * sw + xk - pw;
                             if (gx) gx[ix] += g[orow + ox] * wv;
                             acc += g[orow + ox] * xd[ix];
                           }
                           if (gw) gw[widx] += acc;
                         });
                       }
                       if (gin.size() > 2 && gin[2]) {
                         auto& gb = *gin[2];
                         for (std::size_t b = 0; b < out.b; ++b)
                           for (std::size_t co = 0; co < out.c; ++co) {
                             const double* p = g.data() + (b * out.c + co) * out.plane();
                             double acc = 0.0;
                             for (std::size_t i = 0; i < out.plane(); ++i) acc += p[i];
                             gb[co] += acc;
                           }
                       }
                     });
}

Tensor depthwise_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Extent3 padding) {
  const Vol5 in = vol5("depthwise-conv3d", x);
  if (weight.dim() != 5 || weight.size(0) != in.c || weight.size(1) != 1)
    throw_shape_error("depthwise-conv3d", x.shape(), weight.shape());
  Conv3dOptions opt;
  opt.padding = padding;
  opt.groups = in.c;
  return conv3d(x, weight, bias, opt);
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Extent3 stride) {
  const Vol5 in = vol5("conv-transpose3d", x);
  if (weight.dim() != 5 || weight.size(0) != in.c) throw_shape_error("conv-transpose3d", x.shape(), weight.shape());
  const auto& ws = weight.shape();
  const std::size_t cout = ws[1], kd = ws[2], kh = ws[3], kw = ws[4];
  if (bias.defined() && bias.numel() != cout) throw_shape_error("conv-transpose3d", weight.shape(), bias.shape());
  const auto [sd, sh, sw] = stride;
  const Vol5 out{in.b, cout, (in.d - 1) * sd + kd, (in.h - 1) * sh + kh, (in.w - 1) * sw + kw};

  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < in.b; ++b)
      for (std::size_t ci = 0; ci < in.c; ++ci)
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t z = 0; z < kd; ++z)
            for (std::size_t y = 0; y < kh; ++y)
              for (std::size_t xk = 0; xk < kw; ++xk) {
                const std::size_t widx = (((ci * cout + co) * kd + z) * kh + y) * kw + xk;
                for (std::size_t iz = 0; iz < in.d; ++iz)
                  for (std::size_t iy = 0; iy < in.h; ++iy) {
                    const std::size_t irow = (((b * in.c + ci) * in.d + iz) * in.h + iy) * in.w;
                    const std::size_t orow =
                        (((b * cout + co) * out.d + iz * sd + z) * out.h + iy * sh + y) * out.w + xk;
                    fn(widx, irow, orow);
                  }
              }
  };

  std::vector<double> res(out.b * out.c * out.plane(), 0.0);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  const std::size_t iw = in.w;
  for_each_tap([&](std::size_t widx, std::size_t irow, std::size_t orow) {
    const double wv = wd[widx];
    for (std::size_t ix = 0; ix < iw; ++ix) res[orow + ix * sw] += wv * xd[irow + ix];
  });
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t b = 0; b < out.b; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < out.plane(); ++i) res[(b * cout + co) * out.plane() + i] += bv[co];
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("conv-transpose3d", {out.b, out.c, out.d, out.h, out.w}, std::move(res), inputs,
                     [for_each_tap, out, iw, sw](const Node& node, std::span<const double> g, GradSlots& gin) {
                       const double* xd2 = node.inputs[0]->data.data();
                       const double* wd2 = node.inputs[1]->data.data();
                       double* gx = gin[0] ? gin[0]->data() : nullptr;
                       double* gw = gin[1] ? gin[1]->data() : nullptr;
                       if (gx || gw) {
                         for_each_tap([&](std::size_t widx, std::size_t irow, std::size_t orow) {
                           const double wv = wd2[widx];
                           double acc = 0.0;
                           for (std::size_t ix = 0; ix < iw; ++ix) {
                             const double go = g[orow + ix * sw];
                             if (gx) gx[irow + ix] += go * wv;
                             acc += go * xd2[irow + ix];
                           }
                           if (gw) gw[widx] += acc;
                         });
                       }
                       if (gin.size() > 2 && gin[2]) {
                         auto& gb = *gin[2];
                         for (std::size_t b = 0; b < out.b; ++b)
                           for (std::size_t co = 0; co < out.c; ++co)
                             for (std::size_t i = 0; i < out.plane(); ++i)
                               gb[co] += g[(b * out.c + co) * out.plane() + i];
                       }
                     });
}

Tensor upsample_nearest(const Tensor& x, Extent3 size) {
  const Vol5 in = vol5("nearest-upsample", x);
  const auto [od, oh, ow] = size;
  if (od == 0 || oh == 0 || ow == 0) throw_shape_error("nearest-upsample", x.shape(), "zero output extent");
  auto src_of = [](std::size_t i, std::size_t n_in, std::size_t n_out) {
    return std::min(n_in - 1, (i * n_in) / n_out);
  };
  const std::size_t n = in.b * in.c * od * oh * ow;
  std::vector<std::size_t> map(n);
  std::size_t k = 0;
  for (std::size_t bc = 0; bc < in.b * in.c; ++bc)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          map[k++] = bc * in.plane() + (src_of(z, in.d, od) * in.h + src_of(y, in.h, oh)) * in.w + src_of(xx, in.w, ow);
  auto xv = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[map[i]];
  return make_result("nearest-upsample", {in.b, in.c, od, oh, ow}, std::move(out), {x},
                     [map = std::move(map)](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[map[i]] += g[i];
                     });
}

Tensor upsample_trilinear(const Tensor& x, Extent3 size) {
  const Vol5 in = vol5("trilinear-upsample", x);
  const auto [od, oh, ow] = size;
  if (od == 0 || oh == 0 || ow == 0) throw_shape_error("trilinear-upsample", x.shape(), "zero output extent");
  Lerp lz = lerp_table(in.d, od), ly = lerp_table(in.h, oh), lx = lerp_table(in.w, ow);
  const std::size_t nbc = in.b * in.c;
  auto visit = [=](auto&& fn) {
    std::size_t k = 0;
    for (std::size_t bc = 0; bc < nbc; ++bc) {
      const std::size_t base = bc * in.plane();
      for (std::size_t z = 0; z < od; ++z)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx, ++k) {
            const std::size_t zs[2] = {lz.i0[z], lz.i1[z]};
            const std::size_t ys[2] = {ly.i0[y], ly.i1[y]};
            const std::size_t xs[2] = {lx.i0[xx], lx.i1[xx]};
            const double wz[2] = {1 - lz.t[z], lz.t[z]};
            const double wy[2] = {1 - ly.t[y], ly.t[y]};
            const double wx[2] = {1 - lx.t[xx], lx.t[xx]};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                  fn(k, base + (zs[a] * in.h + ys[b]) * in.w + xs[c], wz[a] * wy[b] * wx[c]);
          }
    }
  };
  auto xv = x.data();
  std::vector<double> out(nbc * od * oh * ow, 0.0);
  visit([&](std::size_t o, std::size_t i, double w) { out[o] += w * xv[i]; });
  return make_result("trilinear-upsample", {in.b, in.c, od, oh, ow}, std::move(out), {x},
                     [visit](const Node&, std::span<const double> g, GradSlots& gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       visit([&](std::size_t o, std::size_t i, double w) { gx[i] += w * g[o]; });
                     });
}

Tensor adaptive_avg_pool3d(const Tensor& x, Extent3 size) {
  const Vol5 in = vol5("adaptive-avg-pool", x);
  const auto [od, oh, ow] = size;
  if (od == 0 || oh == 0 || ow == 0 || od > in.d || oh > in.h || ow > in.w)
    throw_shape_error("adaptive-avg-pool", x.shape(), "output extent must be in [1, input extent]");
  auto bins = [](std::size_t n_in, std::size_t n_out) {
    std::vector<std::size_t> edges(n_out + 1);
    for (std::size_t i = 0; i <= n_out; ++i) edges[i] = (i * n_in) / n_out;
    return edges;
  };
  const auto ez = bins(in.d, od), ey = bins(in.h, oh), ex = bins(in.w, ow);
  // owner[i] = flat output index for input voxel i; inv[o] = 1/bin size
  const std::size_t nbc = in.b * in.c;
  std::vector<std::size_t> owner(x.numel());
  std::vector<double> inv(nbc * od * oh * ow);
  for (std::size_t bc = 0; bc < nbc; ++bc)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const std::size_t o = ((bc * od + z) * oh + y) * ow + xx;
          std::size_t cnt = 0;
          for (std::size_t iz = ez[z]; iz < ez[z + 1]; ++iz)
            for (std::size_t iy = ey[y]; iy < ey[y + 1]; ++iy)
              for (std::size_t ix = ex[xx]; ix < ex[xx + 1]; ++ix, ++cnt)
                owner[bc * in.plane() + (iz * in.h + iy) * in.w + ix] = o;
          inv[o] = 1.0 / static_cast<double>(cnt);
        }
  auto xv = x.data();
  std::vector<double> out(inv.size(), 0.0);
  for (std::size_t i = 0; i < owner.size(); ++i) out[owner[i]] += xv[i];
  for (std::size_t o = 0; o < out.size(); ++o) out[o] *= inv[o];
  return make_result("adaptive-avg-pool", {in.b, in.c, od, oh, ow}, std::move(out), {x},
                     [owner = std::move(owner), inv = std::move(inv)](const Node&, std::span<const double> g,
                                                                       GradSlots& gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < owner.size(); ++i) (*gin[0])[i] += g[owner[i]] * inv[owner[i]];
                     });
}

}  // namespace maskseg
