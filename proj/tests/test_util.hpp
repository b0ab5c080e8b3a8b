#pragma once

#include <random>

#include "maskseg/module.hpp"
#include "maskseg/ops.hpp"

namespace maskseg::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// sum(t * r) for a fixed random r, so the scalar has a non-degenerate gradient.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor r = random_tensor(t.shape(), rng);
  return sum(mul(t, r));
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

/// Overwrites every parameter with U(-s, s).
inline void randomize(const Module& m, Rng& rng, double s = 0.5) {
  std::uniform_real_distribution<double> dist(-s, s);
  for (auto& [name, t] : m.named_parameters())
    for (auto& v : Tensor(t).data()) v = dist(rng);
}

}  // namespace maskseg::testing
