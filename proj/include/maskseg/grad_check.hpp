#pragma once

#include <functional>
#include <string>
#include <vector>

#include "maskseg/tensor.hpp"

namespace maskseg {

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;  // |a - n| / max(|a|, |n|, 1e-6); the floor absorbs roundoff on ~0 gradients
  double max_rel_error = 0.0;
  bool finite = true;
  bool passed = false;
  std::string message;
};

/// One checked element: tensor index into the probed list and flat element index.
struct ProbeSite {
  std::size_t tensor = 0;
  std::size_t element = 0;
};

/// Compares tape gradients of the scalar `loss_fn()` with respect to `probes`
/// against central differences. Every element is probed unless `sites` is
/// non-empty.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> probes, double h = 1e-5,
                           double tol = 1e-4, std::vector<ProbeSite> sites = {});

/// Convenience form for f(x).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5,
                           double tol = 1e-4);

}  // namespace maskseg
