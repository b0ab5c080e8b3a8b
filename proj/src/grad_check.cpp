#include "maskseg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace maskseg {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> probes, double h, double tol,
                           std::vector<ProbeSite> sites) {
  GradCheckReport rep;
  if (sites.empty()) {
    for (std::size_t t = 0; t < probes.size(); ++t)
      for (std::size_t i = 0; i < probes[t].numel(); ++i) sites.push_back({t, i});
  }
  std::vector<bool> saved_flag;
  for (auto& p : probes) {
    saved_flag.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }

  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) {
    rep.finite = false;
    rep.message = "loss is not finite at the probe point";
  } else {
    backward(loss);
  }

  for (const auto& s : sites) {
    Tensor& p = probes.at(s.tensor);
    auto v = p.data();
    const double orig = v[s.element];
    double fp = 0.0, fm = 0.0;
    {
      NoGradGuard ng;
      v[s.element] = orig + h;
      fp = loss_fn().item();
      v[s.element] = orig - h;
      fm = loss_fn().item();
      v[s.element] = orig;
    }
    const double num = (fp - fm) / (2.0 * h);
    const double ana = rep.finite ? p.grad()[s.element] : 0.0;
    rep.analytic.push_back(ana);
    rep.numeric.push_back(num);
    if (!std::isfinite(num) || !std::isfinite(ana)) {
      if (rep.finite) {
        std::ostringstream os;
        os << "non-finite value at tensor " << s.tensor << " element " << s.element;
        rep.message = os.str();
      }
      rep.finite = false;
      rep.rel_error.push_back(INFINITY);
      continue;
    }
    const double denom = std::max({std::fabs(ana), std::fabs(num), 1e-6});
    const double rel = std::fabs(ana - num) / denom;
    rep.rel_error.push_back(rel);
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
  }
  for (std::size_t t = 0; t < probes.size(); ++t) probes[t].set_requires_grad(saved_flag[t]);
  if (!rep.finite) rep.max_rel_error = INFINITY;
  rep.passed = rep.finite && rep.max_rel_error < tol;
  if (rep.message.empty()) {
    std::ostringstream os;
    os << "max relative error " << rep.max_rel_error << " over " << sites.size() << " elements";
    rep.message = os.str();
  }
  return rep;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h, double tol) {
  return grad_check([&] { return f(x); }, {x}, h, tol);
}

}  // namespace maskseg
