#pragma once

#include <functional>

#include "atx/ops.hpp"

namespace atx {

// Compares reverse-mode gradients of a scalar function against central finite
// differences. Returns max_i |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-4) {
  Tensor leaf = x.tracked();
  Tensor y = f(leaf);
  if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  if (!std::isfinite(y.item())) throw NonFiniteError("grad_check: non-finite function value");
  std::vector<double> analytic(x.size(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    auto g = leaf.grad();
    analytic.assign(g.begin(), g.end());
  }

  double worst = 0.0;
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig - step;
    const double fm = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFiniteError("grad_check: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace atx
