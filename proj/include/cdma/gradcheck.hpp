#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "cdma/graph.hpp"

namespace cdma {

/// Builds a scalar loss node from an input node in the given graph.
using ScalarFn64 = std::function<int(Graph64&, int)>;

/// Central finite-difference check of a scalar-valued tensor function at x.
/// Returns the max over elements of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Run in 64-bit mode; step eps defaults to 1e-4.
inline double grad_check(const ScalarFn64& f, const Tensor64& x,
                         double eps = 1e-4) {
  check(x.all_finite(), "grad_check: input must be finite");

  Tensor64 xg = x;
  xg.requires_grad = true;
  Graph64 g;
  int xid = g.leaf(xg);
  int loss = f(g, xid);
  check(g.value(loss).numel() == 1, "grad_check: f must be scalar-valued");
  g.backward(loss);
  Tensor64 analytic = g.grad(xid);

  auto eval = [&](const Tensor64& xv) {
    Graph64 ge;
    int id = ge.leaf(xv);
    return static_cast<double>(ge.value(f(ge, id))[0]);
  };

  double max_err = 0;
  Tensor64 xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double orig = xp[i];
    xp[i] = orig + eps;
    double fp = eval(xp);
    xp[i] = orig - eps;
    double fm = eval(xp);
    xp[i] = orig;
    double numeric = (fp - fm) / (2 * eps);
    double a = analytic[i];
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    max_err = std::max(max_err, std::fabs(a - numeric) / denom);
  }
  return max_err;
}

/// Fills a tensor with uniform values in [lo, hi).
inline Tensor64 random_tensor64(std::vector<int> shape, Rng& rng,
                                double lo = -1.0, double hi = 1.0) {
  Tensor64 t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace cdma
