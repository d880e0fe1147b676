#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hici/autograd.hpp"
#include "hici/tensor.hpp"

namespace hici {

// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate of p.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& p, double h = 1e-5) {
  Tensor grad(p.shape());
  Tensor probe = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Same, but perturbs `p` in place so closures that reference it see the probe.
// The tensor is restored bit-exactly before returning.
inline Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& p, double h = 1e-5) {
  Tensor grad(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = f();
    p[i] = orig - h;
    const double down = f();
    p[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Tensor-wise relative error: max_i |a_i - b_i| / max(max|a|, max|b|).
// Both exactly zero counts as agreement.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  const double scale = std::max(max_abs(analytic), max_abs(numeric));
  const double diff = max_abs_diff(analytic, numeric);
  if (scale == 0.0) return 0.0;
  return diff / scale;
}

struct TensorGradError {
  std::string name;
  double rel_error;
};

// Reverse-mode gradients of `loss` against central differences for every
// named tensor. `loss` builds a fresh graph from the current values.
inline std::vector<TensorGradError> gradcheck_all(const std::vector<std::pair<std::string, Tensor*>>& params,
                                                  const std::function<Var(Graph&)>& loss, double h = 1e-5) {
  Graph g;
  const Gradients grads = g.backward(loss(g));
  std::vector<TensorGradError> out;
  for (const auto& [name, t] : params) {
    const Tensor numeric = finite_diff_grad_inplace(
        [&] {
          Graph probe;
          return loss(probe).value()[0];
        },
        *t, h);
    out.push_back({name, relative_error(grads.of(*t), numeric)});
  }
  return out;
}

}  // namespace hici
