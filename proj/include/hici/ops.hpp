#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "hici/flops.hpp"
#include "hici/tensor.hpp"

// Forward numerical kernels on plain tensors. The differentiable wrappers in
// autograd.hpp call these; reductions run in fixed row-major order.
namespace hici::ops {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw dimension_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " * " +
                          shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* br = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  record_flops(2ull * m * k * n);
  return out;
}

// a · b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw dimension_error("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " * " +
                          shape_str(b.shape()) + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
      out(i, j) = s;
    }
  record_flops(2ull * m * k * n);
  return out;
}

// a^T · b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows())
    throw dimension_error("matmul_tn: inner dimensions disagree, " + shape_str(a.shape()) + "^T * " +
                          shape_str(b.shape()));
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      double* o = &out(i, 0);
      const double* br = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  record_flops(2ull * m * k * n);
  return out;
}

// Row softmax with max subtraction. Where `visible` is given, entry (i, j) takes
// part only if visible[i * cols + j]; hidden entries get probability 0.
inline Tensor softmax_rows(const Tensor& a, const std::vector<bool>* visible = nullptr) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!visible || (*visible)[i * n + j]) mx = std::max(mx, a(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (visible && !(*visible)[i * n + j]) continue;
      const double e = std::exp(a(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= sum;
  }
  return out;
}

struct LayerNormCache {
  Tensor normalized;              // (x - mean) * rstd
  std::vector<double> inv_std;    // one per row
};

inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps,
                         LayerNormCache* cache = nullptr) {
  require_matrix(a, "layer_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.size() != n || bias.size() != n)
    throw dimension_error("layer_norm: affine shapes " + shape_str(gain.shape()) + ", " +
                          shape_str(bias.shape()) + " do not match width " + std::to_string(n));
  Tensor xhat({m, n});
  std::vector<double> rstd(m);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += a(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (a(i, j) - mean) * (a(i, j) - mean);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (a(i, j) - mean) * rstd[i];
      out(i, j) = xhat(i, j) * gain[j] + bias[j];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return out;
}

struct ColumnStats {
  Tensor mean, max, min, std;  // each 1×d
  std::vector<std::size_t> argmax, argmin;
};

// Column statistics over the rows of a; std is the population form (divisor r).
inline ColumnStats reduce_stats(const Tensor& a) {
  require_matrix(a, "reduce_stats");
  const std::size_t r = a.rows(), d = a.cols();
  if (r == 0) throw dimension_error("reduce_stats: need at least one row");
  ColumnStats s{Tensor({1, d}), Tensor({1, d}), Tensor({1, d}), Tensor({1, d}),
                std::vector<std::size_t>(d, 0), std::vector<std::size_t>(d, 0)};
  for (std::size_t j = 0; j < d; ++j) {
    s.max[j] = s.min[j] = a(0, j);
  }
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double v = a(i, j);
      s.mean[j] += v;
      if (v > s.max[j]) s.max[j] = v, s.argmax[j] = i;
      if (v < s.min[j]) s.min[j] = v, s.argmin[j] = i;
    }
  for (std::size_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = a(i, j) - s.mean[j];
      s.std[j] += c * c;
    }
  for (std::size_t j = 0; j < d; ++j) s.std[j] = std::sqrt(s.std[j] / static_cast<double>(r));
  return s;
}

inline constexpr double kL2Eps = 1e-12;

inline Tensor l2_normalize(const Tensor& v, double eps = kL2Eps) {
  double sq = 0.0;
  for (double x : v.data()) sq += x * x;
  const double denom = std::max(std::sqrt(sq), eps);
  Tensor out = v;
  if (sq == 0.0) return out;
  for (double& x : out.data()) x /= denom;
  return out;
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace hici::ops
