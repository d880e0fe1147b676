#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hici/ops.hpp"
#include "hici/tensor.hpp"

namespace hici {

class Graph;

// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Gradients keyed by parameter identity (the address of the parameter tensor).
class Gradients {
 public:
  void accumulate(const Tensor* param, const Tensor& g) {
    auto [it, inserted] = grads_.try_emplace(param, g);
    if (!inserted)
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
  }

  // Zero tensor of the parameter's shape when it did not take part in the loss.
  Tensor of(const Tensor& param) const {
    auto it = grads_.find(&param);
    return it == grads_.end() ? Tensor(param.shape()) : it->second;
  }

  bool contains(const Tensor& param) const { return grads_.count(&param) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  std::map<const Tensor*, Tensor> grads_;
};

// Tape of one forward evaluation. Nodes are appended in evaluation order, so
// reverse creation order is a valid topological order for the backward sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), nullptr); }

  // Leaf for a learnable tensor. The same tensor registered twice maps to one node.
  Var param(const Tensor& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Var v = push(p, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  Var record(Tensor value, BackwardFn fn) { return push(std::move(value), std::move(fn)); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  void add_grad(Var v, const Tensor& g) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0 && n.value.size() != 0) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  std::size_t size() const { return nodes_.size(); }

  Gradients backward(Var loss) {
    if (consumed_) throw usage_error("backward: graph already consumed; run a new forward pass first");
    if (loss.graph != this) throw usage_error("backward: loss belongs to a different graph");
    if (value(loss.id).size() != 1)
      throw usage_error("backward: loss must be a scalar, got " + shape_str(value(loss.id).shape()));
    consumed_ = true;
    nodes_[loss.id].grad = Tensor(value(loss.id).shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) {
        // Move the closure out so it may append gradients to earlier nodes freely.
        BackwardFn fn = std::move(n.backward);
        Tensor g = std::move(n.grad);
        fn(*this, g);
        nodes_[i].grad = std::move(g);
      }
    }
    Gradients out;
    for (const auto& [param, id] : param_nodes_) {
      const Node& n = nodes_[id];
      out.accumulate(param, n.grad.size() ? n.grad : Tensor(n.value.shape()));
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    const Tensor* param = nullptr;
  };

  Var push(Tensor value, BackwardFn fn) {
    nodes_.push_back({std::move(value), Tensor(), std::move(fn), nullptr});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<const Tensor*, std::size_t> param_nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace ag {

namespace detail {
inline Graph& same_graph(Var a, Var b, const char* what) {
  if (a.graph != b.graph) throw usage_error(std::string(what) + ": operands from different graphs");
  return *a.graph;
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "matmul");
  return g.record(ops::matmul(a.value(), b.value()), [a, b](Graph& g, const Tensor& dy) {
    g.add_grad(a, ops::matmul_nt(dy, b.value()));
    g.add_grad(b, ops::matmul_tn(a.value(), dy));
  });
}

// a · b^T
inline Var matmul_nt(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "matmul_nt");
  return g.record(ops::matmul_nt(a.value(), b.value()), [a, b](Graph& g, const Tensor& dy) {
    g.add_grad(a, ops::matmul(dy, b.value()));
    g.add_grad(b, ops::matmul_tn(dy, a.value()));
  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "add");
  if (a.shape() != b.shape())
    throw dimension_error("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return g.record(std::move(out), [a, b](Graph& g, const Tensor& dy) {
    g.add_grad(a, dy);
    g.add_grad(b, dy);
  });
}

// m (r×c) + row (c) broadcast over rows.
inline Var add_row(Var m, Var row) {
  Graph& g = detail::same_graph(m, row, "add_row");
  const Tensor& mv = m.value();
  if (row.value().size() != mv.cols())
    throw dimension_error("add_row: " + shape_str(mv.shape()) + " + " + shape_str(row.shape()));
  Tensor out = mv;
  for (std::size_t i = 0; i < mv.rows(); ++i)
    for (std::size_t j = 0; j < mv.cols(); ++j) out(i, j) += row.value()[j];
  return g.record(std::move(out), [m, row](Graph& g, const Tensor& dy) {
    g.add_grad(m, dy);
    Tensor dr(row.shape());
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) dr[j] += dy(i, j);
    g.add_grad(row, dr);
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.graph->record(std::move(out), [a, s](Graph& g, const Tensor& dy) {
    Tensor da = dy;
    for (double& v : da.data()) v *= s;
    g.add_grad(a, da);
  });
}

// a scaled by the single value held in s.
inline Var scale_by(Var a, Var s) {
  Graph& g = detail::same_graph(a, s, "scale_by");
  if (s.value().size() != 1) throw dimension_error("scale_by: scale must hold one value, got " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.data()) v *= sv;
  return g.record(std::move(out), [a, s](Graph& g, const Tensor& dy) {
    const double sv = s.value()[0];
    Tensor da = dy;
    double ds = 0.0;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      da[i] *= sv;
      ds += dy[i] * a.value()[i];
    }
    g.add_grad(a, da);
    g.add_grad(s, Tensor(s.shape(), ds));
  });
}

inline Var hadamard(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "hadamard");
  if (a.shape() != b.shape())
    throw dimension_error("hadamard: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return g.record(std::move(out), [a, b](Graph& g, const Tensor& dy) {
    Tensor da = dy, db = dy;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      da[i] *= b.value()[i];
      db[i] *= a.value()[i];
    }
    g.add_grad(a, da);
    g.add_grad(b, db);
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->record(Tensor({1}, s), [a](Graph& g, const Tensor& dy) { g.add_grad(a, Tensor(a.shape(), dy[0])); });
}

inline Var softmax_rows(Var a, std::shared_ptr<const std::vector<bool>> visible = nullptr) {
  Tensor p = ops::softmax_rows(a.value(), visible.get());
  return a.graph->record(std::move(p), [a, visible](Graph& g, const Tensor& dy) {
    // recompute rather than capture the output to keep nodes independent
    const Tensor p = ops::softmax_rows(a.value(), visible.get());
    Tensor da(p.shape());
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) dot += dy(i, j) * p(i, j);
      for (std::size_t j = 0; j < p.cols(); ++j) da(i, j) = p(i, j) * (dy(i, j) - dot);
    }
    g.add_grad(a, da);
  });
}

inline Var layer_norm(Var a, Var gain, Var bias, double eps) {
  Graph& g = detail::same_graph(a, gain, "layer_norm");
  auto cache = std::make_shared<ops::LayerNormCache>();
  Tensor out = ops::layer_norm(a.value(), gain.value(), bias.value(), eps, cache.get());
  return g.record(std::move(out), [a, gain, bias, cache](Graph& g, const Tensor& dy) {
    const Tensor& xhat = cache->normalized;
    const std::size_t m = xhat.rows(), n = xhat.cols();
    Tensor da(xhat.shape()), dgain(gain.shape()), dbias(bias.shape());
    for (std::size_t i = 0; i < m; ++i) {
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double dxh = dy(i, j) * gain.value()[j];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat(i, j);
        dgain[j] += dy(i, j) * xhat(i, j);
        dbias[j] += dy(i, j);
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double dxh = dy(i, j) * gain.value()[j];
        da(i, j) = cache->inv_std[i] * (dxh - inv_n * sum_dxhat - xhat(i, j) * inv_n * sum_dxhat_xhat);
      }
    }
    g.add_grad(a, da);
    g.add_grad(gain, dgain);
    g.add_grad(bias, dbias);
  });
}

struct StatVars {
  Var mean, max, min, std;
};

// Column mean/max/min/population-std over the rows of a, each 1×d.
inline StatVars reduce_stats(Var a) {
  auto s = std::make_shared<ops::ColumnStats>(ops::reduce_stats(a.value()));
  Graph& g = *a.graph;
  const double r = static_cast<double>(a.rows());
  Var mean = g.record(s->mean, [a, r](Graph& g, const Tensor& dy) {
    Tensor da(a.shape());
    for (std::size_t i = 0; i < da.rows(); ++i)
      for (std::size_t j = 0; j < da.cols(); ++j) da(i, j) = dy[j] / r;
    g.add_grad(a, da);
  });
  auto pick = [&](const std::vector<std::size_t>& idx) {
    return [a, idx](Graph& g, const Tensor& dy) {
      Tensor da(a.shape());
      for (std::size_t j = 0; j < idx.size(); ++j) da(idx[j], j) += dy[j];
      g.add_grad(a, da);
    };
  };
  Var mx = g.record(s->max, pick(s->argmax));
  Var mn = g.record(s->min, pick(s->argmin));
  Var sd = g.record(s->std, [a, s, r](Graph& g, const Tensor& dy) {
    // d sigma_j / d x_ij = (x_ij - mu_j) / (r sigma_j); zero where sigma_j == 0
    Tensor da(a.shape());
    for (std::size_t i = 0; i < da.rows(); ++i)
      for (std::size_t j = 0; j < da.cols(); ++j) {
        const double sd = s->std[j];
        if (sd > 0.0) da(i, j) = dy[j] * (a.value()(i, j) - s->mean[j]) / (r * sd);
      }
    g.add_grad(a, da);
  });
  return {mean, mx, mn, sd};
}

inline Var l2_normalize(Var v, double eps = ops::kL2Eps) {
  Tensor out = ops::l2_normalize(v.value(), eps);
  return v.graph->record(std::move(out), [v, eps](Graph& g, const Tensor& dy) {
    const Tensor& x = v.value();
    double sq = 0.0;
    for (double e : x.data()) sq += e * e;
    const double norm = std::sqrt(sq);
    Tensor dx(x.shape());
    if (norm < eps) {
      // constant divisor branch (includes the zero vector)
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] = sq == 0.0 ? 0.0 : dy[i] / eps;
    } else {
      double dot = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) dot += dy[i] * x[i];
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] / norm - x[i] * dot / (norm * norm * norm);
    }
    g.add_grad(v, dx);
  });
}

inline Var softplus(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = ops::softplus(v);
  return x.graph->record(std::move(out), [x](Graph& g, const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= ops::sigmoid(x.value()[i]);
    g.add_grad(x, dx);
  });
}

// tanh approximation of GELU
inline Var gelu(Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out = x.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  return x.graph->record(std::move(out), [x](Graph& g, const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double v = x.value()[i];
      const double u = c * (v + 0.044715 * v * v * v);
      const double t = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
      dx[i] *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }
    g.add_grad(x, dx);
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  return a.graph->record(hici::slice_rows(a.value(), begin, end), [a, begin](Graph& g, const Tensor& dy) {
    Tensor da(a.shape());
    std::copy(dy.data().begin(), dy.data().end(), da.data().begin() + static_cast<std::ptrdiff_t>(begin * da.cols()));
    g.add_grad(a, da);
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  require_matrix(av, "slice_cols");
  if (begin > end || end > av.cols())
    throw dimension_error("slice_cols: range outside " + shape_str(av.shape()));
  Tensor out({av.rows(), end - begin});
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = av(i, j);
  return a.graph->record(std::move(out), [a, begin](Graph& g, const Tensor& dy) {
    Tensor da(a.shape());
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) da(i, begin + j) = dy(i, j);
    g.add_grad(a, da);
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw dimension_error("concat_rows: nothing to concatenate");
  Graph& g = *parts.front().graph;
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c)
      throw dimension_error("concat_rows: width " + std::to_string(p.cols()) + " vs " + std::to_string(c));
    r += p.rows();
  }
  std::vector<double> d;
  d.reserve(r * c);
  for (const Var& p : parts) d.insert(d.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> keep(parts.begin(), parts.end());
  return g.record(Tensor({r, c}, std::move(d)), [keep](Graph& g, const Tensor& dy) {
    std::size_t off = 0;
    for (const Var& p : keep) {
      const std::size_t n = p.value().size();
      Tensor dp(p.shape());
      std::copy(dy.data().begin() + static_cast<std::ptrdiff_t>(off),
                dy.data().begin() + static_cast<std::ptrdiff_t>(off + n), dp.data().begin());
      g.add_grad(p, dp);
      off += n;
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw dimension_error("concat_cols: nothing to concatenate");
  Graph& g = *parts.front().graph;
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r)
      throw dimension_error("concat_cols: height " + std::to_string(p.rows()) + " vs " + std::to_string(r));
    c += p.cols();
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return g.record(std::move(out), [keep](Graph& g, const Tensor& dy) {
    std::size_t off = 0;
    for (const Var& p : keep) {
      Tensor dp(p.shape());
      for (std::size_t i = 0; i < dp.rows(); ++i)
        for (std::size_t j = 0; j < dp.cols(); ++j) dp(i, j) = dy(i, off + j);
      g.add_grad(p, dp);
      off += p.cols();
    }
  });
}

// Rows of `table` selected by ids.
inline Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& t = table.value();
  Tensor out({ids.size(), t.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= t.rows())
      throw dimension_error("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(t.rows()) + " rows");
    std::copy_n(t.row(static_cast<std::size_t>(ids[i])).begin(), t.cols(), out.row(i).begin());
  }
  std::vector<int> keep(ids.begin(), ids.end());
  return table.graph->record(std::move(out), [table, keep](Graph& g, const Tensor& dy) {
    Tensor dt(table.shape());
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t j = 0; j < dt.cols(); ++j) dt(static_cast<std::size_t>(keep[i]), j) += dy(i, j);
    g.add_grad(table, dt);
  });
}

// Per-row negative log-likelihood of targets under softmax(logits); rows with
// a negative target are skipped. Returns the sum (1 value) over scored rows.
inline Var cross_entropy_sum(Var logits, std::span<const int> targets) {
  const Tensor& z = logits.value();
  if (targets.size() != z.rows())
    throw dimension_error("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                          std::to_string(z.rows()) + " rows");
  const Tensor p = ops::softmax_rows(z);
  double nll = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (targets[i] < 0) continue;
    const auto t = static_cast<std::size_t>(targets[i]);
    if (t >= z.cols()) throw dimension_error("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    double mx = z(i, 0);
    for (std::size_t j = 1; j < z.cols(); ++j) mx = std::max(mx, z(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) s += std::exp(z(i, j) - mx);
    nll += mx + std::log(s) - z(i, t);
  }
  std::vector<int> keep(targets.begin(), targets.end());
  return logits.graph->record(Tensor({1}, nll), [logits, keep, p](Graph& g, const Tensor& dy) {
    Tensor dz(p.shape());
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      if (keep[i] < 0) continue;
      for (std::size_t j = 0; j < dz.cols(); ++j) dz(i, j) = dy[0] * p(i, j);
      dz(i, static_cast<std::size_t>(keep[i])) -= dy[0];
    }
    g.add_grad(logits, dz);
  });
}

}  // namespace ag
}  // namespace hici
