#pragma once

// Reverse-mode automatic differentiation on Tensor<T>.
//
// A forward pass builds a DAG of Node<T>; backward(root) walks it once in
// reverse topological order and returns a GradStore mapping nodes to
// gradients. Gradients live in the store, not on the nodes, so concurrent
// forward/backward passes over shared (read-only) parameters are safe:
// each training sample gets its own graph and its own store, and the
// optimizer folds the stores together in sample order.
//
// Everything is templated on the scalar type; training runs float, the
// finite-difference gradient harness instantiates double.

#include "kad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace kad::ad {

template <typename T>
class GradStore;

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(const Tensor<T>&, GradStore<T>&)> backward;
  bool requires_grad = false;
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Whether newly created ops record backward closures. Off for inference.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  NoGrad() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGrad() { grad_enabled() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

private:
  bool prev_;
};

template <typename T>
class Var {
public:
  Var() = default;
  explicit Var(NodePtr<T> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }

  static Var leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const NodePtr<T>& node() const { return node_; }

  // Scalar convenience for [1]- or [1,1]-shaped results.
  T item() const {
    if (node_->value.numel() != 1) {
      throw std::logic_error("Var::item on non-scalar " + node_->value.shape_str());
    }
    return node_->value[0];
  }

private:
  NodePtr<T> node_;
};

template <typename T>
class GradStore {
public:
  // Zero-initialized gradient buffer for a node, created on first touch.
  Tensor<T>& buffer(const NodePtr<T>& n) {
    auto it = grads_.find(n.get());
    if (it == grads_.end()) {
      it = grads_.emplace(n.get(), n->value.zeros_like()).first;
    }
    return it->second;
  }

  const Tensor<T>* find(const NodePtr<T>& n) const {
    auto it = grads_.find(n.get());
    return it == grads_.end() ? nullptr : &it->second;
  }

  const Tensor<T>& grad(const Var<T>& v) const {
    const Tensor<T>* g = find(v.node());
    if (!g) throw std::logic_error("GradStore: no gradient recorded for node");
    return *g;
  }

  bool has(const Var<T>& v) const { return find(v.node()) != nullptr; }

private:
  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

namespace detail {

template <typename T>
std::vector<NodePtr<T>> topo_order(const NodePtr<T>& root) {
  std::vector<NodePtr<T>> order;
  std::unordered_set<const Node<T>*> seen;
  // Iterative post-order DFS; graphs can be a few thousand nodes deep.
  std::vector<std::pair<NodePtr<T>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr<T> p = node->parents[next++];
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children; iterate in reverse for backprop
}

}  // namespace detail

// Backpropagate from a scalar root. Returns gradients for every
// requires_grad node reachable from it.
template <typename T>
GradStore<T> backward(const Var<T>& root) {
  if (!root.requires_grad()) {
    throw std::logic_error("backward: root does not require grad");
  }
  if (root.value().numel() != 1) {
    throw std::logic_error("backward: root must be scalar, got " +
                           root.value().shape_str());
  }
  GradStore<T> gs;
  gs.buffer(root.node())[0] = T(1);
  auto order = detail::topo_order(root.node());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr<T>& n = *it;
    if (!n->backward) continue;
    const Tensor<T>* g = gs.find(n);
    if (!g) continue;  // no downstream contribution
    n->backward(*g, gs);
  }
  return gs;
}

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> parents,
               std::function<void(const Tensor<T>&, GradStore<T>&)> bwd) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (rg && grad_enabled()) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(bwd);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  axpy(b.value(), out);
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      std::move(out), {pa, pb}, [pa, pb](const Tensor<T>& g, GradStore<T>& gs) {
        if (pa->requires_grad) axpy(g, gs.buffer(pa));
        if (pb->requires_grad) axpy(g, gs.buffer(pb));
      });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  axpy(b.value(), out, T(-1));
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      std::move(out), {pa, pb}, [pa, pb](const Tensor<T>& g, GradStore<T>& gs) {
        if (pa->requires_grad) axpy(g, gs.buffer(pa));
        if (pb->requires_grad) axpy(g, gs.buffer(pb), T(-1));
      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value().zeros_like();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      std::move(out), {pa, pb}, [pa, pb](const Tensor<T>& g, GradStore<T>& gs) {
        const std::int64_t n = g.numel();
        if (pa->requires_grad) {
          Tensor<T>& da = gs.buffer(pa);
          for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * pb->value[i];
        }
        if (pb->requires_grad) {
          Tensor<T>& db = gs.buffer(pb);
          for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * pa->value[i];
        }
      });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, c](const Tensor<T>& g, GradStore<T>& gs) {
                              axpy(g, gs.buffer(pa), c);
                            });
}

// X [m,n] + row vector b [n] broadcast over rows.
template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& b) {
  const int m = x.value().rows(), n = x.value().cols();
  if (b.value().numel() != n) {
    throw std::invalid_argument("add_rows: bias length mismatch");
  }
  Tensor<T> out = x.value();
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) out[static_cast<std::int64_t>(r) * n + c] += b.value()[c];
  }
  auto px = x.node(), pb = b.node();
  return detail::make_op<T>(
      std::move(out), {px, pb}, [px, pb, m, n](const Tensor<T>& g, GradStore<T>& gs) {
        if (px->requires_grad) axpy(g, gs.buffer(px));
        if (pb->requires_grad) {
          Tensor<T>& db = gs.buffer(pb);
          for (int r = 0; r < m; ++r) {
            for (int c = 0; c < n; ++c) db[c] += g[static_cast<std::int64_t>(r) * n + c];
          }
        }
      });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out;
  gemm(a.value(), b.value(), out);
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      std::move(out), {pa, pb}, [pa, pb](const Tensor<T>& g, GradStore<T>& gs) {
        if (pa->requires_grad) {
          Tensor<T> da;
          gemm_nt(g, pb->value, da);
          axpy(da, gs.buffer(pa));
        }
        if (pb->requires_grad) {
          Tensor<T> db;
          gemm_tn(pa->value, g, db);
          axpy(db, gs.buffer(pb));
        }
      });
}

// a * b^T without materializing the transpose (attention scores).
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out;
  gemm_nt(a.value(), b.value(), out);
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      std::move(out), {pa, pb}, [pa, pb](const Tensor<T>& g, GradStore<T>& gs) {
        if (pa->requires_grad) {
          Tensor<T> da;
          gemm(g, pb->value, da);
          axpy(da, gs.buffer(pa));
        }
        if (pb->requires_grad) {
          Tensor<T> db;
          gemm_tn(g, pa->value, db);
          axpy(db, gs.buffer(pb));
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], T(0));
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (std::int64_t i = 0; i < g.numel(); ++i) {
                                if (pa->value[i] > T(0)) da[i] += g[i];
                              }
                            });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value().zeros_like();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = sigmoid_scalar(a.value()[i]);
  auto pa = a.node();
  Tensor<T> saved = out;
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, saved](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (std::int64_t i = 0; i < g.numel(); ++i) {
                                const T y = saved[i];
                                da[i] += g[i] * y * (T(1) - y);
                              }
                            });
}

// Clamp with zero gradient outside the open interval.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(std::max(out[i], lo), hi);
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, lo, hi](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (std::int64_t i = 0; i < g.numel(); ++i) {
                                const T x = pa->value[i];
                                if (x > lo && x < hi) da[i] += g[i];
                              }
                            });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const int m = a.value().rows(), n = a.value().cols();
  Tensor<T> out({m, n});
  for (int r = 0; r < m; ++r) {
    const T* row = a.value().data() + static_cast<std::int64_t>(r) * n;
    T mx = row[0];
    for (int c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    T sum = T(0);
    T* orow = out.data() + static_cast<std::int64_t>(r) * n;
    for (int c = 0; c < n; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (int c = 0; c < n; ++c) orow[c] /= sum;
  }
  auto pa = a.node();
  Tensor<T> saved = out;
  return detail::make_op<T>(
      std::move(out), {pa}, [pa, saved, m, n](const Tensor<T>& g, GradStore<T>& gs) {
        Tensor<T>& da = gs.buffer(pa);
        for (int r = 0; r < m; ++r) {
          const std::int64_t off = static_cast<std::int64_t>(r) * n;
          T dot = T(0);
          for (int c = 0; c < n; ++c) dot += g[off + c] * saved[off + c];
          for (int c = 0; c < n; ++c) da[off + c] += saved[off + c] * (g[off + c] - dot);
        }
      });
}

// Per-row layer norm with learned gain/bias of length n.
template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                       T eps = T(1e-5)) {
  const int m = x.value().rows(), n = x.value().cols();
  if (gain.value().numel() != n || bias.value().numel() != n) {
    throw std::invalid_argument("layer_norm_rows: gain/bias length mismatch");
  }
  Tensor<T> out({m, n});
  Tensor<T> xhat({m, n});
  Tensor<T> inv_sigma({m});
  for (int r = 0; r < m; ++r) {
    const std::int64_t off = static_cast<std::int64_t>(r) * n;
    T mean = T(0);
    for (int c = 0; c < n; ++c) mean += x.value()[off + c];
    mean /= T(n);
    T var = T(0);
    for (int c = 0; c < n; ++c) {
      const T d = x.value()[off + c] - mean;
      var += d * d;
    }
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (int c = 0; c < n; ++c) {
      xhat[off + c] = (x.value()[off + c] - mean) * is;
      out[off + c] = xhat[off + c] * gain.value()[c] + bias.value()[c];
    }
  }
  auto px = x.node(), pg = gain.node(), pb = bias.node();
  return detail::make_op<T>(
      std::move(out), {px, pg, pb},
      [px, pg, pb, xhat, inv_sigma, m, n](const Tensor<T>& g, GradStore<T>& gs) {
        if (pg->requires_grad) {
          Tensor<T>& dg = gs.buffer(pg);
          for (int r = 0; r < m; ++r) {
            const std::int64_t off = static_cast<std::int64_t>(r) * n;
            for (int c = 0; c < n; ++c) dg[c] += g[off + c] * xhat[off + c];
          }
        }
        if (pb->requires_grad) {
          Tensor<T>& db = gs.buffer(pb);
          for (int r = 0; r < m; ++r) {
            const std::int64_t off = static_cast<std::int64_t>(r) * n;
            for (int c = 0; c < n; ++c) db[c] += g[off + c];
          }
        }
        if (px->requires_grad) {
          Tensor<T>& dx = gs.buffer(px);
          for (int r = 0; r < m; ++r) {
            const std::int64_t off = static_cast<std::int64_t>(r) * n;
            T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
            for (int c = 0; c < n; ++c) {
              const T dxhat = g[off + c] * pg->value[c];
              mean_dxhat += dxhat;
              mean_dxhat_xhat += dxhat * xhat[off + c];
            }
            mean_dxhat /= T(n);
            mean_dxhat_xhat /= T(n);
            for (int c = 0; c < n; ++c) {
              const T dxhat = g[off + c] * pg->value[c];
              dx[off + c] +=
                  inv_sigma[r] * (dxhat - mean_dxhat - xhat[off + c] * mean_dxhat_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = T(0);
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
  auto pa = a.node();
  return detail::make_op<T>(Tensor<T>({1}, {s}), {pa},
                            [pa](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g[0];
                            });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

// Column-wise mean over rows: [m,n] -> [1,n].
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  const int m = a.value().rows(), n = a.value().cols();
  Tensor<T> out({1, n});
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) out[c] += a.value()[static_cast<std::int64_t>(r) * n + c];
  }
  for (int c = 0; c < n; ++c) out[c] /= static_cast<T>(m);
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, m, n](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (int r = 0; r < m; ++r) {
                                for (int c = 0; c < n; ++c) {
                                  da[static_cast<std::int64_t>(r) * n + c] += g[c] / static_cast<T>(m);
                                }
                              }
                            });
}

// Column-wise max over rows: [m,n] -> [1,n]. Ties route the gradient to the
// first maximal row.
template <typename T>
Var<T> max_rows(const Var<T>& a) {
  const int m = a.value().rows(), n = a.value().cols();
  Tensor<T> out({1, n});
  std::vector<int> argmax(n, 0);
  for (int c = 0; c < n; ++c) {
    T best = a.value()[c];
    for (int r = 1; r < m; ++r) {
      const T v = a.value()[static_cast<std::int64_t>(r) * n + c];
      if (v > best) {
        best = v;
        argmax[c] = r;
      }
    }
    out[c] = best;
  }
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, argmax, n](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (int c = 0; c < n; ++c) {
                                da[static_cast<std::int64_t>(argmax[c]) * n + c] += g[c];
                              }
                            });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, int r0, int count) {
  const int m = a.value().rows(), n = a.value().cols();
  if (r0 < 0 || count < 0 || r0 + count > m) {
    throw std::out_of_range("slice_rows: range out of bounds");
  }
  Tensor<T> out({count, n});
  std::copy_n(a.value().data() + static_cast<std::int64_t>(r0) * n,
              static_cast<std::int64_t>(count) * n, out.data());
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, r0, count, n](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (std::int64_t i = 0; i < static_cast<std::int64_t>(count) * n; ++i) {
                                da[static_cast<std::int64_t>(r0) * n + i] += g[i];
                              }
                            });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, int c0, int count) {
  const int m = a.value().rows(), n = a.value().cols();
  if (c0 < 0 || count < 0 || c0 + count > n) {
    throw std::out_of_range("slice_cols: range out of bounds");
  }
  Tensor<T> out({m, count});
  for (int r = 0; r < m; ++r) {
    std::copy_n(a.value().data() + static_cast<std::int64_t>(r) * n + c0, count,
                out.data() + static_cast<std::int64_t>(r) * count);
  }
  auto pa = a.node();
  return detail::make_op<T>(
      std::move(out), {pa}, [pa, c0, count, m, n](const Tensor<T>& g, GradStore<T>& gs) {
        Tensor<T>& da = gs.buffer(pa);
        for (int r = 0; r < m; ++r) {
          for (int c = 0; c < count; ++c) {
            da[static_cast<std::int64_t>(r) * n + c0 + c] +=
                g[static_cast<std::int64_t>(r) * count + c];
          }
        }
      });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0].value().rows();
  int n = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.value().cols();
  }
  Tensor<T> out({m, n});
  std::vector<NodePtr<T>> parents;
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p.value().cols();
    for (int r = 0; r < m; ++r) {
      std::copy_n(p.value().data() + static_cast<std::int64_t>(r) * pc, pc,
                  out.data() + static_cast<std::int64_t>(r) * n + off);
    }
    parents.push_back(p.node());
    offsets.push_back(off);
    off += pc;
  }
  auto parents_copy = parents;
  return detail::make_op<T>(
      std::move(out), std::move(parents),
      [parents_copy, offsets, m, n](const Tensor<T>& g, GradStore<T>& gs) {
        for (std::size_t k = 0; k < parents_copy.size(); ++k) {
          const auto& p = parents_copy[k];
          if (!p->requires_grad) continue;
          Tensor<T>& dp = gs.buffer(p);
          const int pc = dp.cols();
          for (int r = 0; r < m; ++r) {
            for (int c = 0; c < pc; ++c) {
              dp[static_cast<std::int64_t>(r) * pc + c] +=
                  g[static_cast<std::int64_t>(r) * n + offsets[k] + c];
            }
          }
        }
      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int n = parts[0].value().cols();
  int m = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != n) throw std::invalid_argument("concat_rows: col mismatch");
    m += p.value().rows();
  }
  Tensor<T> out({m, n});
  std::vector<NodePtr<T>> parents;
  std::vector<int> row_offsets;
  int off = 0;
  for (const auto& p : parts) {
    const int pr = p.value().rows();
    std::copy_n(p.value().data(), static_cast<std::int64_t>(pr) * n,
                out.data() + static_cast<std::int64_t>(off) * n);
    parents.push_back(p.node());
    row_offsets.push_back(off);
    off += pr;
  }
  auto parents_copy = parents;
  return detail::make_op<T>(
      std::move(out), std::move(parents),
      [parents_copy, row_offsets, n](const Tensor<T>& g, GradStore<T>& gs) {
        for (std::size_t k = 0; k < parents_copy.size(); ++k) {
          const auto& p = parents_copy[k];
          if (!p->requires_grad) continue;
          Tensor<T>& dp = gs.buffer(p);
          const std::int64_t count = dp.numel();
          const std::int64_t base = static_cast<std::int64_t>(row_offsets[k]) * n;
          for (std::int64_t i = 0; i < count; ++i) dp[i] += g[base + i];
        }
      });
}

// Rows scaled to unit L2 norm. Zero rows (norm <= eps) pass through.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
  const int m = a.value().rows(), n = a.value().cols();
  Tensor<T> out({m, n});
  Tensor<T> inv_norm({m});
  for (int r = 0; r < m; ++r) {
    const std::int64_t off = static_cast<std::int64_t>(r) * n;
    T s = T(0);
    for (int c = 0; c < n; ++c) s += a.value()[off + c] * a.value()[off + c];
    const T norm = std::sqrt(s);
    inv_norm[r] = norm > eps ? T(1) / norm : T(0);
    const T k = norm > eps ? inv_norm[r] : T(1);
    for (int c = 0; c < n; ++c) out[off + c] = a.value()[off + c] * k;
  }
  auto pa = a.node();
  Tensor<T> saved = out;
  return detail::make_op<T>(
      std::move(out), {pa}, [pa, saved, inv_norm, m, n](const Tensor<T>& g, GradStore<T>& gs) {
        Tensor<T>& da = gs.buffer(pa);
        for (int r = 0; r < m; ++r) {
          const std::int64_t off = static_cast<std::int64_t>(r) * n;
          if (inv_norm[r] == T(0)) {  // zero row passes through unscaled
            for (int c = 0; c < n; ++c) da[off + c] += g[off + c];
            continue;
          }
          T dot = T(0);
          for (int c = 0; c < n; ++c) dot += g[off + c] * saved[off + c];
          for (int c = 0; c < n; ++c) {
            da[off + c] += inv_norm[r] * (g[off + c] - saved[off + c] * dot);
          }
        }
      });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const int m = a.value().rows(), n = a.value().cols();
  Tensor<T> out({n, m});
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) out.at(c, r) = a.value().at(r, c);
  }
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa, m, n](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (int r = 0; r < m; ++r) {
                                for (int c = 0; c < n; ++c) da.at(r, c) += g.at(c, r);
                              }
                            });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  Tensor<T> out = a.value().reshaped(shape);
  auto pa = a.node();
  return detail::make_op<T>(std::move(out), {pa},
                            [pa](const Tensor<T>& g, GradStore<T>& gs) {
                              Tensor<T>& da = gs.buffer(pa);
                              for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
                            });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.value());
}

// ---------------------------------------------------------------------------
// Convolution (im2col / col2im)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, int C, int H, int W, int k, int stride, int pad,
                 int oh, int ow) {
  Tensor<T> col({C * k * k, oh * ow});
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const int row = (c * k + ki) * k + kj;
        T* dst = col.data() + static_cast<std::int64_t>(row) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            T v = T(0);
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) {
              v = x[(static_cast<std::int64_t>(c) * H + iy) * W + ix];
            }
            dst[oy * ow + ox] = v;
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
void col2im_add(const Tensor<T>& col, int C, int H, int W, int k, int stride, int pad,
                int oh, int ow, Tensor<T>& dx) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const int row = (c * k + ki) * k + kj;
        const T* src = col.data() + static_cast<std::int64_t>(row) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= W) continue;
            dx[(static_cast<std::int64_t>(c) * H + iy) * W + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

// x: [C,H,W], w: [OC, C*k*k], b: [OC] (optional, pass undefined Var to skip).
// Output [OC, OH, OW].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int k, int stride,
              int pad) {
  const auto& xs = x.value().shape();
  if (xs.size() != 3) throw std::invalid_argument("conv2d: input must be [C,H,W]");
  const int C = xs[0], H = xs[1], W = xs[2];
  const int OC = w.value().rows();
  if (w.value().cols() != C * k * k) {
    throw std::invalid_argument("conv2d: weight shape mismatch");
  }
  const int oh = (H + 2 * pad - k) / stride + 1;
  const int ow = (W + 2 * pad - k) / stride + 1;
  Tensor<T> col = im2col(x.value(), C, H, W, k, stride, pad, oh, ow);
  Tensor<T> out2d;
  gemm(w.value(), col, out2d);
  if (b.defined()) {
    for (int oc = 0; oc < OC; ++oc) {
      T* row = out2d.data() + static_cast<std::int64_t>(oc) * oh * ow;
      const T bv = b.value()[oc];
      for (int i = 0; i < oh * ow; ++i) row[i] += bv;
    }
  }
  Tensor<T> out = out2d.reshaped({OC, oh, ow});
  std::vector<NodePtr<T>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  auto px = x.node(), pw = w.node();
  NodePtr<T> pb = b.defined() ? b.node() : nullptr;
  return detail::make_op<T>(
      std::move(out), std::move(parents),
      [px, pw, pb, col, C, H, W, k, stride, pad, oh, ow, OC](const Tensor<T>& g,
                                                             GradStore<T>& gs) {
        Tensor<T> g2d = g.reshaped({OC, oh * ow});
        if (pw->requires_grad) {
          Tensor<T> dw;
          gemm_nt(g2d, col, dw);
          axpy(dw, gs.buffer(pw));
        }
        if (pb && pb->requires_grad) {
          Tensor<T>& db = gs.buffer(pb);
          for (int oc = 0; oc < OC; ++oc) {
            const T* row = g2d.data() + static_cast<std::int64_t>(oc) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) db[oc] += row[i];
          }
        }
        if (px->requires_grad) {
          Tensor<T> dcol;
          gemm_tn(pw->value, g2d, dcol);
          col2im_add(dcol, C, H, W, k, stride, pad, oh, ow, gs.buffer(px));
        }
      });
}

}  // namespace kad::ad
