// SPDX-License-Identifier: Apache-2.0
/**
 * @file   numerics.hpp
 * @brief  Dense 2-D tensors with reverse-mode differentiation.
 *
 * Every op records a backward closure on the result node. backward() walks
 * the graph once in reverse topological order. Leaves created with
 * requires_grad=true are parameters and accumulate gradients; other leaves
 * never receive a gradient buffer.
 *
 * Broadcasting is limited to adding a 1 x C row to every row of an R x C
 * matrix.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rrcore/errors.hpp"

namespace rrcore {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape &) const = default;
  std::string str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

namespace detail {

inline thread_local bool grad_enabled = true;

template <class Real> struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char *op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node &)> backward_fn;

  Node &parent(std::size_t i) { return *parents[i]; }
  bool wants(std::size_t i) const { return parents[i]->requires_grad; }
};

} // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool prev_;
};

template <class Real> class Tensor {
public:
  using value_type = Real;
  using NodeT = detail::Node<Real>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    node_->shape = shape;
    node_->value.assign(shape.size(), Real(0));
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (values.size() != shape.size())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    node_->shape = shape;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor({1, 1}, {v}, requires_grad);
  }
  static Tensor row(std::vector<Real> values, bool requires_grad = false) {
    std::size_t n = values.size();
    return Tensor({1, n}, std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }
  const char *op() const { return node_->op; }

  std::span<Real> values() { return node_->value; }
  std::span<const Real> values() const { return node_->value; }
  Real operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  Real &operator()(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
  Real item() const {
    if (size() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape().str());
    return node_->value[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    if (node_->grad.empty())
      node_->grad.assign(size(), Real(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(size(), Real(0)); }

  /// Fresh leaf with the same values and requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }
  /// Fresh non-differentiable leaf with the same values.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  NodeT *node() const { return node_.get(); }
  const std::shared_ptr<NodeT> &node_ptr() const { return node_; }

private:
  std::shared_ptr<NodeT> node_;
};

namespace detail {

template <class Real, class Fn>
Tensor<Real> make_result(Shape shape, std::vector<Real> value,
                         std::initializer_list<const Tensor<Real> *> parents, const char *op,
                         Fn &&backward) {
  Tensor<Real> out(shape, std::move(value));
  if (!grad_enabled)
    return out;
  bool any = false;
  for (auto *p : parents)
    any = any || p->requires_grad();
  if (!any)
    return out;
  auto *n = out.node();
  n->requires_grad = true;
  n->op = op;
  n->parents.reserve(parents.size());
  for (auto *p : parents)
    n->parents.push_back(p->node_ptr());
  n->backward_fn = std::forward<Fn>(backward);
  return out;
}

template <class Real, class Fn>
Tensor<Real> make_result_list(Shape shape, std::vector<Real> value,
                              std::span<const Tensor<Real>> parents, const char *op,
                              Fn &&backward) {
  Tensor<Real> out(shape, std::move(value));
  if (!grad_enabled)
    return out;
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor<Real> &p) { return p.requires_grad(); });
  if (!any)
    return out;
  auto *n = out.node();
  n->requires_grad = true;
  n->op = op;
  for (const auto &p : parents)
    n->parents.push_back(p.node_ptr());
  n->backward_fn = std::forward<Fn>(backward);
  return out;
}

inline void require(bool ok, const std::string &what) {
  if (!ok)
    throw ShapeError(what);
}

template <class Real> std::string shapes(const Tensor<Real> &a, const Tensor<Real> &b) {
  return a.shape().str() + " vs " + b.shape().str();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Kernel ops

template <class Real> Tensor<Real> matmul(const Tensor<Real> &a, const Tensor<Real> &b) {
  detail::require(a.cols() == b.rows(), "matmul shape mismatch " + detail::shapes(a, b));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<Real> out(m * n, Real(0));
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    Real *o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      if (aip == Real(0))
        continue;
      const Real *brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j)
        o[j] += aip * brow[j];
    }
  }
  return detail::make_result<Real>({m, n}, std::move(out), {&a, &b}, "matmul",
                                   [m, k, n](detail::Node<Real> &self) {
                                     auto &A = self.parent(0);
                                     auto &B = self.parent(1);
                                     const Real *g = self.grad.data();
                                     if (A.requires_grad) {
                                       for (std::size_t i = 0; i < m; ++i)
                                         for (std::size_t p = 0; p < k; ++p) {
                                           const Real *brow = B.value.data() + p * n;
                                           const Real *grow = g + i * n;
                                           Real s = 0;
                                           for (std::size_t j = 0; j < n; ++j)
                                             s += grow[j] * brow[j];
                                           A.grad[i * k + p] += s;
                                         }
                                     }
                                     if (B.requires_grad) {
                                       for (std::size_t i = 0; i < m; ++i)
                                         for (std::size_t p = 0; p < k; ++p) {
                                           const Real aip = A.value[i * k + p];
                                           if (aip == Real(0))
                                             continue;
                                           Real *bg = B.grad.data() + p * n;
                                           const Real *grow = g + i * n;
                                           for (std::size_t j = 0; j < n; ++j)
                                             bg[j] += aip * grow[j];
                                         }
                                     }
                                   });
}

namespace detail {
template <class Real>
Tensor<Real> add_sub(const Tensor<Real> &a, const Tensor<Real> &b, Real sign, const char *op) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && b.rows() == 1 && b.cols() == a.cols();
  require(same || bcast, std::string(op) + " shape mismatch " + shapes(a, b));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<Real> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] += sign * bv[same ? i * c + j : j];
  return make_result<Real>(a.shape(), std::move(out), {&a, &b}, op,
                           [r, c, same, sign](Node<Real> &self) {
                             if (self.wants(0))
                               for (std::size_t i = 0; i < r * c; ++i)
                                 self.parent(0).grad[i] += self.grad[i];
                             if (self.wants(1)) {
                               auto &bg = self.parent(1).grad;
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   bg[same ? i * c + j : j] += sign * self.grad[i * c + j];
                             }
                           });
}
} // namespace detail

/// Elementwise sum; `b` may also be a 1 x C row broadcast over `a`'s rows.
template <class Real> Tensor<Real> add(const Tensor<Real> &a, const Tensor<Real> &b) {
  return detail::add_sub(a, b, Real(1), "add");
}

template <class Real> Tensor<Real> sub(const Tensor<Real> &a, const Tensor<Real> &b) {
  return detail::add_sub(a, b, Real(-1), "sub");
}

template <class Real> Tensor<Real> mul(const Tensor<Real> &a, const Tensor<Real> &b) {
  detail::require(a.shape() == b.shape(), "mul shape mismatch " + detail::shapes(a, b));
  std::vector<Real> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] * bv[i];
  return detail::make_result<Real>(a.shape(), std::move(out), {&a, &b}, "mul",
                                   [](detail::Node<Real> &self) {
                                     auto &A = self.parent(0);
                                     auto &B = self.parent(1);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                       if (A.requires_grad)
                                         A.grad[i] += self.grad[i] * B.value[i];
                                       if (B.requires_grad)
                                         B.grad[i] += self.grad[i] * A.value[i];
                                     }
                                   });
}

template <class Real> Tensor<Real> scale(const Tensor<Real> &a, Real factor) {
  std::vector<Real> out(a.values().begin(), a.values().end());
  for (auto &v : out)
    v *= factor;
  return detail::make_result<Real>(a.shape(), std::move(out), {&a}, "scale",
                                   [factor](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] += factor * self.grad[i];
                                   });
}

/// `a` times the single value held by the 1 x 1 tensor `s`.
template <class Real> Tensor<Real> mul_scalar(const Tensor<Real> &a, const Tensor<Real> &s) {
  detail::require(s.size() == 1, "mul_scalar expects a 1x1 factor, got " + s.shape().str());
  const Real f = s.values()[0];
  std::vector<Real> out(a.values().begin(), a.values().end());
  for (auto &v : out)
    v *= f;
  return detail::make_result<Real>(a.shape(), std::move(out), {&a, &s}, "mul_scalar",
                                   [](detail::Node<Real> &self) {
                                     auto &A = self.parent(0);
                                     auto &S = self.parent(1);
                                     const Real f = S.value[0];
                                     Real acc = 0;
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                       if (A.requires_grad)
                                         A.grad[i] += f * self.grad[i];
                                       acc += A.value[i] * self.grad[i];
                                     }
                                     if (S.requires_grad)
                                       S.grad[0] += acc;
                                   });
}

/// 1 - a, elementwise.
template <class Real> Tensor<Real> one_minus(const Tensor<Real> &a) {
  std::vector<Real> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = Real(1) - av[i];
  return detail::make_result<Real>(a.shape(), std::move(out), {&a}, "one_minus",
                                   [](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] -= self.grad[i];
                                   });
}

template <class Real> Tensor<Real> concat_cols(std::span<const Tensor<Real>> parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  std::vector<std::size_t> offs;
  for (const auto &p : parts) {
    detail::require(p.rows() == r, "concat_cols row mismatch " + detail::shapes(parts[0], p));
    offs.push_back(c);
    c += p.cols();
  }
  std::vector<Real> out(r * c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    const std::size_t pc = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * pc, pc, out.data() + i * c + offs[k]);
  }
  return detail::make_result_list<Real>({r, c}, std::move(out), parts, "concat_cols",
                                        [r, c, offs](detail::Node<Real> &self) {
                                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                            auto &P = self.parent(k);
                                            if (!P.requires_grad)
                                              continue;
                                            const std::size_t pc = P.shape.cols;
                                            for (std::size_t i = 0; i < r; ++i)
                                              for (std::size_t j = 0; j < pc; ++j)
                                                P.grad[i * pc + j] += self.grad[i * c + offs[k] + j];
                                          }
                                        });
}

template <class Real> Tensor<Real> concat_cols(const Tensor<Real> &a, const Tensor<Real> &b) {
  const Tensor<Real> parts[] = {a, b};
  return concat_cols<Real>(std::span<const Tensor<Real>>(parts));
}

/// Stacks tensors vertically; all must share a column count.
template <class Real> Tensor<Real> concat_rows(std::span<const Tensor<Real>> parts) {
  detail::require(!parts.empty(), "concat_rows of nothing");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<std::size_t> offs;
  for (const auto &p : parts) {
    detail::require(p.cols() == c, "concat_rows column mismatch " + detail::shapes(parts[0], p));
    offs.push_back(r * c);
    r += p.rows();
  }
  std::vector<Real> out;
  out.reserve(r * c);
  for (const auto &p : parts)
    out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result_list<Real>({r, c}, std::move(out), parts, "concat_rows",
                                        [offs](detail::Node<Real> &self) {
                                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                            auto &P = self.parent(k);
                                            if (!P.requires_grad)
                                              continue;
                                            for (std::size_t i = 0; i < P.grad.size(); ++i)
                                              P.grad[i] += self.grad[offs[k] + i];
                                          }
                                        });
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real> &a, std::size_t begin, std::size_t end) {
  detail::require(begin <= end && end <= a.cols(),
                  "slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") out of range for " + a.shape().str());
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  std::vector<Real> out(r * w);
  auto v = a.values();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(v.data() + i * c + begin, w, out.data() + i * w);
  return detail::make_result<Real>({r, w}, std::move(out), {&a}, "slice_cols",
                                   [r, c, w, begin](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < w; ++j)
                                         g[i * c + begin + j] += self.grad[i * w + j];
                                   });
}

template <class Real>
Tensor<Real> slice_rows(const Tensor<Real> &a, std::size_t begin, std::size_t end) {
  detail::require(begin <= end && end <= a.rows(),
                  "slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") out of range for " + a.shape().str());
  const std::size_t c = a.cols();
  auto v = a.values();
  std::vector<Real> out(v.begin() + static_cast<std::ptrdiff_t>(begin * c),
                        v.begin() + static_cast<std::ptrdiff_t>(end * c));
  return detail::make_result<Real>({end - begin, c}, std::move(out), {&a}, "slice_rows",
                                   [off = begin * c](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       g[off + i] += self.grad[i];
                                   });
}

template <class Real> Tensor<Real> transpose(const Tensor<Real> &a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<Real> out(r * c);
  auto v = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[j * r + i] = v[i * c + j];
  return detail::make_result<Real>({c, r}, std::move(out), {&a}, "transpose",
                                   [r, c](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                         g[i * c + j] += self.grad[j * r + i];
                                   });
}

namespace detail {
// y = f(x) elementwise with dy/dx expressed through (x, y).
template <class Real, class F, class D>
Tensor<Real> unary(const Tensor<Real> &a, const char *op, F f, D dfdx) {
  std::vector<Real> out(a.size());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f(v[i]);
  return make_result<Real>(a.shape(), std::move(out), {&a}, op, [dfdx](Node<Real> &self) {
    auto &P = self.parent(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      P.grad[i] += self.grad[i] * dfdx(P.value[i], self.value[i]);
  });
}
} // namespace detail

template <class Real> Tensor<Real> tanh(const Tensor<Real> &a) {
  return detail::unary(
      a, "tanh", [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real> Tensor<Real> sigmoid(const Tensor<Real> &a) {
  return detail::unary(
      a, "sigmoid",
      [](Real x) {
        if (x >= 0)
          return Real(1) / (Real(1) + std::exp(-x));
        Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real> Tensor<Real> exp(const Tensor<Real> &a) {
  return detail::unary(
      a, "exp", [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

/// Natural log of max(a, floor). Entries at or below the floor get zero
/// gradient.
template <class Real> Tensor<Real> log(const Tensor<Real> &a, Real floor = Real(0)) {
  return detail::unary(
      a, "log", [floor](Real x) { return std::log(std::max(x, floor)); },
      [floor](Real x, Real) { return x > floor ? Real(1) / x : Real(0); });
}

/// Inverted dropout. Identity when !train or p == 0.
template <class Real, class Rng>
Tensor<Real> dropout(const Tensor<Real> &a, double p, bool train, Rng &rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  if (!train || p == 0.0)
    return a;
  std::bernoulli_distribution keep(1.0 - p);
  const Real s = Real(1.0 / (1.0 - p));
  std::vector<Real> mask(a.size());
  for (auto &m : mask)
    m = keep(rng) ? s : Real(0);
  std::vector<Real> out(a.size());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = v[i] * mask[i];
  return detail::make_result<Real>(a.shape(), std::move(out), {&a}, "dropout",
                                   [mask = std::move(mask)](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] += self.grad[i] * mask[i];
                                   });
}

/// Gathers rows of `table`; result is ids.size() x table.cols().
template <class Real, class Id>
Tensor<Real> embedding_lookup(const Tensor<Real> &table, std::span<const Id> ids) {
  const std::size_t d = table.cols();
  std::vector<Real> out(ids.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < table.rows(),
                    "embedding id " + std::to_string(ids[i]) + " outside table " +
                        table.shape().str());
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return detail::make_result<Real>({ids.size(), d}, std::move(out), {&table}, "embedding",
                                   [rows = std::move(rows), d](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < rows.size(); ++i)
                                       for (std::size_t j = 0; j < d; ++j)
                                         g[rows[i] * d + j] += self.grad[i * d + j];
                                   });
}

/// Row-wise softmax with max subtraction. `mask` (one byte per column, empty
/// for none) zeroes out positions; masked entries get exactly 0 probability.
template <class Real>
Tensor<Real> masked_softmax(const Tensor<Real> &a, std::span<const std::uint8_t> mask = {}) {
  const std::size_t r = a.rows(), c = a.cols();
  detail::require(mask.empty() || mask.size() == c,
                  "softmax mask length " + std::to_string(mask.size()) + " vs " + a.shape().str());
  auto on = [&](std::size_t j) { return mask.empty() || mask[j] != 0; };
  std::size_t live = 0;
  for (std::size_t j = 0; j < c; ++j)
    live += on(j);
  if (live == 0)
    throw ShapeError("softmax over an all-masked row " + a.shape().str());
  std::vector<Real> out(r * c, Real(0));
  auto v = a.values();
  for (std::size_t i = 0; i < r; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (on(j))
        mx = std::max(mx, v[i * c + j]);
    Real sum = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (on(j))
        sum += out[i * c + j] = std::exp(v[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] /= sum;
  }
  return detail::make_result<Real>(a.shape(), std::move(out), {&a}, "masked_softmax",
                                   [r, c](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < r; ++i) {
                                       const Real *y = self.value.data() + i * c;
                                       const Real *dy = self.grad.data() + i * c;
                                       Real s = 0;
                                       for (std::size_t j = 0; j < c; ++j)
                                         s += y[j] * dy[j];
                                       for (std::size_t j = 0; j < c; ++j)
                                         g[i * c + j] += y[j] * (dy[j] - s);
                                     }
                                   });
}

/// out[0, ids[j]] += a[0, j] for a 1 x n row; result is 1 x width. Sums
/// attention mass by token identity.
template <class Real, class Id>
Tensor<Real> scatter_add_cols(const Tensor<Real> &a, std::span<const Id> ids, std::size_t width) {
  detail::require(a.rows() == 1 && a.cols() == ids.size(),
                  "scatter_add_cols expects a 1x" + std::to_string(ids.size()) + " row, got " +
                      a.shape().str());
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    detail::require(ids[j] >= 0 && static_cast<std::size_t>(ids[j]) < width,
                    "scatter index " + std::to_string(ids[j]) + " >= " + std::to_string(width));
    idx[j] = static_cast<std::size_t>(ids[j]);
  }
  std::vector<Real> out(width, Real(0));
  auto v = a.values();
  for (std::size_t j = 0; j < idx.size(); ++j)
    out[idx[j]] += v[j];
  return detail::make_result<Real>({1, width}, std::move(out), {&a}, "scatter_add",
                                   [idx = std::move(idx)](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t j = 0; j < idx.size(); ++j)
                                       g[j] += self.grad[idx[j]];
                                   });
}

/// Right-pads every row with zero columns up to `width`.
template <class Real> Tensor<Real> pad_cols(const Tensor<Real> &a, std::size_t width) {
  detail::require(width >= a.cols(), "pad_cols cannot shrink " + a.shape().str());
  if (width == a.cols())
    return a;
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<Real> out(r * width, Real(0));
  auto v = a.values();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(v.data() + i * c, c, out.data() + i * width);
  return detail::make_result<Real>({r, width}, std::move(out), {&a}, "pad_cols",
                                   [r, c, width](detail::Node<Real> &self) {
                                     auto &g = self.parent(0).grad;
                                     for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                         g[i * c + j] += self.grad[i * width + j];
                                   });
}

/// Single element (flat index) as a 1 x 1 tensor.
template <class Real> Tensor<Real> pick(const Tensor<Real> &a, std::size_t index) {
  detail::require(index < a.size(),
                  "pick index " + std::to_string(index) + " outside " + a.shape().str());
  return detail::make_result<Real>({1, 1}, {a.values()[index]}, {&a}, "pick",
                                   [index](detail::Node<Real> &self) {
                                     self.parent(0).grad[index] += self.grad[0];
                                   });
}

template <class Real> Tensor<Real> sum(const Tensor<Real> &a) {
  Real s = 0;
  for (Real v : a.values())
    s += v;
  return detail::make_result<Real>({1, 1}, {s}, {&a}, "sum", [](detail::Node<Real> &self) {
    for (auto &g : self.parent(0).grad)
      g += self.grad[0];
  });
}

/// Sums a list of scalars.
template <class Real> Tensor<Real> add_n(std::span<const Tensor<Real>> terms) {
  detail::require(!terms.empty(), "add_n of nothing");
  Real s = 0;
  for (const auto &t : terms) {
    detail::require(t.size() == 1, "add_n expects scalars, got " + t.shape().str());
    s += t.values()[0];
  }
  return detail::make_result_list<Real>({1, 1}, {s}, terms, "add_n",
                                        [](detail::Node<Real> &self) {
                                          for (auto &p : self.parents)
                                            if (p->requires_grad)
                                              p->grad[0] += self.grad[0];
                                        });
}

// ---------------------------------------------------------------------------
// Backward

/// Accumulates d(loss)/d(leaf) into every parameter reachable from `loss`.
/// Intermediate nodes keep their gradient buffers until the graph is freed.
template <class Real> void backward(const Tensor<Real> &loss) {
  if (loss.size() != 1)
    throw ShapeError("backward requires a scalar loss, got " + loss.shape().str());
  if (!loss.requires_grad())
    return;
  using NodeT = detail::Node<Real>;
  std::vector<NodeT *> order;
  std::unordered_set<NodeT *> visited;
  std::vector<std::pair<NodeT *, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto &[n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT *p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (NodeT *n : order) {
    if (n->backward_fn)
      n->grad.assign(n->value.size(), Real(0));
    else if (n->grad.size() != n->value.size())
      n->grad.assign(n->value.size(), Real(0));
  }
  loss.node()->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn)
      (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------------------
// Initialization helpers

template <class Real, class Rng>
Tensor<Real> uniform_tensor(Shape shape, Real limit, Rng &rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(limit),
                                              static_cast<double>(limit));
  std::vector<Real> v(shape.size());
  for (auto &x : v)
    x = static_cast<Real>(dist(rng));
  return Tensor<Real>(shape, std::move(v), requires_grad);
}

/// Xavier-uniform matrix: U(-a, a) with a = sqrt(6 / (rows + cols)).
template <class Real, class Rng> Tensor<Real> xavier(Shape shape, Rng &rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(shape.rows + shape.cols));
  return uniform_tensor<Real>(shape, static_cast<Real>(a), rng);
}

template <class Real> Tensor<Real> zeros_param(Shape shape) { return Tensor<Real>(shape, true); }

// ---------------------------------------------------------------------------
// GRU

/// Gate layout along the 3H axis of W and b: [update | reset | candidate].
///   z  = sigmoid(x W_z + h U_z + b_z)
///   r  = sigmoid(x W_r + h U_r + b_r)
///   h~ = tanh(x W_h + (r * h) U_h + b_h)
///   h' = (1 - z) * h + z * h~
template <class Real> struct GruWeights {
  Tensor<Real> W;  ///< input x 3H
  Tensor<Real> U;  ///< H x 2H (update, reset)
  Tensor<Real> Uh; ///< H x H (candidate)
  Tensor<Real> b;  ///< 1 x 3H

  std::size_t input_dim() const { return W.rows(); }
  std::size_t hidden() const { return Uh.rows(); }

  template <class Rng> static GruWeights init(std::size_t input, std::size_t hidden, Rng &rng) {
    return {xavier<Real>({input, 3 * hidden}, rng), xavier<Real>({hidden, 2 * hidden}, rng),
            xavier<Real>({hidden, hidden}, rng), zeros_param<Real>({1, 3 * hidden})};
  }
  GruWeights clone() const { return {W.clone(), U.clone(), Uh.clone(), b.clone()}; }
};

/// GRU update from a precomputed input projection `gx` = x W + b (rows x 3H).
template <class Real>
Tensor<Real> gru_step(const Tensor<Real> &gx, const Tensor<Real> &h_prev,
                      const GruWeights<Real> &w) {
  const std::size_t H = w.hidden();
  detail::require(gx.cols() == 3 * H && h_prev.cols() == H && gx.rows() == h_prev.rows(),
                  "gru shape mismatch: input projection " + gx.shape().str() + ", state " +
                      h_prev.shape().str() + ", hidden " + std::to_string(H));
  auto gh = matmul(h_prev, w.U);
  auto z = sigmoid(add(slice_cols(gx, 0, H), slice_cols(gh, 0, H)));
  auto r = sigmoid(add(slice_cols(gx, H, 2 * H), slice_cols(gh, H, 2 * H)));
  auto cand = tanh(add(slice_cols(gx, 2 * H, 3 * H), matmul(mul(r, h_prev), w.Uh)));
  return add(h_prev, mul(z, sub(cand, h_prev)));
}

template <class Real>
Tensor<Real> gru_cell(const Tensor<Real> &x, const Tensor<Real> &h_prev,
                      const GruWeights<Real> &w) {
  detail::require(x.rows() == h_prev.rows(),
                  "gru batch mismatch " + detail::shapes(x, h_prev));
  detail::require(x.cols() == w.input_dim(),
                  "gru input width " + x.shape().str() + " vs weights " + w.W.shape().str());
  return gru_step(add(matmul(x, w.W), w.b), h_prev, w);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t tensor = 0; ///< index of the worst tensor
  std::size_t index = 0;  ///< flat coordinate inside it
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() against central differences for every coordinate of
/// every tensor in `params`. `f` must rebuild the graph from the current
/// parameter values on each call and return a scalar.
template <class F>
GradCheckReport grad_check_all(F &&f, std::span<Tensor<double>> params, double eps = 1e-4) {
  for (auto &p : params)
    p.zero_grad();
  auto loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto &p : params)
    analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckReport rep;
  NoGradGuard ng;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto vals = params[t].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().item();
      vals[i] = orig - eps;
      const double fm = f().item();
      vals[i] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[t][i];
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      const double rel = std::abs(ana - num) / denom;
      ++rep.coordinates;
      if (rep.coordinates == 1 || rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.tensor = t;
        rep.index = i;
        rep.analytic = ana;
        rep.numeric = num;
      }
    }
  }
  return rep;
}

/// Single-input form: max relative error of d f(point) / d point.
template <class F> double grad_check(F &&f, Tensor<double> point, double eps = 1e-4) {
  Tensor<double> leaf(point.shape(), std::vector<double>(point.values().begin(),
                                                         point.values().end()),
                      true);
  Tensor<double> params[] = {leaf};
  return grad_check_all([&] { return f(leaf); }, std::span<Tensor<double>>(params), eps)
      .max_rel_error;
}

} // namespace rrcore
