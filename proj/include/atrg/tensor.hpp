// Copyright 2026 The atrg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ATRG_TENSOR_HPP
#define ATRG_TENSOR_HPP

// Reverse-mode automatic differentiation over small dense float64 tensors.
//
// Every vector-Jacobian product is itself expressed through the public tensor
// ops, so a backward pass run with create_graph=true yields gradients that are
// again differentiable (reverse-over-reverse). Graphs are immutable once
// built; backward may be called on the same graph any number of times.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "atrg/errors.hpp"

namespace atrg {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

class Tensor;
struct TensorNode;

using BackwardFn = std::vector<Tensor> (*)(const Tensor& grad_out, const TensorNode& self);

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Scoped switch that stops ops from recording graph edges.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// One node of the computation graph. Leaves have no parents and no backward
// function; non-leaves record exactly the operation and parents that produced
// them. Data is immutable after construction.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor> parents;
  std::vector<Tensor> saved;     // extra tensors the backward needs (e.g. dropout mask)
  std::vector<int64_t> ints;     // op attributes: axes, offsets, indices
  BackwardFn backward_fn = nullptr;

  TensorNode() = default;
  ~TensorNode();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("leaf: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    for (double v : data)
      if (!std::isfinite(v)) throw NumericError("leaf: non-finite value");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor scalar(double v) { return leaf({}, {v}); }
  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor ones(Shape shape) {
    auto n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 1.0));
  }
  static Tensor full(Shape shape, double v) {
    auto n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return shape_numel(node_->shape); }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  const std::vector<double>& data() const { return node_->data; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  TensorNode* node() const { return node_.get(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }

  double at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const {
    return node_->data[static_cast<size_t>(r * node_->shape[1] + c)];
  }

  // A constant copy with no graph attachment.
  Tensor detach() const { return leaf(node_->shape, node_->data, false); }

  friend Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents, BackwardFn fn, std::vector<Tensor> saved,
                        std::vector<int64_t> ints);
  friend struct TensorNode;

 private:
  std::shared_ptr<TensorNode> node_;
};

// Deep graphs form long shared_ptr chains; drain them iteratively so node
// destruction never recurses.
inline TensorNode::~TensorNode() {
  std::vector<std::shared_ptr<TensorNode>> stack;
  auto drain = [&stack](std::vector<Tensor>& v) {
    for (auto& t : v) {
      if (t.node_ && t.node_.use_count() == 1) stack.push_back(std::move(t.node_));
    }
    v.clear();
  };
  drain(parents);
  drain(saved);
  while (!stack.empty()) {
    std::shared_ptr<TensorNode> n = std::move(stack.back());
    stack.pop_back();
    drain(n->parents);
    drain(n->saved);
  }
}

inline Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                      std::vector<Tensor> parents, BackwardFn fn,
                      std::vector<Tensor> saved = {}, std::vector<int64_t> ints = {}) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError(std::string(name) + ": internal result size mismatch");
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError(std::string(name) + ": non-finite result");
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = name;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p.requires_grad()) track = true;
  }
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->saved = std::move(saved);
    n->ints = std::move(ints);
    n->backward_fn = fn;
  }
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy align-right semantics)
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `s` viewed inside broadcast result `out` (0 where broadcast).
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  size_t r = out.size(), rs = s.size();
  std::vector<int64_t> native(rs);
  int64_t acc = 1;
  for (size_t i = rs; i-- > 0;) {
    native[i] = acc;
    acc *= s[i];
  }
  std::vector<int64_t> strides(r, 0);
  for (size_t i = 0; i < rs; ++i) {
    size_t oi = r - rs + i;
    strides[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : native[i];
  }
  return strides;
}

template <class F>
inline std::vector<double> broadcast_binary_data(const Tensor& a, const Tensor& b,
                                                 const Shape& out, F f) {
  const auto& da = a.data();
  const auto& db = b.data();
  size_t n = static_cast<size_t>(shape_numel(out));
  std::vector<double> res(n);
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < n; ++i) res[i] = f(da[i], db[i]);
    return res;
  }
  if (b.numel() == 1) {
    double s = db[0];
    for (size_t i = 0; i < n; ++i) res[i] = f(da[i], s);
    return res;
  }
  if (a.numel() == 1) {
    double s = da[0];
    for (size_t i = 0; i < n; ++i) res[i] = f(s, db[i]);
    return res;
  }
  size_t r = out.size();
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::vector<int64_t> idx(r, 0);
  int64_t offa = 0, offb = 0;
  for (size_t k = 0; k < n; ++k) {
    res[k] = f(da[static_cast<size_t>(offa)], db[static_cast<size_t>(offb)]);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      offa += sa[d];
      offb += sb[d];
      if (idx[d] < out[d]) break;
      offa -= sa[d] * out[d];
      offb -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
  return res;
}

// Sum `src` (shaped `from`) down to `to` (a broadcast-compatible smaller shape).
inline std::vector<double> reduce_sum_data(const std::vector<double>& src, const Shape& from,
                                           const Shape& to) {
  size_t n = static_cast<size_t>(shape_numel(from));
  std::vector<double> res(static_cast<size_t>(shape_numel(to)), 0.0);
  if (from == to) {
    res.assign(src.begin(), src.end());
    return res;
  }
  auto st = broadcast_strides(to, from);
  size_t r = from.size();
  std::vector<int64_t> idx(r, 0);
  int64_t off = 0;
  for (size_t k = 0; k < n; ++k) {
    res[static_cast<size_t>(off)] += src[k];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      off += st[d];
      if (idx[d] < from[d]) break;
      off -= st[d] * from[d];
      idx[d] = 0;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Primitive ops. Each backward is built from public ops so gradients stay
// differentiable.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor sum_rows(const Tensor& a);
Tensor broadcast_to(const Tensor& a, Shape shape);
Tensor reduce_sum_to(const Tensor& a, Shape shape);
Tensor reshape(const Tensor& a, Shape shape);
Tensor narrow(const Tensor& a, int64_t axis, int64_t start, int64_t len);
Tensor pad_narrow(const Tensor& g, Shape full, int64_t axis, int64_t start);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids);
Tensor scatter_rows(const Tensor& values, const std::vector<int64_t>& ids, int64_t num_rows);
Tensor dropout(const Tensor& a, double rate, uint64_t seed);

namespace vjp {

inline std::vector<Tensor> add_bw(const Tensor& g, const TensorNode& n) {
  return {reduce_sum_to(g, n.parents[0].shape()), reduce_sum_to(g, n.parents[1].shape())};
}
inline std::vector<Tensor> sub_bw(const Tensor& g, const TensorNode& n) {
  return {reduce_sum_to(g, n.parents[0].shape()), reduce_sum_to(neg(g), n.parents[1].shape())};
}
inline std::vector<Tensor> mul_bw(const Tensor& g, const TensorNode& n) {
  const Tensor& a = n.parents[0];
  const Tensor& b = n.parents[1];
  return {reduce_sum_to(mul(g, b), a.shape()), reduce_sum_to(mul(g, a), b.shape())};
}
inline std::vector<Tensor> div_bw(const Tensor& g, const TensorNode& n) {
  const Tensor& a = n.parents[0];
  const Tensor& b = n.parents[1];
  return {reduce_sum_to(div(g, b), a.shape()),
          reduce_sum_to(neg(div(mul(g, a), mul(b, b))), b.shape())};
}
inline std::vector<Tensor> neg_bw(const Tensor& g, const TensorNode&) { return {neg(g)}; }
inline std::vector<Tensor> matmul_bw(const Tensor& g, const TensorNode& n) {
  return {matmul(g, transpose(n.parents[1])), matmul(transpose(n.parents[0]), g)};
}
inline std::vector<Tensor> transpose_bw(const Tensor& g, const TensorNode&) {
  return {transpose(g)};
}
inline std::vector<Tensor> exp_bw(const Tensor& g, const TensorNode& n) {
  return {mul(g, exp(n.parents[0]))};
}
inline std::vector<Tensor> log_bw(const Tensor& g, const TensorNode& n) {
  return {div(g, n.parents[0])};
}
inline std::vector<Tensor> sqrt_bw(const Tensor& g, const TensorNode& n) {
  return {div(g, mul(Tensor::scalar(2.0), sqrt(n.parents[0])))};
}
inline std::vector<Tensor> tanh_bw(const Tensor& g, const TensorNode& n) {
  Tensor y = tanh(n.parents[0]);
  return {mul(g, sub(Tensor::scalar(1.0), mul(y, y)))};
}
inline std::vector<Tensor> abs_bw(const Tensor& g, const TensorNode& n) {
  const Tensor& a = n.parents[0];
  std::vector<double> s(a.data().size());
  for (size_t i = 0; i < s.size(); ++i)
    s[i] = a.data()[i] > 0.0 ? 1.0 : (a.data()[i] < 0.0 ? -1.0 : 0.0);
  return {mul(g, Tensor::leaf(a.shape(), std::move(s)))};
}
inline std::vector<Tensor> sum_all_bw(const Tensor& g, const TensorNode& n) {
  return {broadcast_to(g, n.parents[0].shape())};
}
inline std::vector<Tensor> sum_rows_bw(const Tensor& g, const TensorNode& n) {
  return {broadcast_to(g, n.parents[0].shape())};
}
inline std::vector<Tensor> broadcast_to_bw(const Tensor& g, const TensorNode& n) {
  return {reduce_sum_to(g, n.parents[0].shape())};
}
inline std::vector<Tensor> reduce_sum_to_bw(const Tensor& g, const TensorNode& n) {
  return {broadcast_to(g, n.parents[0].shape())};
}
inline std::vector<Tensor> reshape_bw(const Tensor& g, const TensorNode& n) {
  return {reshape(g, n.parents[0].shape())};
}
inline std::vector<Tensor> narrow_bw(const Tensor& g, const TensorNode& n) {
  return {pad_narrow(g, n.parents[0].shape(), n.ints[0], n.ints[1])};
}
inline std::vector<Tensor> pad_narrow_bw(const Tensor& g, const TensorNode& n) {
  const Shape& small = n.parents[0].shape();
  int64_t axis = n.ints[0], start = n.ints[1];
  return {narrow(g, axis, start, small[static_cast<size_t>(axis)])};
}
inline std::vector<Tensor> concat_bw(const Tensor& g, const TensorNode& n) {
  int64_t axis = n.ints[0];
  std::vector<Tensor> out;
  int64_t off = 0;
  for (const auto& p : n.parents) {
    int64_t len = p.shape()[static_cast<size_t>(axis)];
    out.push_back(narrow(g, axis, off, len));
    off += len;
  }
  return out;
}
inline std::vector<Tensor> gather_rows_bw(const Tensor& g, const TensorNode& n) {
  std::vector<int64_t> ids(n.ints.begin() + 1, n.ints.end());
  return {scatter_rows(g, ids, n.ints[0])};
}
inline std::vector<Tensor> scatter_rows_bw(const Tensor& g, const TensorNode& n) {
  std::vector<int64_t> ids(n.ints.begin() + 1, n.ints.end());
  return {gather_rows(g, ids)};
}
inline std::vector<Tensor> dropout_bw(const Tensor& g, const TensorNode& n) {
  return {mul(g, n.saved[0])};
}

}  // namespace vjp

inline Tensor add(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape(), "add");
  auto data = broadcast_binary_data(a, b, out, [](double x, double y) { return x + y; });
  return make_op("add", std::move(out), std::move(data), {a, b}, &vjp::add_bw);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape(), "sub");
  auto data = broadcast_binary_data(a, b, out, [](double x, double y) { return x - y; });
  return make_op("sub", std::move(out), std::move(data), {a, b}, &vjp::sub_bw);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape(), "mul");
  auto data = broadcast_binary_data(a, b, out, [](double x, double y) { return x * y; });
  return make_op("mul", std::move(out), std::move(data), {a, b}, &vjp::mul_bw);
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape(), "div");
  auto data = broadcast_binary_data(a, b, out, [](double x, double y) { return x / y; });
  return make_op("div", std::move(out), std::move(data), {a, b}, &vjp::div_bw);
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = -a.data()[i];
  return make_op("neg", a.shape(), std::move(data), {a}, &vjp::neg_bw);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double* po = out.data() + i * n;
    const double* pai = pa + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      double aik = pai[kk];
      const double* pbk = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) po[j] += aik * pbk[j];
    }
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b}, &vjp::matmul_bw);
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(a.shape()));
  int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = a.at(i, j);
  return make_op("transpose", {n, m}, std::move(out), {a}, &vjp::transpose_bw);
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = std::exp(a.data()[i]);
  return make_op("exp", a.shape(), std::move(data), {a}, &vjp::exp_bw);
}

inline Tensor log(const Tensor& a) {
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) {
    if (a.data()[i] <= 0.0) throw NumericError("log: non-positive input");
    data[i] = std::log(a.data()[i]);
  }
  return make_op("log", a.shape(), std::move(data), {a}, &vjp::log_bw);
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) {
    if (a.data()[i] < 0.0) throw NumericError("sqrt: negative input");
    data[i] = std::sqrt(a.data()[i]);
  }
  return make_op("sqrt", a.shape(), std::move(data), {a}, &vjp::sqrt_bw);
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = std::tanh(a.data()[i]);
  return make_op("tanh", a.shape(), std::move(data), {a}, &vjp::tanh_bw);
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = std::abs(a.data()[i]);
  return make_op("abs", a.shape(), std::move(data), {a}, &vjp::abs_bw);
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum_all", {}, {s}, {a}, &vjp::sum_all_bw);
}

inline Tensor sum_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("sum_rows: expects rank-2, got " + shape_str(a.shape()));
  int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += a.at(i, j);
    out[static_cast<size_t>(i)] = s;
  }
  return make_op("sum_rows", {m, 1}, std::move(out), {a}, &vjp::sum_rows_bw);
}

inline Tensor broadcast_to(const Tensor& a, Shape shape) {
  Shape check = broadcast_shape(a.shape(), shape, "broadcast_to");
  if (check != shape)
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor onesl = Tensor::zeros(shape);
  auto data =
      broadcast_binary_data(a, onesl, shape, [](double x, double) { return x; });
  return make_op("broadcast_to", std::move(shape), std::move(data), {a}, &vjp::broadcast_to_bw);
}

inline Tensor reduce_sum_to(const Tensor& a, Shape shape) {
  Shape check = broadcast_shape(a.shape(), shape, "reduce_sum_to");
  if (check != a.shape())
    throw ShapeError("reduce_sum_to: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto data = reduce_sum_data(a.data(), a.shape(), shape);
  return make_op("reduce_sum_to", std::move(shape), std::move(data), {a}, &vjp::reduce_sum_to_bw);
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_op("reshape", std::move(shape), a.data(), {a}, &vjp::reshape_bw);
}

inline Tensor narrow(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
  if (a.rank() < 1 || a.rank() > 2) throw ShapeError("narrow: expects rank 1 or 2");
  if (axis < 0 || axis >= a.rank()) throw ShapeError("narrow: bad axis");
  int64_t dim = a.shape()[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > dim) throw ShapeError("narrow: range out of bounds");
  Shape out = a.shape();
  out[static_cast<size_t>(axis)] = len;
  std::vector<double> data(static_cast<size_t>(shape_numel(out)));
  if (a.rank() == 1) {
    for (int64_t i = 0; i < len; ++i) data[static_cast<size_t>(i)] = a.at(start + i);
  } else {
    int64_t rows = out[0], cols = out[1];
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) {
        int64_t src_r = axis == 0 ? start + i : i;
        int64_t src_c = axis == 1 ? start + j : j;
        data[static_cast<size_t>(i * cols + j)] = a.at(src_r, src_c);
      }
  }
  return make_op("narrow", std::move(out), std::move(data), {a}, &vjp::narrow_bw, {},
                 {axis, start});
}

inline Tensor pad_narrow(const Tensor& g, Shape full, int64_t axis, int64_t start) {
  if (g.rank() != static_cast<int64_t>(full.size())) throw ShapeError("pad_narrow: rank mismatch");
  std::vector<double> data(static_cast<size_t>(shape_numel(full)), 0.0);
  if (g.rank() == 1) {
    for (int64_t i = 0; i < g.shape()[0]; ++i) data[static_cast<size_t>(start + i)] = g.at(i);
  } else {
    int64_t rows = g.shape()[0], cols = g.shape()[1], full_cols = full[1];
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) {
        int64_t dst_r = axis == 0 ? start + i : i;
        int64_t dst_c = axis == 1 ? start + j : j;
        data[static_cast<size_t>(dst_r * full_cols + dst_c)] = g.at(i, j);
      }
  }
  return make_op("pad_narrow", std::move(full), std::move(data), {g}, &vjp::pad_narrow_bw, {},
                 {axis, start});
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  int64_t rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  Shape out = parts[0].shape();
  for (size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    if (static_cast<int64_t>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d)
      if (d != axis && s[static_cast<size_t>(d)] != out[static_cast<size_t>(d)])
        throw ShapeError("concat: incompatible shapes");
    out[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  std::vector<double> data(static_cast<size_t>(shape_numel(out)));
  if (rank == 1) {
    size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), data.begin() + static_cast<int64_t>(off));
      off += p.data().size();
    }
  } else {
    int64_t cols = out[1];
    if (axis == 0) {
      size_t off = 0;
      for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), data.begin() + static_cast<int64_t>(off));
        off += p.data().size();
      }
    } else {
      int64_t rows = out[0];
      int64_t col_off = 0;
      for (const auto& p : parts) {
        int64_t pc = p.shape()[1];
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < pc; ++j)
            data[static_cast<size_t>(i * cols + col_off + j)] = p.at(i, j);
        col_off += pc;
      }
    }
  }
  return make_op("concat", std::move(out), std::move(data), parts, &vjp::concat_bw, {}, {axis});
}

inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
  int64_t v = table.shape()[0], d = table.shape()[1];
  std::vector<double> data(ids.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v)
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range [0," +
                       std::to_string(v) + ")");
    std::copy(table.data().begin() + ids[i] * d, table.data().begin() + (ids[i] + 1) * d,
              data.begin() + static_cast<int64_t>(i) * d);
  }
  std::vector<int64_t> ints;
  ints.reserve(ids.size() + 1);
  ints.push_back(v);
  ints.insert(ints.end(), ids.begin(), ids.end());
  return make_op("gather_rows", {static_cast<int64_t>(ids.size()), d}, std::move(data), {table},
                 &vjp::gather_rows_bw, {}, std::move(ints));
}

inline Tensor scatter_rows(const Tensor& values, const std::vector<int64_t>& ids,
                           int64_t num_rows) {
  if (values.rank() != 2) throw ShapeError("scatter_rows: values must be rank-2");
  if (static_cast<size_t>(values.shape()[0]) != ids.size())
    throw ShapeError("scatter_rows: row count mismatch");
  int64_t d = values.shape()[1];
  std::vector<double> data(static_cast<size_t>(num_rows * d), 0.0);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= num_rows) throw ShapeError("scatter_rows: index out of range");
    for (int64_t j = 0; j < d; ++j)
      data[static_cast<size_t>(ids[i] * d + j)] += values.at(static_cast<int64_t>(i), j);
  }
  std::vector<int64_t> ints;
  ints.reserve(ids.size() + 1);
  ints.push_back(num_rows);
  ints.insert(ints.end(), ids.begin(), ids.end());
  return make_op("scatter_rows", {num_rows, d}, std::move(data), {values}, &vjp::scatter_rows_bw,
                 {}, std::move(ints));
}

// Inverted dropout: scales kept values by 1/(1-rate) so evaluation is identity.
inline Tensor dropout(const Tensor& a, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (rate == 0.0) return a;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.data().size());
  for (auto& m : mask) m = unif(rng) < rate ? 0.0 : scale;
  Tensor mask_t = Tensor::leaf(a.shape(), mask);
  std::vector<double> data(a.data().size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = a.data()[i] * mask[i];
  return make_op("dropout", a.shape(), std::move(data), {a}, &vjp::dropout_bw, {mask_t});
}

// Operators for readability.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }

// ---------------------------------------------------------------------------
// Composites (no own backward; built from primitives)
// ---------------------------------------------------------------------------

inline Tensor mean_all(const Tensor& a) { return sum_all(a) / static_cast<double>(a.numel()); }

inline Tensor mean_rows(const Tensor& a) {
  return sum_rows(a) / static_cast<double>(a.shape()[1]);
}

// Per-row max as a detached constant; softmax is shift-invariant so this is
// exact for values and all derivative orders.
inline Tensor rowmax_detached(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("rowmax: expects rank-2");
  int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    double mx = a.at(i, 0);
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    out[static_cast<size_t>(i)] = mx;
  }
  return Tensor::leaf({m, 1}, std::move(out));
}

inline Tensor softmax_rows(const Tensor& a) {
  Tensor e = exp(sub(a, rowmax_detached(a)));
  return div(e, sum_rows(e));
}

inline Tensor log_softmax_rows(const Tensor& a) {
  Tensor shifted = sub(a, rowmax_detached(a));
  return sub(shifted, log(sum_rows(exp(shifted))));
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  Tensor mu = mean_rows(x);
  Tensor centered = sub(x, mu);
  Tensor var = mean_rows(mul(centered, centered));
  Tensor normed = div(centered, sqrt(add(var, Tensor::scalar(eps))));
  return add(mul(normed, gain), bias);
}

inline Tensor gelu(const Tensor& x) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  Tensor inner = mul(Tensor::scalar(kSqrt2OverPi),
                     add(x, mul(Tensor::scalar(0.044715), mul(x, mul(x, x)))));
  return mul(mul(Tensor::scalar(0.5), x), add(Tensor::scalar(1.0), tanh(inner)));
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct GradientRequest {
  Tensor output;                 // scalar
  std::vector<Tensor> inputs;    // gradient targets (leaves or intermediates)
  bool create_graph = false;     // make returned gradients differentiable
};

inline std::vector<Tensor> backward(const GradientRequest& req) {
  if (!req.output.defined() || req.output.numel() != 1)
    throw ShapeError("backward: output must be scalar");

  // Post-order over the requires-grad subgraph. Deterministic: parents are
  // visited in stored order, so accumulation order is fixed.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  if (req.output.requires_grad()) {
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(req.output.node(), 0);
    visited.insert(req.output.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode* p = node->parents[next].node();
        ++next;
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<TensorNode*, Tensor> adjoint;
  {
    std::optional<NoGradGuard> guard;
    if (!req.create_graph) guard.emplace();
    if (req.output.requires_grad())
      adjoint[req.output.node()] = Tensor::ones(req.output.shape());
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      TensorNode* node = *it;
      auto found = adjoint.find(node);
      if (found == adjoint.end() || node->backward_fn == nullptr) continue;
      std::vector<Tensor> grads = node->backward_fn(found->second, *node);
      if (grads.size() != node->parents.size())
        throw ShapeError(std::string("backward: op '") + node->op + "' returned " +
                         std::to_string(grads.size()) + " grads for " +
                         std::to_string(node->parents.size()) + " parents");
      for (size_t i = 0; i < grads.size(); ++i) {
        const Tensor& parent = node->parents[i];
        if (!parent.requires_grad()) continue;
        if (grads[i].shape() != parent.shape())
          throw ShapeError(std::string("backward: op '") + node->op +
                           "' produced gradient of shape " + shape_str(grads[i].shape()) +
                           " for parent of shape " + shape_str(parent.shape()));
        auto slot = adjoint.find(parent.node());
        if (slot == adjoint.end())
          adjoint.emplace(parent.node(), grads[i]);
        else
          slot->second = add(slot->second, grads[i]);
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(req.inputs.size());
  for (const auto& in : req.inputs) {
    auto it = adjoint.find(in.node());
    if (it == adjoint.end())
      out.push_back(Tensor::zeros(in.shape()));
    else
      out.push_back(it->second);
  }
  return out;
}

inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                                bool create_graph = false) {
  return backward(GradientRequest{output, inputs, create_graph});
}

}  // namespace atrg

#endif  // ATRG_TENSOR_HPP
