/* Copyright 2026 The detrack Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Reverse-mode differentiation over dense row-major arrays.
//
// A Tape records every operation of one forward pass. Var is a cheap handle
// (tape pointer + node index). Tensors are at most two dimensional as far as
// the operations are concerned: a rank-1 array of length n behaves as a
// 1 x n row and a rank-0 array as 1 x 1.
//
// Gradients accumulate: a value used twice receives the sum of both
// contributions. After Backward(), gradients of Parameter leaves are added
// into Parameter::grad so several tapes can contribute to one optimizer step.

#ifndef DETRACK_AUTODIFF_HPP_
#define DETRACK_AUTODIFF_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace detrack::ad {

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t NumElements(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string ShapeString(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// (rows, cols) view of a shape; leading dimensions fold into rows.
inline std::pair<int, int> Dims2(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  int rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, s.back()};
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(NumElements(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != NumElements(shape)) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + ShapeString(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  int rows() const { return Dims2(shape).first; }
  int cols() const { return Dims2(shape).second; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }
};

// A trainable array plus its AdamW moment accumulators.
template <typename T>
struct Parameter {
  std::string name;
  std::string group;  // optimizer group, e.g. "encoder" or "decoder"
  bool decay = true;  // subject to weight decay
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;

  Parameter() = default;
  Parameter(std::string n, std::string g, Tensor<T> init, bool wd = true)
      : name(std::move(n)), group(std::move(g)), decay(wd), value(std::move(init)) {
    grad = Tensor<T>(value.shape);
    m = Tensor<T>(value.shape);
    v = Tensor<T>(value.shape);
  }

  void ZeroGrad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }

  const Shape& shape() const { return tape_->node(id_).shape; }
  int rows() const { return Dims2(shape()).first; }
  int cols() const { return Dims2(shape()).second; }
  std::size_t size() const { return tape_->node(id_).value.size(); }
  const std::vector<T>& value() const { return tape_->node(id_).value; }
  const std::vector<T>& grad() const { return tape_->node(id_).grad; }
  T item() const { return value().at(0); }
  T at(int r, int c) const { return value()[static_cast<std::size_t>(r) * cols() + c]; }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  Tensor<T> ToTensor() const { return Tensor<T>(shape(), value()); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> Constant(Tensor<T> t) { return Push(std::move(t.shape), std::move(t.data), false, {}); }
  Var<T> Constant(Shape s, std::vector<T> v) {
    Tensor<T> t(std::move(s), std::move(v));
    return Constant(std::move(t));
  }
  Var<T> Leaf(Tensor<T> t, bool requires_grad = true) {
    return Push(std::move(t.shape), std::move(t.data), requires_grad, {});
  }

  // One leaf per parameter per tape; repeated calls share the node so
  // gradients from every use are summed.
  Var<T> Param(Parameter<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var<T>(this, it->second);
    Var<T> v = Push(p.value.shape, p.value.data, true, {});
    nodes_[v.id()].param = &p;
    param_ids_.emplace(&p, v.id());
    return v;
  }

  // Records an operation result. The node requires a gradient iff any input does.
  Var<T> Record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || (in.valid() && node(in.id()).requires_grad);
    return Push(std::move(shape), std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }
  Var<T> Record(Shape shape, std::vector<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || (in.valid() && node(in.id()).requires_grad);
    return Push(std::move(shape), std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse pass from a single-element output.
  void Backward(const Var<T>& out) {
    if (out.tape() != this) throw std::logic_error("Backward: variable belongs to another tape");
    if (node(out.id()).value.size() != 1) {
      throw ShapeError("Backward needs a scalar output, got shape " +
                       ShapeString(node(out.id()).shape));
    }
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
    }
    if (!node(out.id()).requires_grad) return;
    node(out.id()).grad[0] = T(1);
    for (int i = out.id(); i >= 0; --i) {
      Node& n = node(i);
      if (n.requires_grad && n.backward) n.backward(*this);
    }
    for (auto& n : nodes_) {
      if (n.param != nullptr) {
        auto& g = n.param->grad.data;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  // Multiply-accumulate counter used to validate the analytic cost model.
  std::uint64_t macs() const { return macs_; }
  void AddMacs(std::uint64_t n) { macs_ += n; }

 private:
  Var<T> Push(Shape shape, std::vector<T> value, bool rg, BackwardFn fn) {
    if (value.size() != NumElements(shape)) {
      throw ShapeError("node value size " + std::to_string(value.size()) +
                       " does not match shape " + ShapeString(shape));
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = rg;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_ids_;
  std::uint64_t macs_ = 0;
};

namespace internal {

template <typename T>
Tape<T>& SameTape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands recorded on different tapes");
  return *a.tape();
}

inline void Require(bool cond, const std::string& op, const Shape& a, const Shape& b) {
  if (!cond) {
    throw ShapeError(op + ": incompatible shapes " + ShapeString(a) + " and " + ShapeString(b));
  }
}

// Broadcast between (R,C) and (R|1, C|1).
struct Broadcast {
  int rows, cols;
  int ar, ac, br, bc;
  Shape out;
};

inline Broadcast MakeBroadcast(const std::string& op, const Shape& a, const Shape& b) {
  auto [ar, ac] = Dims2(a);
  auto [br, bc] = Dims2(b);
  Require((ar == br || ar == 1 || br == 1) && (ac == bc || ac == 1 || bc == 1), op, a, b);
  Broadcast bc_{std::max(ar, br), std::max(ac, bc), ar, ac, br, bc, {}};
  if (a == b) {
    bc_.out = a;
  } else if (NumElements(a) >= NumElements(b) && ar == bc_.rows && ac == bc_.cols) {
    bc_.out = a;
  } else if (br == bc_.rows && bc == bc_.cols) {
    bc_.out = b;
  } else {
    bc_.out = {bc_.rows, bc_.cols};
  }
  return bc_;
}

template <typename T, typename F, typename DA, typename DB>
Var<T> Binary(const std::string& name, const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
  Tape<T>& tape = SameTape(a, b);
  const Broadcast br = MakeBroadcast(name, a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(static_cast<std::size_t>(br.rows) * br.cols);
  for (int r = 0; r < br.rows; ++r) {
    const std::size_t ra = static_cast<std::size_t>(br.ar == 1 ? 0 : r) * br.ac;
    const std::size_t rb = static_cast<std::size_t>(br.br == 1 ? 0 : r) * br.bc;
    for (int c = 0; c < br.cols; ++c) {
      out[static_cast<std::size_t>(r) * br.cols + c] =
          f(av[ra + (br.ac == 1 ? 0 : c)], bv[rb + (br.bc == 1 ? 0 : c)]);
    }
  }
  const int aid = a.id(), bid = b.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record(br.out, std::move(out), {a, b}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& an = t.node(aid);
    auto& bn = t.node(bid);
    for (int r = 0; r < br.rows; ++r) {
      const std::size_t ra = static_cast<std::size_t>(br.ar == 1 ? 0 : r) * br.ac;
      const std::size_t rb = static_cast<std::size_t>(br.br == 1 ? 0 : r) * br.bc;
      for (int c = 0; c < br.cols; ++c) {
        const std::size_t ia = ra + (br.ac == 1 ? 0 : c);
        const std::size_t ib = rb + (br.bc == 1 ? 0 : c);
        const std::size_t io = static_cast<std::size_t>(r) * br.cols + c;
        const T g = o.grad[io];
        if (an.requires_grad) an.grad[ia] += g * da(an.value[ia], bn.value[ib], o.value[io]);
        if (bn.requires_grad) bn.grad[ib] += g * db(an.value[ia], bn.value[ib], o.value[io]);
      }
    }
  });
}

template <typename T, typename F, typename D>
Var<T> Unary(const Var<T>& x, F f, D d) {
  Tape<T>& tape = *x.tape();
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record(x.shape(), std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      xn.grad[i] += o.grad[i] * d(xn.value[i], o.value[i]);
    }
  });
}

// Dot product with four independent partial sums so the loop vectorizes
// without reassociation flags. Summation order is fixed, so results are
// still deterministic.
template <typename T>
inline T Dot(const T* a, const T* b, int n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace internal

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with row/column/scalar broadcasting).

template <typename T>
Var<T> Add(const Var<T>& a, const Var<T>& b) {
  return internal::Binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> Sub(const Var<T>& a, const Var<T>& b) {
  return internal::Binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> Mul(const Var<T>& a, const Var<T>& b) {
  return internal::Binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Var<T> Div(const Var<T>& a, const Var<T>& b) {
  return internal::Binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Var<T> Minimum(const Var<T>& a, const Var<T>& b) {
  return internal::Binary<T>(
      "minimum", a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y, T) { return x <= y ? T(1) : T(0); },
      [](T x, T y, T) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Var<T> Maximum(const Var<T>& a, const Var<T>& b) {
  return internal::Binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Var<T> Scale(const Var<T>& x, T s) {
  return internal::Unary<T>(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> AddScalar(const Var<T>& x, T s) {
  return internal::Unary<T>(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> Neg(const Var<T>& x) {
  return Scale(x, T(-1));
}

template <typename T>
Var<T> Exp(const Var<T>& x) {
  return internal::Unary<T>(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> Log(const Var<T>& x) {
  return internal::Unary<T>(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> Sigmoid(const Var<T>& x) {
  return internal::Unary<T>(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> Relu(const Var<T>& x) {
  return internal::Unary<T>(
      x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

// Exact (erf based) GELU.
template <typename T>
Var<T> Gelu(const Var<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return internal::Unary<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-T(0.5) * v * v);
      });
}

template <typename T>
Var<T> Abs(const Var<T>& x) {
  return internal::Unary<T>(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

// x^p for x >= 0.
template <typename T>
Var<T> Pow(const Var<T>& x, T p) {
  return internal::Unary<T>(
      x, [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return v > 0 ? p * std::pow(v, p - T(1)) : T(0); });
}

template <typename T>
Var<T> Clamp(const Var<T>& x, T lo, T hi) {
  return internal::Unary<T>(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// Replaces entries where mask != 0 with `fill`; those entries receive no gradient.
template <typename T>
Var<T> MaskedFill(const Var<T>& x, const std::vector<std::uint8_t>& mask, T fill) {
  if (mask.size() != x.size()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) +
                     " entries for shape " + ShapeString(x.shape()));
  }
  Tape<T>& tape = *x.tape();
  std::vector<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = fill;
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record(x.shape(), std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (!mask[i]) xn.grad[i] += o.grad[i];
  });
}

template <typename T>
Var<T> Detach(const Var<T>& x) {
  return x.tape()->Constant(x.shape(), x.value());
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Var<T> Sum(const Var<T>& x) {
  Tape<T>& tape = *x.tape();
  T s = 0;
  for (T v : x.value()) s += v;
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({}, {s}, {x}, [=](Tape<T>& t) {
    const T g = t.node(oid).grad[0];
    for (auto& gx : t.node(xid).grad) gx += g;
  });
}

template <typename T>
Var<T> Mean(const Var<T>& x) {
  return Scale(Sum(x), T(1) / static_cast<T>(x.size()));
}

// Sum over the last axis: (R, C) -> (R, 1).
template <typename T>
Var<T> RowSum(const Var<T>& x) {
  Tape<T>& tape = *x.tape();
  const int R = x.rows(), C = x.cols();
  const auto& xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(R), T(0));
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[r] += xv[static_cast<std::size_t>(r) * C + c];
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({R, 1}, std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) xn.grad[static_cast<std::size_t>(r) * C + c] += o.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Var<T> Reshape(const Var<T>& x, Shape shape) {
  if (NumElements(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + ShapeString(x.shape()) + " as " + ShapeString(shape));
  }
  Tape<T>& tape = *x.tape();
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record(std::move(shape), x.value(), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn.grad[i] += o.grad[i];
  });
}

template <typename T>
Var<T> Transpose(const Var<T>& x) {
  Tape<T>& tape = *x.tape();
  const int R = x.rows(), C = x.cols();
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<std::size_t>(c) * R + r] = xv[static_cast<std::size_t>(r) * C + c];
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({C, R}, std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c)
        xn.grad[static_cast<std::size_t>(r) * C + c] += o.grad[static_cast<std::size_t>(c) * R + r];
  });
}

// Stacks (R_i, C) blocks along rows.
template <typename T>
Var<T> ConcatRows(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: no inputs");
  Tape<T>& tape = *xs.front().tape();
  const int C = xs.front().cols();
  int R = 0;
  std::vector<int> ids, offsets;
  for (const auto& x : xs) {
    internal::Require(x.cols() == C, "concat_rows", xs.front().shape(), x.shape());
    ids.push_back(x.id());
    offsets.push_back(R);
    R += x.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(R) * C);
  for (const auto& x : xs) out.insert(out.end(), x.value().begin(), x.value().end());
  const int oid = static_cast<int>(tape.size());
  return tape.Record({R, C}, std::move(out), xs, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto& xn = t.node(ids[k]);
      if (!xn.requires_grad) continue;
      const std::size_t base = static_cast<std::size_t>(offsets[k]) * C;
      for (std::size_t i = 0; i < xn.grad.size(); ++i) xn.grad[i] += o.grad[base + i];
    }
  });
}

// Joins (R, C_i) blocks along columns.
template <typename T>
Var<T> ConcatCols(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  Tape<T>& tape = *xs.front().tape();
  const int R = xs.front().rows();
  int C = 0;
  std::vector<int> ids, offsets, widths;
  for (const auto& x : xs) {
    internal::Require(x.rows() == R, "concat_cols", xs.front().shape(), x.shape());
    ids.push_back(x.id());
    offsets.push_back(C);
    widths.push_back(x.cols());
    C += x.cols();
  }
  std::vector<T> out(static_cast<std::size_t>(R) * C);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].value();
    for (int r = 0; r < R; ++r)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r) * widths[k], widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r) * C + offsets[k]);
  }
  const int oid = static_cast<int>(tape.size());
  return tape.Record({R, C}, std::move(out), xs, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto& xn = t.node(ids[k]);
      if (!xn.requires_grad) continue;
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < widths[k]; ++c)
          xn.grad[static_cast<std::size_t>(r) * widths[k] + c] +=
              o.grad[static_cast<std::size_t>(r) * C + offsets[k] + c];
    }
  });
}

template <typename T>
Var<T> SliceCols(const Var<T>& x, int begin, int end) {
  const int R = x.rows(), C = x.cols();
  if (begin < 0 || end > C || begin >= end) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of shape " + ShapeString(x.shape()));
  }
  Tape<T>& tape = *x.tape();
  const int W = end - begin;
  const auto& xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(R) * W);
  for (int r = 0; r < R; ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(r) * C + begin, W,
                out.begin() + static_cast<std::ptrdiff_t>(r) * W);
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({R, W}, std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < W; ++c)
        xn.grad[static_cast<std::size_t>(r) * C + begin + c] += o.grad[static_cast<std::size_t>(r) * W + c];
  });
}

// Selects rows by index (indices may repeat).
template <typename T>
Var<T> GatherRows(const Var<T>& x, const std::vector<int>& index) {
  const int R = x.rows(), C = x.cols();
  for (int i : index) {
    if (i < 0 || i >= R) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of shape " +
                       ShapeString(x.shape()));
    }
  }
  Tape<T>& tape = *x.tape();
  const auto& xv = x.value();
  const int N = static_cast<int>(index.size());
  std::vector<T> out(static_cast<std::size_t>(N) * C);
  for (int k = 0; k < N; ++k)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[k]) * C, C,
                out.begin() + static_cast<std::ptrdiff_t>(k) * C);
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({N, C}, std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (int k = 0; k < N; ++k)
      for (int c = 0; c < C; ++c)
        xn.grad[static_cast<std::size_t>(index[k]) * C + c] += o.grad[static_cast<std::size_t>(k) * C + c];
  });
}

template <typename T>
Var<T> SliceRows(const Var<T>& x, int begin, int end) {
  if (begin < 0 || end > x.rows() || begin >= end) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of shape " + ShapeString(x.shape()));
  }
  std::vector<int> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return GatherRows(x, idx);
}

// Places row k of x at row index[k] of an otherwise zero (n_rows, C) array.
template <typename T>
Var<T> ScatterRows(const Var<T>& x, const std::vector<int>& index, int n_rows) {
  const int C = x.cols();
  if (static_cast<int>(index.size()) != x.rows()) {
    throw ShapeError("scatter_rows: " + std::to_string(index.size()) + " indices for shape " +
                     ShapeString(x.shape()));
  }
  Tape<T>& tape = *x.tape();
  const auto& xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(n_rows) * C, T(0));
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= n_rows) throw ShapeError("scatter_rows: index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(k) * C, C,
                out.begin() + static_cast<std::ptrdiff_t>(index[k]) * C);
  }
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({n_rows, C}, std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (std::size_t k = 0; k < index.size(); ++k)
      for (int c = 0; c < C; ++c)
        xn.grad[k * C + c] += o.grad[static_cast<std::size_t>(index[k]) * C + c];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

// (M, K) x (K, N) -> (M, N)
template <typename T>
Var<T> Matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = internal::SameTape(a, b);
  const int M = a.rows(), K = a.cols(), N = b.cols();
  internal::Require(b.rows() == K, "matmul", a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(static_cast<std::size_t>(M) * N, T(0));
  for (int i = 0; i < M; ++i) {
    T* o = out.data() + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const T s = av[static_cast<std::size_t>(i) * K + k];
      const T* brow = bv.data() + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) o[j] += s * brow[j];
    }
  }
  tape.AddMacs(static_cast<std::uint64_t>(M) * K * N);
  const int aid = a.id(), bid = b.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({M, N}, std::move(out), {a, b}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& an = t.node(aid);
    auto& bn = t.node(bid);
    if (an.requires_grad) {
      for (int i = 0; i < M; ++i) {
        const T* g = o.grad.data() + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
          const T* brow = bn.value.data() + static_cast<std::size_t>(k) * N;
          an.grad[static_cast<std::size_t>(i) * K + k] += internal::Dot(g, brow, N);
        }
      }
    }
    if (bn.requires_grad) {
      for (int i = 0; i < M; ++i) {
        const T* g = o.grad.data() + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
          const T s = an.value[static_cast<std::size_t>(i) * K + k];
          T* gb = bn.grad.data() + static_cast<std::size_t>(k) * N;
          for (int j = 0; j < N; ++j) gb[j] += s * g[j];
        }
      }
    }
  });
}

// (M, K) x (N, K)^T -> (M, N)
template <typename T>
Var<T> MatmulNT(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = internal::SameTape(a, b);
  const int M = a.rows(), K = a.cols(), N = b.rows();
  internal::Require(b.cols() == K, "matmul_nt", a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(static_cast<std::size_t>(M) * N);
  for (int i = 0; i < M; ++i) {
    const T* ar = av.data() + static_cast<std::size_t>(i) * K;
    for (int j = 0; j < N; ++j) {
      const T* br = bv.data() + static_cast<std::size_t>(j) * K;
      out[static_cast<std::size_t>(i) * N + j] = internal::Dot(ar, br, K);
    }
  }
  tape.AddMacs(static_cast<std::uint64_t>(M) * K * N);
  const int aid = a.id(), bid = b.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({M, N}, std::move(out), {a, b}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& an = t.node(aid);
    auto& bn = t.node(bid);
    for (int i = 0; i < M; ++i) {
      for (int j = 0; j < N; ++j) {
        const T g = o.grad[static_cast<std::size_t>(i) * N + j];
        if (g == T(0)) continue;
        if (an.requires_grad) {
          T* ga = an.grad.data() + static_cast<std::size_t>(i) * K;
          const T* br = bn.value.data() + static_cast<std::size_t>(j) * K;
          for (int k = 0; k < K; ++k) ga[k] += g * br[k];
        }
        if (bn.requires_grad) {
          T* gb = bn.grad.data() + static_cast<std::size_t>(j) * K;
          const T* ar = an.value.data() + static_cast<std::size_t>(i) * K;
          for (int k = 0; k < K; ++k) gb[k] += g * ar[k];
        }
      }
    }
  });
}

// x W + b with W of shape (in, out) and b of shape (out).
template <typename T>
Var<T> Linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tape<T>& tape = internal::SameTape(x, w);
  const int M = x.rows(), K = x.cols(), N = w.cols();
  internal::Require(w.rows() == K, "linear", x.shape(), w.shape());
  internal::Require(static_cast<int>(b.size()) == N, "linear bias", w.shape(), b.shape());
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  std::vector<T> out(static_cast<std::size_t>(M) * N);
  for (int i = 0; i < M; ++i) {
    T* o = out.data() + static_cast<std::size_t>(i) * N;
    std::copy(bv.begin(), bv.end(), o);
    for (int k = 0; k < K; ++k) {
      const T s = xv[static_cast<std::size_t>(i) * K + k];
      const T* wr = wv.data() + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) o[j] += s * wr[j];
    }
  }
  tape.AddMacs(static_cast<std::uint64_t>(M) * K * N);
  const int xid = x.id(), wid = w.id(), bid = b.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record({M, N}, std::move(out), {x, w, b}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    auto& wn = t.node(wid);
    auto& bn = t.node(bid);
    for (int i = 0; i < M; ++i) {
      const T* g = o.grad.data() + static_cast<std::size_t>(i) * N;
      if (bn.requires_grad)
        for (int j = 0; j < N; ++j) bn.grad[j] += g[j];
      for (int k = 0; k < K; ++k) {
        const T* wr = wn.value.data() + static_cast<std::size_t>(k) * N;
        if (xn.requires_grad) {
          xn.grad[static_cast<std::size_t>(i) * K + k] += internal::Dot(g, wr, N);
        }
        if (wn.requires_grad) {
          const T xs = xn.value[static_cast<std::size_t>(i) * K + k];
          T* gw = wn.grad.data() + static_cast<std::size_t>(k) * N;
          for (int j = 0; j < N; ++j) gw[j] += xs * g[j];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives.

// Softmax along `axis` (0 = down columns, 1 = along rows).
template <typename T>
Var<T> Softmax(const Var<T>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  Tape<T>& tape = *x.tape();
  const int R = x.rows(), C = x.cols();
  const int outer = axis == 1 ? R : C, inner = axis == 1 ? C : R;
  const std::size_t so = axis == 1 ? C : 1, si = axis == 1 ? 1 : C;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (int a = 0; a < outer; ++a) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int b = 0; b < inner; ++b) mx = std::max(mx, xv[a * so + b * si]);
    T s = 0;
    for (int b = 0; b < inner; ++b) s += (out[a * so + b * si] = std::exp(xv[a * so + b * si] - mx));
    for (int b = 0; b < inner; ++b) out[a * so + b * si] /= s;
  }
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record(x.shape(), std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (int a = 0; a < outer; ++a) {
      T dot = 0;
      for (int b = 0; b < inner; ++b) dot += o.grad[a * so + b * si] * o.value[a * so + b * si];
      for (int b = 0; b < inner; ++b) {
        const std::size_t i = a * so + b * si;
        xn.grad[i] += o.value[i] * (o.grad[i] - dot);
      }
    }
  });
}

// Row softmax restricted to entries with allowed != 0. Blocked entries get
// weight exactly 0; a row with nothing allowed is all zeros.
template <typename T>
Var<T> MaskedSoftmaxRows(const Var<T>& x, const std::vector<std::uint8_t>& allowed) {
  if (allowed.size() != x.size()) {
    throw ShapeError("masked_softmax: mask of " + std::to_string(allowed.size()) +
                     " entries for shape " + ShapeString(x.shape()));
  }
  Tape<T>& tape = *x.tape();
  const int R = x.rows(), C = x.cols();
  const auto& xv = x.value();
  std::vector<T> out(xv.size(), T(0));
  for (int r = 0; r < R; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * C;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < C; ++c)
      if (allowed[base + c]) mx = std::max(mx, xv[base + c]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T s = 0;
    for (int c = 0; c < C; ++c)
      if (allowed[base + c]) s += (out[base + c] = std::exp(xv[base + c] - mx));
    for (int c = 0; c < C; ++c) out[base + c] /= s;
  }
  const int xid = x.id();
  const int oid = static_cast<int>(tape.size());
  return tape.Record(x.shape(), std::move(out), {x}, [=](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    for (int r = 0; r < R; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * C;
      T dot = 0;
      for (int c = 0; c < C; ++c) dot += o.grad[base + c] * o.value[base + c];
      for (int c = 0; c < C; ++c) xn.grad[base + c] += o.value[base + c] * (o.grad[base + c] - dot);
    }
  });
}

// Row-wise layer normalization; gamma and beta (shape (C)) are optional.
template <typename T>
Var<T> LayerNorm(const Var<T>& x, const Var<T>& gamma = {}, const Var<T>& beta = {},
                 T eps = T(1e-5)) {
  Tape<T>& tape = *x.tape();
  const int R = x.rows(), C = x.cols();
  const bool affine = gamma.valid();
  if (affine && (static_cast<int>(gamma.size()) != C || static_cast<int>(beta.size()) != C)) {
    throw ShapeError("layer_norm: affine shape " + ShapeString(gamma.shape()) + " for input " +
                     ShapeString(x.shape()));
  }
  const auto& xv = x.value();
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    const T* row = xv.data() + static_cast<std::size_t>(r) * C;
    T mean = 0;
    for (int c = 0; c < C; ++c) mean += row[c];
    mean /= C;
    T var = 0;
    for (int c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= C;
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < C; ++c) xhat[static_cast<std::size_t>(r) * C + c] = (row[c] - mean) * inv_std[r];
  }
  std::vector<T> out = xhat;
  if (affine) {
    const auto& g = gamma.value();
    const auto& b = beta.value();
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        T& v = out[static_cast<std::size_t>(r) * C + c];
        v = v * g[c] + b[c];
      }
  }
  const int xid = x.id();
  const int gid = affine ? gamma.id() : -1, bid = affine ? beta.id() : -1;
  const int oid = static_cast<int>(tape.size());
  std::vector<Var<T>> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  return tape.Record(x.shape(), std::move(out), inputs,
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t) {
    auto& o = t.node(oid);
    auto& xn = t.node(xid);
    std::vector<T> dxhat(static_cast<std::size_t>(C));
    for (int r = 0; r < R; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * C;
      for (int c = 0; c < C; ++c) {
        const T g = o.grad[base + c];
        if (affine) {
          auto& gn = t.node(gid);
          auto& bn = t.node(bid);
          if (gn.requires_grad) gn.grad[c] += g * xhat[base + c];
          if (bn.requires_grad) bn.grad[c] += g;
          dxhat[c] = g * gn.value[c];
        } else {
          dxhat[c] = g;
        }
      }
      if (!xn.requires_grad) continue;
      T m1 = 0, m2 = 0;
      for (int c = 0; c < C; ++c) {
        m1 += dxhat[c];
        m2 += dxhat[c] * xhat[base + c];
      }
      m1 /= C;
      m2 /= C;
      for (int c = 0; c < C; ++c) xn.grad[base + c] += inv_std[r] * (dxhat[c] - m1 - xhat[base + c] * m2);
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient checking.

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  bool finite = true;
  std::size_t bad_index = 0;  // first non-finite entry when !finite
  std::size_t checked = 0;
  std::string worst_name;     // parameter holding worst_index, when checking parameters
  double worst_analytic = 0;
  double worst_numeric = 0;

  bool Passed(double tol) const { return finite && max_rel_error < tol; }
};

inline double RelError(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
}

// Central difference of g around 0 with step h. The 4-point stencil is
// fourth-order accurate; it allows larger steps, which keeps round-off low
// where the true derivative is (near) zero.
template <typename G>
double CentralDifference(const G& g, double h, int points) {
  if (points == 4) return (g(-2 * h) - 8 * g(-h) + 8 * g(h) - g(2 * h)) / (12 * h);
  return (g(h) - g(-h)) / (2 * h);
}

// 4-point estimate confirmed at a 10x smaller step. While the two disagree
// (a kink or jump lies within the stencil) the step keeps shrinking, down to
// h / 1e4. Other point counts use the plain central difference.
template <typename G>
double NumericDerivative(const G& g, double h, int points) {
  if (points != 4) return CentralDifference(g, h, points);
  const double f0 = std::abs(g(0.0));
  double prev = CentralDifference(g, h, 4);
  for (int k = 0; k < 4; ++k) {
    h /= 10;
    const double cur = CentralDifference(g, h, 4);
    const double noise = 1e3 * std::numeric_limits<double>::epsilon() * (f0 + 1.0) / h;
    if (std::abs(cur - prev) <= 1e-6 * (std::abs(cur) + std::abs(prev)) + noise) return prev;
    prev = cur;
  }
  return prev;
}

template <typename T>
GradCheckResult GradCheck(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f,
                          const Tensor<T>& x, T eps = T(1e-5), int points = 2) {
  GradCheckResult res;
  std::vector<T> analytic;
  {
    Tape<T> tape;
    Var<T> xv = tape.Leaf(x, true);
    Var<T> y = f(tape, xv);
    tape.Backward(y);
    analytic = xv.grad();
    if (!std::isfinite(static_cast<double>(y.item()))) {
      res.finite = false;
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (!std::isfinite(static_cast<double>(analytic[i]))) {
          res.bad_index = i;
          break;
        }
      }
      return res;
    }
  }
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T x0 = x.data[i];
    const double numeric = NumericDerivative(
        [&](double d) {
          probe.data[i] = x0 + static_cast<T>(d);
          Tape<T> tape;
          Var<T> xv = tape.Leaf(probe, false);
          return static_cast<double>(f(tape, xv).item());
        },
        static_cast<double>(eps), points);
    probe.data[i] = x0;
    if (!std::isfinite(numeric) || !std::isfinite(static_cast<double>(analytic[i]))) {
      res.finite = false;
      res.bad_index = i;
      return res;
    }
    const double err = RelError(static_cast<double>(analytic[i]), numeric);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
    ++res.checked;
  }
  return res;
}

// Same check against the gradients of a set of parameters. At most
// `max_per_param` randomly chosen entries of each parameter are probed.
template <typename T>
GradCheckResult GradCheckParams(const std::function<Var<T>(Tape<T>&)>& f,
                                const std::vector<Parameter<T>*>& params, T eps = T(1e-5),
                                std::size_t max_per_param = 8, std::uint64_t seed = 0,
                                int points = 2) {
  GradCheckResult res;
  for (auto* p : params) p->ZeroGrad();
  {
    Tape<T> tape;
    Var<T> y = f(tape);
    if (!std::isfinite(static_cast<double>(y.item()))) {
      res.finite = false;
      return res;
    }
    tape.Backward(y);
  }
  std::mt19937_64 rng(seed);
  std::size_t flat = 0;
  for (auto* p : params) {
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() > max_per_param) idx.resize(max_per_param);
    for (std::size_t i : idx) {
      const T x0 = p->value.data[i];
      const double numeric = NumericDerivative(
          [&](double d) {
            p->value.data[i] = x0 + static_cast<T>(d);
            Tape<T> tape;
            return static_cast<double>(f(tape).item());
          },
          static_cast<double>(eps), points);
      p->value.data[i] = x0;
      const double analytic = static_cast<double>(p->grad.data[i]);
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        res.finite = false;
        res.bad_index = flat + i;
        return res;
      }
      const double err = RelError(analytic, numeric);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_index = flat + i;
        res.worst_name = p->name;
        res.worst_analytic = analytic;
        res.worst_numeric = numeric;
      }
      ++res.checked;
    }
    flat += p->value.size();
  }
  for (auto* p : params) p->ZeroGrad();
  return res;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct StepStatus {
  bool applied = true;
  std::string offending;  // parameter holding a non-finite gradient
};

// One AdamW update of a single parameter at (1-based) step t.
template <typename T>
void AdamWUpdate(Parameter<T>& p, double lr, const AdamWConfig& cfg, long t) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double decay = p.decay ? 1.0 - lr * cfg.weight_decay : 1.0;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = static_cast<double>(p.grad.data[i]);
    const double m = cfg.beta1 * static_cast<double>(p.m.data[i]) + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * static_cast<double>(p.v.data[i]) + (1.0 - cfg.beta2) * g * g;
    p.m.data[i] = static_cast<T>(m);
    p.v.data[i] = static_cast<T>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    const double x = static_cast<double>(p.value.data[i]) * decay;
    p.value.data[i] = static_cast<T>(x - lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Applies one step to every parameter, with a per-parameter learning rate.
  // If any gradient is non-finite nothing is modified.
  StepStatus Step(const std::vector<Parameter<T>*>& params,
                  const std::function<double(const Parameter<T>&)>& lr_for) {
    for (auto* p : params) {
      for (T g : p->grad.data) {
        if (!std::isfinite(static_cast<double>(g))) return {false, p->name};
      }
    }
    ++t_;
    for (auto* p : params) AdamWUpdate(*p, lr_for(*p), cfg_, t_);
    return {};
  }

  long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
};

}  // namespace detrack::ad

#endif  // DETRACK_AUTODIFF_HPP_
