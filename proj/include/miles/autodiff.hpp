#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Tape records every primitive op in execution order. Leaves are either
// constants or Parameters; backward() walks the records once in reverse and
// accumulates dLoss/dLeaf into each Parameter's grad buffer. A tape built with
// recording disabled evaluates the same ops without keeping any gradient
// closures, which is how gradient-free forwards (snapshot, evaluation) run.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "miles/errors.hpp"
#include "miles/tensor.hpp"

namespace miles {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a backward pass reaches this parameter

  bool has_grad() const noexcept { return !grad.empty(); }
  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const { return tape_->value_of(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    ensure_live();
    nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Registers a parameter as a leaf. On a non-recording tape the parameter
  /// is read as a constant and can never receive a gradient.
  Var<T> leaf(Parameter<T>& p) {
    ensure_live();
    nodes_.push_back(Node{p.value, {}, recording_, {}, recording_ ? &p : nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs, Backward fn) {
    ensure_live();
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    bool needs = false;
    for (const auto& v : inputs) {
      if (v.tape_ != this) throw ContractError(std::string(op) + ": operands live on different tapes");
      needs = needs || nodes_[v.id_].requires_grad;
    }
    needs = needs && recording_;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : Backward{}, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Gradient accumulator for `v`, or nullptr when `v` needs no gradient.
  Tensor<T>* grad_sink(const Var<T>& v) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
    return &n.grad;
  }

  /// Propagates dLoss/d(.) to every parameter leaf, then releases the tape.
  void backward(const Var<T>& loss) {
    ensure_live();
    if (loss.tape_ != this) throw ContractError("backward: loss lives on a different tape");
    Node& root = nodes_[loss.id_];
    if (root.value.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    if (root.requires_grad) {
      root.grad = Tensor<T>(root.value.shape(), T{1});
      for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.param != nullptr) {
          Parameter<T>& p = *n.param;
          if (p.grad.empty()) {
            p.grad = std::move(n.grad);
          } else {
            for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
          }
        } else if (n.backward) {
          n.backward(*this, n.grad);
        }
      }
    }
    consumed_ = true;
    nodes_.clear();
  }

  const Tensor<T>& value_of(std::size_t id) const {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    return nodes_[id].value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  friend class Var<T>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  void ensure_live() const {
    if (consumed_) throw ContractError("tape already consumed by backward()");
  }

  std::deque<Node> nodes_;
  bool recording_;
  bool consumed_ = false;
};

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || db == 1) {
      out[i] = da;
    } else if (da == 1) {
      out[i] = db;
    } else {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  return out;
}

inline std::vector<std::size_t> aligned_strides(const Shape& s, const Shape& out) {
  const std::size_t off = out.size() - s.size();
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    if (s[i] != 1) strides[i + off] = stride;
    stride *= s[i];
  }
  return strides;
}

// True when `s` (ignoring leading unit axes) equals the trailing axes of `out`.
inline bool is_suffix(const Shape& s, const Shape& out) {
  std::size_t lead = 0;
  while (lead < s.size() && s[lead] == 1) ++lead;
  const std::size_t n = s.size() - lead;
  if (n > out.size()) return false;
  return std::equal(s.begin() + static_cast<std::ptrdiff_t>(lead), s.end(),
                    out.end() - static_cast<std::ptrdiff_t>(n));
}

// Calls f(i, ia, ib) for every flat output index i with the matching flat
// offsets into the two broadcast operands.
template <typename F>
void broadcast_loop(const Shape& out, const Shape& as, const Shape& bs, F&& f) {
  const std::size_t n = shape_numel(out);
  if (n == 0) return;
  if (as == out && bs == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (as == out && is_suffix(bs, out)) {
    const std::size_t nb = shape_numel(bs);
    for (std::size_t o = 0, i = 0; o < n / nb; ++o) {
      for (std::size_t j = 0; j < nb; ++j, ++i) f(i, i, j);
    }
    return;
  }
  if (bs == out && is_suffix(as, out)) {
    const std::size_t na = shape_numel(as);
    for (std::size_t o = 0, i = 0; o < n / na; ++o) {
      for (std::size_t j = 0; j < na; ++j, ++i) f(i, j, i);
    }
    return;
  }
  const auto sa = aligned_strides(as, out);
  const auto sb = aligned_strides(bs, out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// C(n x m) += A(n x k) * B(k x m)
template <typename T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(n x m) += A(n x k) * B(m x k)^T. B is transposed into a scratch buffer
// first so the inner loop is a contiguous axpy rather than a dot product.
template <typename T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  thread_local std::vector<T> bt;
  bt.resize(k * m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  }
  gemm_nn(n, k, m, a, bt.data(), c);
}

// C(n x m) += A(k x n)^T * B(k x m)
template <typename T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = a[p * n + i];
      T* crow = c + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::size_t normalize_axis(long long axis, std::size_t rank, const char* op) {
  const long long r = static_cast<long long>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "add");
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  const Shape out_shape = detail::broadcast_shape(A.shape(), B.shape());
  Tensor<T> out(out_shape);
  detail::broadcast_loop(out_shape, A.shape(), B.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] + B[ib]; });
  return a.tape().record("add", std::move(out), {a, b}, [a, b, out_shape](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* ga = tape.grad_sink(a);
    Tensor<T>* gb = tape.grad_sink(b);
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    detail::broadcast_loop(out_shape, as, bs, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i];
      if (gb) (*gb)[ib] += g[i];
    });
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "sub");
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  const Shape out_shape = detail::broadcast_shape(A.shape(), B.shape());
  Tensor<T> out(out_shape);
  detail::broadcast_loop(out_shape, A.shape(), B.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] - B[ib]; });
  return a.tape().record("sub", std::move(out), {a, b}, [a, b, out_shape](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* ga = tape.grad_sink(a);
    Tensor<T>* gb = tape.grad_sink(b);
    detail::broadcast_loop(out_shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i];
      if (gb) (*gb)[ib] -= g[i];
    });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "mul");
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  const Shape out_shape = detail::broadcast_shape(A.shape(), B.shape());
  Tensor<T> out(out_shape);
  detail::broadcast_loop(out_shape, A.shape(), B.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] * B[ib]; });
  return a.tape().record("mul", std::move(out), {a, b}, [a, b, out_shape](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* ga = tape.grad_sink(a);
    Tensor<T>* gb = tape.grad_sink(b);
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    detail::broadcast_loop(out_shape, A.shape(), B.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i] * B[ib];
      if (gb) (*gb)[ib] += g[i] * A[ia];
    });
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= s;
  return x.tape().record("scale", std::move(out), {x}, [x, s](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout.

/// 2-D (n,k)x(k,m) or batched 3-D (G,n,k)x(G,k,m) product. With
/// `transpose_b` the right operand is read as (m,k) / (G,m,k).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  detail::check_same_tape(a, b, "matmul");
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  std::size_t batch = 1;
  if (A.rank() == 3 && B.rank() == 3) {
    if (A.dim(0) != B.dim(0)) {
      throw DimensionError("matmul: batch extents differ " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    }
    batch = A.dim(0);
  } else if (!(A.rank() == 2 && B.rank() == 2)) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  }
  const std::size_t r = A.rank();
  const std::size_t n = A.dim(r - 2);
  const std::size_t k = A.dim(r - 1);
  const std::size_t kb = transpose_b ? B.dim(r - 1) : B.dim(r - 2);
  const std::size_t m = transpose_b ? B.dim(r - 2) : B.dim(r - 1);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()) + (transpose_b ? "^T" : ""));
  }
  Shape out_shape = r == 3 ? Shape{batch, n, m} : Shape{n, m};
  Tensor<T> out(out_shape, T{0});
  for (std::size_t g = 0; g < batch; ++g) {
    const T* ap = A.raw() + g * n * k;
    const T* bp = B.raw() + g * k * m;
    T* cp = out.raw() + g * n * m;
    if (transpose_b) {
      detail::gemm_nt(n, k, m, ap, bp, cp);
    } else {
      detail::gemm_nn(n, k, m, ap, bp, cp);
    }
  }
  return a.tape().record("matmul", std::move(out), {a, b},
                         [a, b, batch, n, k, m, transpose_b](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>* ga = tape.grad_sink(a);
                           Tensor<T>* gb = tape.grad_sink(b);
                           const Tensor<T>& A = a.value();
                           const Tensor<T>& B = b.value();
                           for (std::size_t q = 0; q < batch; ++q) {
                             const T* gp = g.raw() + q * n * m;
                             const T* ap = A.raw() + q * n * k;
                             const T* bp = B.raw() + q * k * m;
                             if (ga) {
                               T* dap = ga->raw() + q * n * k;
                               if (transpose_b) {
                                 detail::gemm_nn(n, m, k, gp, bp, dap);
                               } else {
                                 detail::gemm_nt(n, m, k, gp, bp, dap);
                               }
                             }
                             if (gb) {
                               T* dbp = gb->raw() + q * k * m;
                               if (transpose_b) {
                                 detail::gemm_tn(m, n, k, gp, ap, dbp);
                               } else {
                                 detail::gemm_tn(k, n, m, ap, gp, dbp);
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  const Shape in_shape = x.shape();
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

namespace detail {

// Calls f(out_index, in_offset) for the axis permutation `axes` of `in`.
template <typename F>
void permute_loop(const Shape& in, const std::vector<std::size_t>& axes, F&& f) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    st[i] = in_strides[axes[i]];
  }
  const std::size_t n = shape_numel(in);
  if (n == 0) return;
  // Innermost axis handled as a tight loop.
  const std::size_t last = out[r - 1];
  const std::size_t last_stride = st[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; i += last) {
    for (std::size_t j = 0; j < last; ++j) f(i + j, off + j * last_stride);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      off += st[d];
      if (idx[d] < out[d]) break;
      off -= st[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) throw DimensionError("permute: axis list does not match rank");
  std::vector<bool> seen(axes.size(), false);
  for (auto a : axes) {
    if (a >= axes.size() || seen[a]) throw DimensionError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[axes[i]];
  Tensor<T> out(out_shape);
  const Tensor<T>& X = x.value();
  detail::permute_loop(in, axes, [&](std::size_t i, std::size_t src) { out[i] = X[src]; });
  return x.tape().record("permute", std::move(out), {x}, [x, axes](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(x)) {
      detail::permute_loop(x.shape(), axes, [&](std::size_t i, std::size_t src) { (*gx)[src] += g[i]; });
    }
  });
}

/// Swaps the last two axes.
template <typename T>
Var<T> transpose(const Var<T>& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw DimensionError("transpose needs rank >= 2");
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, std::move(axes));
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, long long axis_in) {
  if (xs.empty()) throw DimensionError("concat of nothing");
  const Shape& s0 = xs.front().shape();
  const std::size_t axis = detail::normalize_axis(axis_in, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    detail::check_same_tape(xs.front(), x, "concat");
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) throw DimensionError("concat: extent mismatch off the concat axis");
    }
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.dim(axis) * split.inner;
    const Tensor<T>& X = x.value();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(X.raw() + o * w, w, out.raw() + o * split.len * split.inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  const std::size_t row = split.len * split.inner;
  const std::size_t outer = split.outer;
  return xs.front().tape().record(
      "concat", std::move(out), std::span<const Var<T>>(xs), [xs, widths, row, outer](Tape<T>& tape, const Tensor<T>& g) {
        std::size_t off = 0;
        for (std::size_t q = 0; q < xs.size(); ++q) {
          const std::size_t w = widths[q];
          if (Tensor<T>* gx = tape.grad_sink(xs[q])) {
            for (std::size_t o = 0; o < outer; ++o) {
              const T* src = g.raw() + o * row + off;
              T* dst = gx->raw() + o * w;
              for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
            }
          }
          off += w;
        }
      });
}

template <typename T>
Var<T> slice(const Var<T>& x, long long axis_in, std::size_t begin, std::size_t end) {
  const Shape& in = x.shape();
  const std::size_t axis = detail::normalize_axis(axis_in, in.size(), "slice");
  if (begin > end || end > in[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside extent " + std::to_string(in[axis]));
  }
  const auto split = detail::split_at(in, axis);
  Shape out_shape = in;
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t w = (end - begin) * split.inner;
  const std::size_t row = split.len * split.inner;
  const std::size_t off = begin * split.inner;
  const Tensor<T>& X = x.value();
  for (std::size_t o = 0; o < split.outer; ++o) std::copy_n(X.raw() + o * row + off, w, out.raw() + o * w);
  const std::size_t outer = split.outer;
  return x.tape().record("slice", std::move(out), {x}, [x, w, row, off, outer](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(x)) {
      for (std::size_t o = 0; o < outer; ++o) {
        T* dst = gx->raw() + o * row + off;
        const T* src = g.raw() + o * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
      }
    }
  });
}

/// Selects rows (slices along axis 0) by index; repeated indices allowed.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> indices) {
  const Shape& in = x.shape();
  const std::size_t rows = in[0];
  const std::size_t w = shape_numel(in) / std::max<std::size_t>(rows, 1);
  for (auto i : indices) {
    if (i >= rows) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(rows));
  }
  Shape out_shape = in;
  out_shape[0] = indices.size();
  Tensor<T> out(out_shape);
  const Tensor<T>& X = x.value();
  for (std::size_t r = 0; r < indices.size(); ++r) std::copy_n(X.raw() + indices[r] * w, w, out.raw() + r * w);
  return x.tape().record("gather_rows", std::move(out), {x},
                         [x, indices = std::move(indices), w](Tape<T>& tape, const Tensor<T>& g) {
                           if (Tensor<T>* gx = tape.grad_sink(x)) {
                             for (std::size_t r = 0; r < indices.size(); ++r) {
                               T* dst = gx->raw() + indices[r] * w;
                               const T* src = g.raw() + r * w;
                               for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape().record("sum", Tensor<T>::scalar(s), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(x)) {
      for (auto& v : gx->data()) v += g[0];
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(n));
}

/// Sum along one axis; the axis is removed (rank-1 input gives shape {1}).
template <typename T>
Var<T> sum(const Var<T>& x, long long axis_in) {
  const Shape& in = x.shape();
  const std::size_t axis = detail::normalize_axis(axis_in, in.size(), "sum");
  const auto sp = detail::split_at(in, axis);
  Tensor<T> out(detail::drop_axis(in, axis), T{0});
  const Tensor<T>& X = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.len; ++j) {
      const T* src = X.raw() + (o * sp.len + j) * sp.inner;
      T* dst = out.raw() + o * sp.inner;
      for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += src[k];
    }
  }
  return x.tape().record("sum_axis", std::move(out), {x}, [x, sp](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* gx = tape.grad_sink(x)) {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t j = 0; j < sp.len; ++j) {
          T* dst = gx->raw() + (o * sp.len + j) * sp.inner;
          const T* src = g.raw() + o * sp.inner;
          for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += src[k];
        }
      }
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, long long axis_in) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "mean");
  const std::size_t n = x.dim(axis);
  if (n == 0) throw DimensionError("mean over an empty axis");
  return scale(sum(x, axis_in), T{1} / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Normalizations and nonlinearities.

template <typename T>
Var<T> softmax(const Var<T>& x, long long axis_in) {
  const Shape& in = x.shape();
  const std::size_t axis = detail::normalize_axis(axis_in, in.size(), "softmax");
  const auto sp = detail::split_at(in, axis);
  const Tensor<T>& X = x.value();
  Tensor<T> out(in);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.inner; ++k) {
      const std::size_t base = o * sp.len * sp.inner + k;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, X[base + j * sp.inner]);
      T z{0};
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T e = std::exp(X[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
    }
  }
  Tensor<T> y = out;
  return x.tape().record("softmax", std::move(out), {x}, [x, y = std::move(y), sp](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* gx = tape.grad_sink(x);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.inner; ++k) {
        const std::size_t base = o * sp.len * sp.inner + k;
        T dot{0};
        for (std::size_t j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t i = base + j * sp.inner;
          (*gx)[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, long long axis_in) {
  const Shape& in = x.shape();
  const std::size_t axis = detail::normalize_axis(axis_in, in.size(), "log_softmax");
  const auto sp = detail::split_at(in, axis);
  const Tensor<T>& X = x.value();
  Tensor<T> out(in);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.inner; ++k) {
      const std::size_t base = o * sp.len * sp.inner + k;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, X[base + j * sp.inner]);
      T z{0};
      for (std::size_t j = 0; j < sp.len; ++j) z += std::exp(X[base + j * sp.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] = X[base + j * sp.inner] - lse;
    }
  }
  Tensor<T> y = out;
  return x.tape().record("log_softmax", std::move(out), {x},
                         [x, y = std::move(y), sp](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>* gx = tape.grad_sink(x);
                           if (!gx) return;
                           for (std::size_t o = 0; o < sp.outer; ++o) {
                             for (std::size_t k = 0; k < sp.inner; ++k) {
                               const std::size_t base = o * sp.len * sp.inner + k;
                               T gs{0};
                               for (std::size_t j = 0; j < sp.len; ++j) gs += g[base + j * sp.inner];
                               for (std::size_t j = 0; j < sp.len; ++j) {
                                 const std::size_t i = base + j * sp.inner;
                                 (*gx)[i] += g[i] - std::exp(y[i]) * gs;
                               }
                             }
                           }
                         });
}

/// Normalizes over the last axis, then applies per-feature gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  detail::check_same_tape(x, gain, "layer_norm");
  detail::check_same_tape(x, bias, "layer_norm");
  const Shape& in = x.shape();
  const std::size_t d = in.back();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = shape_numel(in) / std::max<std::size_t>(d, 1);
  const Tensor<T>& X = x.value();
  const Tensor<T>& G = gain.value();
  const Tensor<T>& Bv = bias.value();
  Tensor<T> xhat(in);
  std::vector<T> rstd(rows);
  Tensor<T> out(in);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X.raw() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * G[j] + Bv[j];
    }
  }
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gx = tape.grad_sink(x);
        Tensor<T>* gg = tape.grad_sink(gain);
        Tensor<T>* gb = tape.grad_sink(bias);
        const Tensor<T>& G = gain.value();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.raw() + r * d;
          const T* hr = xhat.raw() + r * d;
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * hr[j];
          }
          if (gb) {
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
          }
          if (gx) {
            T m1{0};
            T m2{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = gr[j] * G[j];
              m1 += dh;
              m2 += dh * hr[j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            T* dst = gx->raw() + r * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += rstd[r] * (gr[j] * G[j] - m1 - hr[j] * m2);
          }
        }
      });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  const Tensor<T>& X = x.value();
  Tensor<T> out(X.shape());
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = T(0.5) * X[i] * (T{1} + std::erf(X[i] * inv_sqrt2));
  return x.tape().record("gelu", std::move(out), {x}, [x, inv_sqrt2](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* gx = tape.grad_sink(x);
    if (!gx) return;
    const Tensor<T>& X = x.value();
    const T inv_sqrt_2pi = T(0.39894228040143267794);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T v = X[i];
      const T cdf = T(0.5) * (T{1} + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

/// Scales each row (last axis) to unit Euclidean norm.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps = T(1e-12)) {
  const Shape& in = x.shape();
  const std::size_t d = in.back();
  const std::size_t rows = shape_numel(in) / std::max<std::size_t>(d, 1);
  const Tensor<T>& X = x.value();
  Tensor<T> out(in);
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += X[r * d + j] * X[r * d + j];
    const T nrm = std::max(std::sqrt(s), eps);
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = X[r * d + j] / nrm;
  }
  Tensor<T> y = out;
  return x.tape().record("l2_normalize", std::move(out), {x},
                         [x, y = std::move(y), norms = std::move(norms), rows, d](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>* gx = tape.grad_sink(x);
                           if (!gx) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                             T dot{0};
                             for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                             for (std::size_t j = 0; j < d; ++j) {
                               (*gx)[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                             }
                           }
                         });
}

/// Euclidean norm of each row (last axis); the last axis is removed.
template <typename T>
Var<T> row_norm(const Var<T>& x) {
  const Shape& in = x.shape();
  const std::size_t d = in.back();
  const std::size_t rows = shape_numel(in) / std::max<std::size_t>(d, 1);
  const Tensor<T>& X = x.value();
  Tensor<T> out(detail::drop_axis(in, in.size() - 1));
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += X[r * d + j] * X[r * d + j];
    out[r] = std::sqrt(s);
  }
  Tensor<T> n = out;
  return x.tape().record("row_norm", std::move(out), {x}, [x, n = std::move(n), rows, d](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* gx = tape.grad_sink(x);
    if (!gx) return;
    const Tensor<T>& X = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
      if (n[r] == T{0}) continue;  // subgradient 0 at the origin
      const T c = g[r] / n[r];
      for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += c * X[r * d + j];
    }
  });
}

/// y = x W + b for x of shape (rows, in), W (in, out), b (out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace miles
