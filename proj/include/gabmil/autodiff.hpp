#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gabmil/macs.hpp"
#include "gabmil/tensor.hpp"

namespace gabmil {

/// Trainable weight: value plus a gradient accumulator of identical shape.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(Tensor<T>::zeros(value.shape())) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Value {
 public:
  Value() = default;

  const Tensor<T>& tensor() const;
  const Shape& shape() const { return tensor().shape(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Value(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape: one per forward pass, recording ops in execution order.
/// backward() replays the records in reverse and pours leaf gradients into
/// their bound Parameters; the tape is then discarded.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  Value<T> leaf(Parameter<T>& p) {
    Value<T> v = push(p.value);
    nodes_[v.id()].bound = &p;
    return v;
  }

  Value<T> constant(Tensor<T> t) { return push(std::move(t)); }

  Value<T> push(Tensor<T> out) {
    nodes_.push_back(Node{std::move(out), Tensor<T>(), nullptr, nullptr});
    nodes_.back().grad = Tensor<T>::zeros(nodes_.back().value.shape());
    return Value<T>(this, nodes_.size() - 1);
  }

  void set_back(std::size_t id, BackFn fn) { nodes_[id].back = std::move(fn); }

  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  Tensor<T>& grad_of(std::size_t id) { return nodes_[id].grad; }

  /// Seeds the (scalar) root with gradient 1, runs recorded backward rules in
  /// reverse order, then accumulates leaf grads into their Parameters.
  void backward(const Value<T>& root) {
    if (&root.tape() != this) throw std::invalid_argument("backward: value from another tape");
    if (nodes_[root.id()].value.numel() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  shape_str(nodes_[root.id()].value.shape()));
    }
    nodes_[root.id()].grad[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back(*this);
    }
    for (Node& n : nodes_) {
      if (n.bound) {
        T* g = n.bound->grad.data();
        const T* src = n.grad.data();
        for (std::size_t k = 0; k < n.grad.numel(); ++k) g[k] += src[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackFn back;
    Parameter<T>* bound;
  };

  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Value<T>::tensor() const {
  return tape_->value_of(id_);
}

namespace detail {

// C[M,R] += A[M,K] * B[K,R]
template <typename T>
void gemm_acc_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t r) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      T aik = a[i * k + p];
      const T* brow = b + p * r;
      T* crow = c + i * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C[M,K] += A[M,R] * B[K,R]^T
template <typename T>
void gemm_acc_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t r, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * r;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * r;
      T acc = T(0);
      for (std::size_t j = 0; j < r; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[K,R] += A[M,K]^T * B[M,R]
template <typename T>
void gemm_acc_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t r) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * r;
    for (std::size_t p = 0; p < k; ++p) {
      T aik = arow[p];
      T* crow = c + p * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

/// True when `b` may broadcast onto `a`: equal shape, trailing suffix, or a
/// single element. Anything else is rejected.
inline bool broadcasts_onto(const Shape& b, const Shape& a) {
  if (shape_numel(b) == 1) return true;
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  }
  return true;
}

inline void require_same_tape(bool same, const char* op) {
  if (!same) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

/// Flat input offset for every flat output index of a permutation.
/// `axes[d]` names the input axis that output axis d takes.
inline std::vector<std::size_t> permute_offsets(const Shape& in_shape,
                                                const std::vector<std::size_t>& axes) {
  std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = in_shape[axes[d]];
  std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += idx[d] * in_strides[axes[d]];
    map[j] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

namespace ops {

template <typename T>
Value<T> matmul(Value<T> a, Value<T> b) {
  detail::require_same_tape(&a.tape() == &b.tape(), "matmul");
  const Tensor<T>& ta = a.tensor();
  const Tensor<T>& tb = b.tensor();
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(ta.shape()) + " vs " +
                                shape_str(tb.shape()));
  }
  std::size_t m = ta.dim(0), k = ta.dim(1), r = tb.dim(1);
  Tensor<T> out({m, r});
  detail::gemm_acc_nn(ta.data(), tb.data(), out.data(), m, k, r);
  macs::add(static_cast<std::uint64_t>(m) * k * r);
  Tape<T>& tp = a.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ia = a.id(), ib = b.id(), io = o.id();
  tp.set_back(io, [ia, ib, io, m, k, r](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    detail::gemm_acc_nt(g.data(), t.value_of(ib).data(), t.grad_of(ia).data(), m, r, k);
    detail::gemm_acc_tn(t.value_of(ia).data(), g.data(), t.grad_of(ib).data(), m, k, r);
  });
  return o;
}

namespace detail2 {

enum class BinKind { Add, Mul };

template <typename T>
Value<T> binary(BinKind kind, Value<T> a, Value<T> b) {
  const char* name = kind == BinKind::Add ? "add" : "mul";
  detail::require_same_tape(&a.tape() == &b.tape(), name);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool b_is_small = detail::broadcasts_onto(sb, sa);
  bool a_is_small = detail::broadcasts_onto(sa, sb);
  if (!b_is_small && !a_is_small) {
    throw std::invalid_argument(std::string(name) + ": shapes not broadcast-compatible: " +
                                shape_str(sa) + " vs " + shape_str(sb));
  }
  Value<T> big = b_is_small ? a : b;
  Value<T> small = b_is_small ? b : a;
  const Tensor<T>& tb_ = big.tensor();
  const Tensor<T>& ts_ = small.tensor();
  std::size_t n = tb_.numel(), sn = ts_.numel();
  Tensor<T> out(tb_.shape());
  const T* pb = tb_.data();
  const T* ps = ts_.data();
  T* po = out.data();
  if (kind == BinKind::Add) {
    for (std::size_t i = 0; i < n; ++i) po[i] = pb[i] + ps[i % sn];
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = pb[i] * ps[i % sn];
  }
  Tape<T>& tp = a.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ibig = big.id(), ismall = small.id(), io = o.id();
  tp.set_back(io, [kind, ibig, ismall, io, n, sn](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    Tensor<T>& gbig = t.grad_of(ibig);
    Tensor<T>& gsmall = t.grad_of(ismall);
    if (kind == BinKind::Add) {
      for (std::size_t i = 0; i < n; ++i) gbig[i] += g[i];
      for (std::size_t i = 0; i < n; ++i) gsmall[i % sn] += g[i];
    } else {
      const Tensor<T>& vbig = t.value_of(ibig);
      const Tensor<T>& vsmall = t.value_of(ismall);
      for (std::size_t i = 0; i < n; ++i) gbig[i] += g[i] * vsmall[i % sn];
      for (std::size_t i = 0; i < n; ++i) gsmall[i % sn] += g[i] * vbig[i];
    }
  });
  return o;
}

template <typename T, typename F, typename DF>
Value<T> unary(Value<T> x, F f, DF df) {
  const Tensor<T>& tx = x.tensor();
  Tensor<T> out(tx.shape());
  for (std::size_t i = 0; i < tx.numel(); ++i) out[i] = f(tx[i]);
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io, df](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    const Tensor<T>& vx = t.value_of(ix);
    const Tensor<T>& vy = t.value_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(vx[i], vy[i]);
  });
  return o;
}

}  // namespace detail2

template <typename T>
Value<T> add(Value<T> a, Value<T> b) {
  return detail2::binary(detail2::BinKind::Add, a, b);
}

template <typename T>
Value<T> mul(Value<T> a, Value<T> b) {
  return detail2::binary(detail2::BinKind::Mul, a, b);
}

template <typename T>
Value<T> add(Value<T> a, T c) {
  return add(a, a.tape().constant(Tensor<T>::scalar(c)));
}

template <typename T>
Value<T> mul(Value<T> a, T c) {
  return mul(a, a.tape().constant(Tensor<T>::scalar(c)));
}

template <typename T>
Value<T> tanh(Value<T> x) {
  return detail2::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Value<T> sigmoid(Value<T> x) {
  return detail2::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Subgradient at exactly 0 is 0.
template <typename T>
Value<T> relu(Value<T> x) {
  return detail2::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Max-subtracted softmax along `axis`.
template <typename T>
Value<T> softmax(Value<T> x, std::size_t axis) {
  const Tensor<T>& tx = x.tensor();
  if (axis >= tx.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(tx.shape()));
  }
  std::size_t len = tx.dim(axis);
  if (len == 0) throw std::invalid_argument("softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= tx.dim(d);
  for (std::size_t d = axis + 1; d < tx.rank(); ++d) inner *= tx.dim(d);

  Tensor<T> out(tx.shape());
  const T* px = tx.data();
  T* po = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * len * inner + in;
      T mx = px[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
      T sum = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        T e = std::exp(px[base + l * inner] - mx);
        po[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) po[base + l * inner] /= sum;
    }
  }
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io, outer, len, inner](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    const Tensor<T>& y = t.value_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t o_ = 0; o_ < outer; ++o_) {
      for (std::size_t in = 0; in < inner; ++in) {
        std::size_t base = o_ * len * inner + in;
        T dot = T(0);
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          std::size_t k = base + l * inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
  return o;
}

template <typename T>
Value<T> reshape(Value<T> x, Shape shape) {
  Tensor<T> out = x.tensor().reshaped(std::move(shape));
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
  return o;
}

template <typename T>
Value<T> permute(Value<T> x, std::vector<std::size_t> axes) {
  const Tensor<T>& tx = x.tensor();
  if (axes.size() != tx.rank()) {
    throw std::invalid_argument("permute: axis list size " + std::to_string(axes.size()) +
                                " does not match rank of " + shape_str(tx.shape()));
  }
  std::vector<bool> seen(axes.size(), false);
  for (std::size_t a : axes) {
    if (a >= axes.size() || seen[a]) throw std::invalid_argument("permute: invalid axis order");
    seen[a] = true;
  }
  Shape out_shape(tx.rank());
  for (std::size_t d = 0; d < tx.rank(); ++d) out_shape[d] = tx.dim(axes[d]);
  std::vector<std::size_t> map = detail::permute_offsets(tx.shape(), axes);
  Tensor<T> out(out_shape);
  for (std::size_t j = 0; j < map.size(); ++j) out[j] = tx[map[j]];
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io, map = std::move(map)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t j = 0; j < map.size(); ++j) gx[map[j]] += g[j];
  });
  return o;
}

template <typename T>
Value<T> transpose(Value<T> x) {
  return permute(x, {1, 0});
}

/// Zero-pads a [R,S,C] tensor at the bottom / right only.
template <typename T>
Value<T> pad2d(Value<T> x, std::size_t pad_rows, std::size_t pad_cols) {
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() != 3) {
    throw std::invalid_argument("pad2d: expected rank-3 grid, got " + shape_str(tx.shape()));
  }
  std::size_t r = tx.dim(0), s = tx.dim(1), c = tx.dim(2);
  std::size_t rp = r + pad_rows, sp = s + pad_cols;
  Tensor<T> out({rp, sp, c});
  for (std::size_t i = 0; i < r; ++i) {
    std::memcpy(out.data() + (i * sp) * c, tx.data() + (i * s) * c, s * c * sizeof(T));
  }
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io, r, s, c, sp](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        for (std::size_t k = 0; k < c; ++k) {
          gx[(i * s + j) * c + k] += g[(i * sp + j) * c + k];
        }
      }
    }
  });
  return o;
}

/// Places row i of x at row cell_of[i] of a fresh zero [cells, C] tensor.
/// Cell indices must be in range and (by caller contract) distinct.
template <typename T>
Value<T> scatter_rows(Value<T> x, std::vector<std::size_t> cell_of, std::size_t cells) {
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() != 2 || tx.dim(0) != cell_of.size()) {
    throw std::invalid_argument("scatter_rows: feature shape " + shape_str(tx.shape()) +
                                " does not match " + std::to_string(cell_of.size()) + " cells");
  }
  std::size_t n = tx.dim(0), c = tx.dim(1);
  for (std::size_t i : cell_of) {
    if (i >= cells) throw std::invalid_argument("scatter_rows: cell index out of range");
  }
  Tensor<T> out({cells, c});
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + cell_of[i] * c, tx.data() + i * c, c * sizeof(T));
  }
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io, c, cell_of = std::move(cell_of)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < cell_of.size(); ++i) {
      for (std::size_t k = 0; k < c; ++k) gx[i * c + k] += g[cell_of[i] * c + k];
    }
  });
  return o;
}

/// Row i of the result is row cell_of[i] of x.
template <typename T>
Value<T> gather_rows(Value<T> x, std::vector<std::size_t> cell_of) {
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() != 2) {
    throw std::invalid_argument("gather_rows: expected rank-2 input, got " +
                                shape_str(tx.shape()));
  }
  std::size_t c = tx.dim(1);
  for (std::size_t i : cell_of) {
    if (i >= tx.dim(0)) throw std::invalid_argument("gather_rows: cell index out of range");
  }
  Tensor<T> out({cell_of.size(), c});
  for (std::size_t i = 0; i < cell_of.size(); ++i) {
    std::memcpy(out.data() + i * c, tx.data() + cell_of[i] * c, c * sizeof(T));
  }
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(std::move(out));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io, c, cell_of = std::move(cell_of)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_of(io);
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < cell_of.size(); ++i) {
      for (std::size_t k = 0; k < c; ++k) gx[cell_of[i] * c + k] += g[i * c + k];
    }
  });
  return o;
}

template <typename T>
Value<T> sum(Value<T> x) {
  const Tensor<T>& tx = x.tensor();
  T acc = T(0);
  for (std::size_t i = 0; i < tx.numel(); ++i) acc += tx[i];
  Tape<T>& tp = x.tape();
  Value<T> o = tp.push(Tensor<T>::scalar(acc));
  std::size_t ix = x.id(), io = o.id();
  tp.set_back(io, [ix, io](Tape<T>& t) {
    T g = t.grad_of(io)[0];
    Tensor<T>& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
  return o;
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Value<T> cross_entropy(Value<T> logits, const std::vector<int>& labels) {
  const Tensor<T>& tl = logits.tensor();
  if (tl.rank() != 2 || tl.dim(0) != labels.size()) {
    throw std::invalid_argument("cross_entropy: logits " + shape_str(tl.shape()) +
                                " do not match " + std::to_string(labels.size()) + " labels");
  }
  std::size_t b = tl.dim(0), k = tl.dim(1);
  for (int lab : labels) {
    if (lab < 0 || static_cast<std::size_t>(lab) >= k) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(lab) +
                                  " out of range [0, " + std::to_string(k) + ")");
    }
  }
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = tl.data() + i * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T se = T(0);
    for (std::size_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
    T lse = mx + std::log(se);
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<T>(b);
  Tape<T>& tp = logits.tape();
  Value<T> o = tp.push(Tensor<T>::scalar(loss));
  std::size_t il = logits.id(), io = o.id();
  tp.set_back(io, [il, io, b, k, labels](Tape<T>& t) {
    T g = t.grad_of(io)[0] / static_cast<T>(b);
    const Tensor<T>& vl = t.value_of(il);
    Tensor<T>& gl = t.grad_of(il);
    for (std::size_t i = 0; i < b; ++i) {
      const T* row = vl.data() + i * k;
      T mx = row[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      T se = T(0);
      for (std::size_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < k; ++j) {
        T p = std::exp(row[j] - mx) / se;
        gl[i * k + j] += g * (p - (static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0)));
      }
    }
  });
  return o;
}

}  // namespace ops

}  // namespace gabmil
