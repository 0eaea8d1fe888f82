#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tma/gemm.hpp"
#include "tma/tensor.hpp"

namespace tma {

// Reverse-mode tape. Nodes are appended in execution order, so the list is
// topological by construction; backward() walks it once in reverse.
// A tape is built per forward pass and discarded afterwards.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  int leaf(Tensor<T> v, bool requires_grad) {
    nodes_.push_back(Node{std::move(v), {}, requires_grad, false, {}, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int node(Tensor<T> v, std::vector<int> parents, BackFn back) {
    bool req = false;
    for (int p : parents) req = req || nodes_[static_cast<size_t>(p)].req;
    nodes_.push_back(
        Node{std::move(v), {}, req, false, std::move(parents), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].req; }

  // Gradient buffer, zero-initialized on first touch.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_alloc) {
      n.grad = Tensor<T>(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }

  void backward(int loss) {
    check(loss >= 0 && loss < static_cast<int>(nodes_.size()),
          "backward: loss is not on the tape");
    check(val(loss).size() == 1, "backward: loss must be a scalar");
    grad(loss)[0] = T(1);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.req || !n.grad_alloc || !n.back) continue;
      n.back(*this, id);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool req = false;
    bool grad_alloc = false;
    std::vector<int> parents;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

// Handle to a tape entry.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
  const Tensor<T>& val() const { return tape->val(id); }
  const std::vector<int>& shape() const { return tape->val(id).shape(); }
};

template <typename T>
Var<T> constant(Tape<T>& t, Tensor<T> v) {
  return {&t, t.leaf(std::move(v), false)};
}

template <typename T>
Var<T> parameter(Tape<T>& t, Tensor<T> v) {
  return {&t, t.leaf(std::move(v), true)};
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check(a.val().same_shape(b.val()), "add: shape mismatch " +
        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) py[i] = pa[i] + pb[i];
  int ia = a.id, ib = b.id;
  int id = a.tape->node(std::move(y), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) {
      T* ga = t.grad(ia).data();
      for (long long i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).data();
      for (long long i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return {a.tape, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check(a.val().same_shape(b.val()), "sub: shape mismatch");
  Tensor<T> y(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) py[i] = pa[i] - pb[i];
  int ia = a.id, ib = b.id;
  int id = a.tape->node(std::move(y), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) {
      T* ga = t.grad(ia).data();
      for (long long i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).data();
      for (long long i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return {a.tape, id};
}

// Hadamard product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tensor<T> y(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) py[i] = pa[i] * pb[i];
  int ia = a.id, ib = b.id;
  int id = a.tape->node(std::move(y), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& va = t.val(ia);
    const Tensor<T>& vb = t.val(ib);
    if (t.requires_grad(ia)) {
      T* ga = t.grad(ia).data();
      for (long long i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).data();
      for (long long i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
  return {a.tape, id};
}

// y = s*x + c
template <typename T>
Var<T> affine(Var<T> x, T s, T c) {
  Tensor<T> y(x.val().shape());
  const T* px = x.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) py[i] = s * px[i] + c;
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix, s](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (!t.requires_grad(ix)) return;
    T* gx = t.grad(ix).data();
    for (long long i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  });
  return {x.tape, id};
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> y(x.val().shape());
  const T* px = x.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& vx = t.val(ix);
    T* gx = t.grad(ix).data();
    for (long long i = 0; i < g.size(); ++i)
      if (vx[i] > T(0)) gx[i] += g[i];
  });
  return {x.tape, id};
}

template <typename T>
Var<T> tanh_op(Var<T> x) {
  Tensor<T> y(x.val().shape());
  const T* px = x.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) py[i] = std::tanh(px[i]);
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& vy = t.val(self);
    T* gx = t.grad(ix).data();
    for (long long i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - vy[i] * vy[i]);
  });
  return {x.tape, id};
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> y(x.val().shape());
  const T* px = x.val().data();
  T* py = y.data();
  for (long long i = 0; i < y.size(); ++i) {
    T v = px[i];
    py[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                      : std::exp(v) / (T(1) + std::exp(v));
  }
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& vy = t.val(self);
    T* gx = t.grad(ix).data();
    for (long long i = 0; i < g.size(); ++i) gx[i] += g[i] * vy[i] * (T(1) - vy[i]);
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int> shape) {
  check(numel(shape) == x.val().size(), "reshape: element count mismatch");
  Tensor<T> y = Tensor<T>::from(std::move(shape), x.val().vec());
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    T* gx = t.grad(ix).data();
    for (long long i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return {x.tape, id};
}

template <typename T>
Var<T> transpose2d(Var<T> x) {
  check(x.val().rank() == 2, "transpose2d: rank-2 tensor required");
  int m = x.val().dim(0), n = x.val().dim(1);
  Tensor<T> y({n, m});
  const T* px = x.val().data();
  T* py = y.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) py[static_cast<long long>(j) * m + i] = px[static_cast<long long>(i) * n + j];
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix, m, n](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);  // [n,m]
    T* gx = t.grad(ix).data();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        gx[static_cast<long long>(i) * n + j] += g[static_cast<long long>(j) * m + i];
  });
  return {x.tape, id};
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  Tape<T>& tp = *xs[0].tape;
  const std::vector<int>& s0 = xs[0].val().shape();
  int rank = static_cast<int>(s0.size());
  check(axis >= 0 && axis < rank, "concat: axis out of range");
  int axis_total = 0;
  for (const auto& x : xs) {
    const auto& s = x.val().shape();
    check(static_cast<int>(s.size()) == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        check(s[static_cast<size_t>(d)] == s0[static_cast<size_t>(d)],
              "concat: non-axis dimension mismatch");
    axis_total += s[static_cast<size_t>(axis)];
  }
  std::vector<int> oshape = s0;
  oshape[static_cast<size_t>(axis)] = axis_total;

  long long outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[static_cast<size_t>(d)];

  Tensor<T> y(oshape);
  std::vector<int> parents;
  std::vector<long long> blocks;  // per-input axis_dim*inner
  parents.reserve(xs.size());
  long long out_row = static_cast<long long>(axis_total) * inner;
  long long off = 0;
  for (const auto& x : xs) {
    long long blk = static_cast<long long>(x.val().dim(axis)) * inner;
    const T* px = x.val().data();
    T* py = y.data();
    for (long long o = 0; o < outer; ++o)
      std::copy(px + o * blk, px + (o + 1) * blk, py + o * out_row + off);
    parents.push_back(x.id);
    blocks.push_back(blk);
    off += blk;
  }
  int id = tp.node(std::move(y), parents,
                   [parents, blocks, outer, out_row](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    long long off2 = 0;
    for (size_t i = 0; i < parents.size(); ++i) {
      long long blk = blocks[i];
      if (t.requires_grad(parents[i])) {
        T* gx = t.grad(parents[i]).data();
        const T* pg = g.data();
        for (long long o = 0; o < outer; ++o) {
          const T* src = pg + o * out_row + off2;
          T* dst = gx + o * blk;
          for (long long j = 0; j < blk; ++j) dst[j] += src[j];
        }
      }
      off2 += blk;
    }
  });
  return {&tp, id};
}

template <typename T>
Var<T> slice(Var<T> x, int axis, int start, int len) {
  const auto& s = x.val().shape();
  int rank = static_cast<int>(s.size());
  check(axis >= 0 && axis < rank, "slice: axis out of range");
  check(start >= 0 && len > 0 && start + len <= s[static_cast<size_t>(axis)],
        "slice: range out of bounds");
  long long outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= s[static_cast<size_t>(d)];
  std::vector<int> oshape = s;
  oshape[static_cast<size_t>(axis)] = len;
  Tensor<T> y(oshape);
  long long in_row = static_cast<long long>(s[static_cast<size_t>(axis)]) * inner;
  long long blk = static_cast<long long>(len) * inner;
  long long off = static_cast<long long>(start) * inner;
  const T* px = x.val().data();
  T* py = y.data();
  for (long long o = 0; o < outer; ++o)
    std::copy(px + o * in_row + off, px + o * in_row + off + blk, py + o * blk);
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix},
                        [ix, outer, in_row, blk, off](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    T* gx = t.grad(ix).data();
    const T* pg = g.data();
    for (long long o = 0; o < outer; ++o) {
      T* dst = gx + o * in_row + off;
      const T* src = pg + o * blk;
      for (long long j = 0; j < blk; ++j) dst[j] += src[j];
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check(a.val().rank() == 2 && b.val().rank() == 2, "matmul: rank-2 tensors required");
  int m = a.val().dim(0), k = a.val().dim(1);
  int k2 = b.val().dim(0), n = b.val().dim(1);
  check(k == k2, "matmul: inner dimensions differ (" + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()) + ")");
  Tensor<T> y({m, n});
  gemm_nn(m, n, k, a.val().data(), b.val().data(), y.data());
  int ia = a.id, ib = b.id;
  int id = a.tape->node(std::move(y), {ia, ib}, [ia, ib, m, n, k](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia))
      gemm_nt(m, k, n, g.data(), t.val(ib).data(), t.grad(ia).data());
    if (t.requires_grad(ib))
      gemm_tn(k, n, m, t.val(ia).data(), g.data(), t.grad(ib).data());
  });
  return {a.tape, id};
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const auto& s = x.val().shape();
  int rank = static_cast<int>(s.size());
  check(axis >= 0 && axis < rank, "softmax: axis out of range");
  long long outer = 1, inner = 1;
  int n = s[static_cast<size_t>(axis)];
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= s[static_cast<size_t>(d)];
  Tensor<T> y(s);
  const T* px = x.val().data();
  T* py = y.data();
  for (long long o = 0; o < outer; ++o) {
    for (long long i = 0; i < inner; ++i) {
      const T* xr = px + o * n * inner + i;
      T* yr = py + o * n * inner + i;
      T mx = xr[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xr[static_cast<long long>(j) * inner]);
      T sum = T(0);
      for (int j = 0; j < n; ++j) {
        T e = std::exp(xr[static_cast<long long>(j) * inner] - mx);
        yr[static_cast<long long>(j) * inner] = e;
        sum += e;
      }
      T invs = T(1) / sum;
      for (int j = 0; j < n; ++j) yr[static_cast<long long>(j) * inner] *= invs;
    }
  }
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix},
                        [ix, outer, inner, n](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& vy = t.val(self);
    T* gx = t.grad(ix).data();
    const T* pg = g.data();
    const T* py = vy.data();
    for (long long o = 0; o < outer; ++o) {
      for (long long i = 0; i < inner; ++i) {
        long long base = o * n * inner + i;
        T dot = T(0);
        for (int j = 0; j < n; ++j)
          dot += pg[base + static_cast<long long>(j) * inner] *
                 py[base + static_cast<long long>(j) * inner];
        for (int j = 0; j < n; ++j) {
          long long idx = base + static_cast<long long>(j) * inner;
          gx[idx] += py[idx] * (pg[idx] - dot);
        }
      }
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation convention, zero padding)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, int oh, int ow,
            T* col) {
  int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const T* px = x.data();
  long long ncols = static_cast<long long>(oh) * ow;
  long long row = 0;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        T* dst = col + row * ncols;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) dst[static_cast<long long>(oy) * ow + ox] = T(0);
            continue;
          }
          const T* src = px + (static_cast<long long>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ixx = ox * stride + kx - pad;
            dst[static_cast<long long>(oy) * ow + ox] =
                (ixx >= 0 && ixx < w) ? src[ixx] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int ci, int h, int w, int k, int stride, int pad,
                int oh, int ow, T* gx) {
  long long ncols = static_cast<long long>(oh) * ow;
  long long row = 0;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        const T* src = col + row * ncols;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = gx + (static_cast<long long>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ixx = ox * stride + kx - pad;
            if (ixx >= 0 && ixx < w) dst[ixx] += src[static_cast<long long>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// input [Cin,H,W], kernel [Cout,Cin,k,k] -> [Cout,H',W']
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride, int pad) {
  check(x.val().rank() == 3, "conv2d: input must be [C,H,W]");
  check(w.val().rank() == 4, "conv2d: kernel must be [Cout,Cin,k,k]");
  int ci = x.val().dim(0), h = x.val().dim(1), ww = x.val().dim(2);
  int co = w.val().dim(0), ci2 = w.val().dim(1), k = w.val().dim(2);
  check(w.val().dim(3) == k, "conv2d: kernel must be square");
  check(k % 2 == 1, "conv2d: kernel size must be odd");
  check(ci == ci2, "conv2d: channel mismatch");
  check(stride >= 1, "conv2d: stride must be >= 1");
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (ww + 2 * pad - k) / stride + 1;
  check(h + 2 * pad >= k && ww + 2 * pad >= k && oh >= 1 && ow >= 1,
        "conv2d: non-positive output dims");

  long long kk = static_cast<long long>(ci) * k * k;
  long long ncols = static_cast<long long>(oh) * ow;
  auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(kk * ncols));
  detail::im2col(x.val(), k, stride, pad, oh, ow, col->data());

  Tensor<T> y({co, oh, ow});
  gemm_nn(co, static_cast<int>(ncols), static_cast<int>(kk), w.val().data(),
          col->data(), y.data());

  int ix = x.id, iw = w.id;
  int id = x.tape->node(std::move(y), {ix, iw},
                        [ix, iw, ci, h, ww, co, k, stride, pad, oh, ow, kk,
                         ncols, col](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);  // [co,oh,ow]
    if (t.requires_grad(iw)) {
      // dW[co, kk] += g[co, ncols] * col^T
      gemm_nt(co, static_cast<int>(kk), static_cast<int>(ncols), g.data(),
              col->data(), t.grad(iw).data());
    }
    if (t.requires_grad(ix)) {
      std::vector<T> dcol(static_cast<size_t>(kk * ncols), T(0));
      gemm_tn(static_cast<int>(kk), static_cast<int>(ncols), co,
              t.val(iw).data(), g.data(), dcol.data());
      detail::col2im_add(dcol.data(), ci, h, ww, k, stride, pad, oh, ow,
                         t.grad(ix).data());
    }
  });
  return {x.tape, id};
}

// x [C,H,W] + b [C]
template <typename T>
Var<T> bias_add(Var<T> x, Var<T> b) {
  check(x.val().rank() == 3 && b.val().rank() == 1 && b.val().dim(0) == x.val().dim(0),
        "bias_add: bias must be [C] matching input channels");
  int c = x.val().dim(0);
  long long hw = static_cast<long long>(x.val().dim(1)) * x.val().dim(2);
  Tensor<T> y(x.val().shape());
  const T* px = x.val().data();
  const T* pb = b.val().data();
  T* py = y.data();
  for (int ch = 0; ch < c; ++ch) {
    T bv = pb[ch];
    const T* src = px + ch * hw;
    T* dst = py + ch * hw;
    for (long long i = 0; i < hw; ++i) dst[i] = src[i] + bv;
  }
  int ix = x.id, ib = b.id;
  int id = x.tape->node(std::move(y), {ix, ib}, [ix, ib, c, hw](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ix)) {
      T* gx = t.grad(ix).data();
      for (long long i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).data();
      const T* pg = g.data();
      for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        const T* src = pg + ch * hw;
        for (long long i = 0; i < hw; ++i) acc += src[i];
        gb[ch] += acc;
      }
    }
  });
  return {x.tape, id};
}

// x [P,D] + b [D], broadcast over rows.
template <typename T>
Var<T> bias_add_row(Var<T> x, Var<T> b) {
  check(x.val().rank() == 2 && b.val().rank() == 1 && b.val().dim(0) == x.val().dim(1),
        "bias_add_row: bias must be [D] matching input columns");
  int p = x.val().dim(0), d = x.val().dim(1);
  Tensor<T> y(x.val().shape());
  const T* px = x.val().data();
  const T* pb = b.val().data();
  T* py = y.data();
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < d; ++j)
      py[static_cast<long long>(i) * d + j] = px[static_cast<long long>(i) * d + j] + pb[j];
  int ix = x.id, ib = b.id;
  int id = x.tape->node(std::move(y), {ix, ib}, [ix, ib, p, d](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ix)) {
      T* gx = t.grad(ix).data();
      for (long long i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).data();
      const T* pg = g.data();
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < d; ++j) gb[j] += pg[static_cast<long long>(i) * d + j];
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

// map [C,H,W], coords [N,2] as (x,y) pixels -> [N,C].
// Taps outside [0,W-1]x[0,H-1] contribute zero.
template <typename T>
Var<T> grid_sample_bilinear(Var<T> map, Var<T> coords) {
  check(map.val().rank() == 3, "grid_sample: map must be [C,H,W]");
  check(coords.val().rank() == 2 && coords.val().dim(1) == 2,
        "grid_sample: coords must be [N,2]");
  int c = map.val().dim(0), h = map.val().dim(1), w = map.val().dim(2);
  int n = coords.val().dim(0);
  Tensor<T> y({n, c});
  const T* pm = map.val().data();
  const T* pc = coords.val().data();
  T* py = y.data();
  auto tap = [&](int ch, int yy, int xx) -> T {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return T(0);
    return pm[(static_cast<long long>(ch) * h + yy) * w + xx];
  };
  for (int i = 0; i < n; ++i) {
    T cx = pc[2 * i], cy = pc[2 * i + 1];
    T fx0 = std::floor(cx), fy0 = std::floor(cy);
    int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    T fx = cx - fx0, fy = cy - fy0;
    for (int ch = 0; ch < c; ++ch) {
      T v = (T(1) - fx) * (T(1) - fy) * tap(ch, y0, x0) +
            fx * (T(1) - fy) * tap(ch, y0, x0 + 1) +
            (T(1) - fx) * fy * tap(ch, y0 + 1, x0) +
            fx * fy * tap(ch, y0 + 1, x0 + 1);
      py[static_cast<long long>(i) * c + ch] = v;
    }
  }
  int im = map.id, ic = coords.id;
  int id = map.tape->node(std::move(y), {im, ic},
                          [im, ic, c, h, w, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& vm = t.val(im);
    const Tensor<T>& vc = t.val(ic);
    const T* pm = vm.data();
    const T* pc = vc.data();
    const T* pg = g.data();
    T* gm = t.requires_grad(im) ? t.grad(im).data() : nullptr;
    T* gc = t.requires_grad(ic) ? t.grad(ic).data() : nullptr;
    auto tap = [&](int ch, int yy, int xx) -> T {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return T(0);
      return pm[(static_cast<long long>(ch) * h + yy) * w + xx];
    };
    auto scatter = [&](int ch, int yy, int xx, T v) {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return;
      gm[(static_cast<long long>(ch) * h + yy) * w + xx] += v;
    };
    for (int i = 0; i < n; ++i) {
      T cx = pc[2 * i], cy = pc[2 * i + 1];
      T fx0 = std::floor(cx), fy0 = std::floor(cy);
      int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      T fx = cx - fx0, fy = cy - fy0;
      T dx_acc = T(0), dy_acc = T(0);
      for (int ch = 0; ch < c; ++ch) {
        T go = pg[static_cast<long long>(i) * c + ch];
        if (go == T(0)) continue;
        if (gm) {
          scatter(ch, y0, x0, go * (T(1) - fx) * (T(1) - fy));
          scatter(ch, y0, x0 + 1, go * fx * (T(1) - fy));
          scatter(ch, y0 + 1, x0, go * (T(1) - fx) * fy);
          scatter(ch, y0 + 1, x0 + 1, go * fx * fy);
        }
        if (gc) {
          T m00 = tap(ch, y0, x0), m10 = tap(ch, y0, x0 + 1);
          T m01 = tap(ch, y0 + 1, x0), m11 = tap(ch, y0 + 1, x0 + 1);
          dx_acc += go * ((T(1) - fy) * (m10 - m00) + fy * (m11 - m01));
          dy_acc += go * ((T(1) - fx) * (m01 - m00) + fx * (m11 - m10));
        }
      }
      if (gc) {
        gc[2 * i] += dx_acc;
        gc[2 * i + 1] += dy_acc;
      }
    }
  });
  return {map.tape, id};
}

// Per-slice windowed lookup: volume [P,Hc,Wc], centers [P,2] as (x,y).
// Slice p is sampled at centers[p] + (dx,dy) for dx,dy in [-r,r],
// bilinearly with zero padding -> out [P,(2r+1)^2], window row-major in dy.
template <typename T>
Var<T> corr_lookup(Var<T> volume, Var<T> centers, int r) {
  check(volume.val().rank() == 3, "corr_lookup: volume must be [P,H,W]");
  check(centers.val().rank() == 2 && centers.val().dim(1) == 2 &&
            centers.val().dim(0) == volume.val().dim(0),
        "corr_lookup: centers must be [P,2]");
  check(r >= 0, "corr_lookup: radius must be >= 0");
  int p = volume.val().dim(0), h = volume.val().dim(1), w = volume.val().dim(2);
  int side = 2 * r + 1;
  int kwin = side * side;
  Tensor<T> y({p, kwin});
  const T* pv = volume.val().data();
  const T* pc = centers.val().data();
  T* py = y.data();
  for (int i = 0; i < p; ++i) {
    const T* slab = pv + static_cast<long long>(i) * h * w;
    T cx = pc[2 * i], cy = pc[2 * i + 1];
    T fx0 = std::floor(cx), fy0 = std::floor(cy);
    int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    T fx = cx - fx0, fy = cy - fy0;
    T w00 = (T(1) - fx) * (T(1) - fy), w10 = fx * (T(1) - fy);
    T w01 = (T(1) - fx) * fy, w11 = fx * fy;
    auto tap = [&](int yy, int xx) -> T {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return T(0);
      return slab[static_cast<long long>(yy) * w + xx];
    };
    T* yr = py + static_cast<long long>(i) * kwin;
    for (int dy = -r; dy <= r; ++dy) {
      int by = y0 + dy;
      for (int dx = -r; dx <= r; ++dx) {
        int bx = x0 + dx;
        yr[(dy + r) * side + (dx + r)] =
            w00 * tap(by, bx) + w10 * tap(by, bx + 1) +
            w01 * tap(by + 1, bx) + w11 * tap(by + 1, bx + 1);
      }
    }
  }
  int iv = volume.id, ic = centers.id;
  int id = volume.tape->node(std::move(y), {iv, ic},
                             [iv, ic, p, h, w, r](Tape<T>& t, int self) {
    int side = 2 * r + 1;
    int kwin = side * side;
    const Tensor<T>& g = t.grad(self);
    const T* pg = g.data();
    const T* pv = t.val(iv).data();
    const T* pc = t.val(ic).data();
    T* gv = t.requires_grad(iv) ? t.grad(iv).data() : nullptr;
    T* gc = t.requires_grad(ic) ? t.grad(ic).data() : nullptr;
    for (int i = 0; i < p; ++i) {
      const T* slab = pv + static_cast<long long>(i) * h * w;
      T* gslab = gv ? gv + static_cast<long long>(i) * h * w : nullptr;
      T cx = pc[2 * i], cy = pc[2 * i + 1];
      T fx0 = std::floor(cx), fy0 = std::floor(cy);
      int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      T fx = cx - fx0, fy = cy - fy0;
      auto tap = [&](int yy, int xx) -> T {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return T(0);
        return slab[static_cast<long long>(yy) * w + xx];
      };
      auto scatter = [&](int yy, int xx, T v) {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return;
        gslab[static_cast<long long>(yy) * w + xx] += v;
      };
      const T* gr = pg + static_cast<long long>(i) * kwin;
      T dx_acc = T(0), dy_acc = T(0);
      for (int dy = -r; dy <= r; ++dy) {
        int by = y0 + dy;
        for (int dx = -r; dx <= r; ++dx) {
          int bx = x0 + dx;
          T go = gr[(dy + r) * side + (dx + r)];
          if (go == T(0)) continue;
          if (gslab) {
            scatter(by, bx, go * (T(1) - fx) * (T(1) - fy));
            scatter(by, bx + 1, go * fx * (T(1) - fy));
            scatter(by + 1, bx, go * (T(1) - fx) * fy);
            scatter(by + 1, bx + 1, go * fx * fy);
          }
          if (gc) {
            T m00 = tap(by, bx), m10 = tap(by, bx + 1);
            T m01 = tap(by + 1, bx), m11 = tap(by + 1, bx + 1);
            dx_acc += go * ((T(1) - fy) * (m10 - m00) + fy * (m11 - m01));
            dy_acc += go * ((T(1) - fx) * (m01 - m00) + fx * (m11 - m10));
          }
        }
      }
      if (gc) {
        gc[2 * i] += dx_acc;
        gc[2 * i + 1] += dy_acc;
      }
    }
  });
  return {volume.tape, id};
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

// 2x2 average pooling over the last two dims of a rank>=2 tensor.
template <typename T>
Var<T> avg_pool2(Var<T> x) {
  const auto& s = x.val().shape();
  int rank = static_cast<int>(s.size());
  check(rank >= 2, "avg_pool2: rank >= 2 required");
  int h = s[static_cast<size_t>(rank - 2)], w = s[static_cast<size_t>(rank - 1)];
  check(h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2,
        "avg_pool2: last two dims must be even and >= 2");
  long long c = 1;
  for (int d = 0; d < rank - 2; ++d) c *= s[static_cast<size_t>(d)];
  std::vector<int> oshape = s;
  oshape[static_cast<size_t>(rank - 2)] = h / 2;
  oshape[static_cast<size_t>(rank - 1)] = w / 2;
  Tensor<T> y(oshape);
  const T* px = x.val().data();
  T* py = y.data();
  int oh = h / 2, ow = w / 2;
  for (long long ch = 0; ch < c; ++ch) {
    const T* src = px + ch * h * w;
    T* dst = py + static_cast<long long>(ch) * oh * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        dst[static_cast<long long>(i) * ow + j] =
            (src[static_cast<long long>(2 * i) * w + 2 * j] +
             src[static_cast<long long>(2 * i) * w + 2 * j + 1] +
             src[static_cast<long long>(2 * i + 1) * w + 2 * j] +
             src[static_cast<long long>(2 * i + 1) * w + 2 * j + 1]) /
            T(4);
  }
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix, c, h, w](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad(self);
    T* gx = t.grad(ix).data();
    const T* pg = g.data();
    int oh = h / 2, ow = w / 2;
    for (long long ch = 0; ch < c; ++ch) {
      const T* src = pg + static_cast<long long>(ch) * oh * ow;
      T* dst = gx + ch * h * w;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          T v = src[static_cast<long long>(i) * ow + j] / T(4);
          dst[static_cast<long long>(2 * i) * w + 2 * j] += v;
          dst[static_cast<long long>(2 * i) * w + 2 * j + 1] += v;
          dst[static_cast<long long>(2 * i + 1) * w + 2 * j] += v;
          dst[static_cast<long long>(2 * i + 1) * w + 2 * j + 1] += v;
        }
    }
  });
  return {x.tape, id};
}

// Bilinear upsampling by an integer factor; border taps are clamped so a
// constant field stays constant.
template <typename T>
Var<T> upsample_bilinear(Var<T> x, int factor) {
  check(x.val().rank() == 3, "upsample_bilinear: input must be [C,H,W]");
  check(factor >= 1, "upsample_bilinear: factor must be >= 1");
  int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
  int oh = h * factor, ow = w * factor;
  Tensor<T> y({c, oh, ow});

  // Precompute per-axis taps and weights.
  std::vector<int> y0(oh), y1(oh), x0(ow), x1(ow);
  std::vector<T> wy(oh), wx(ow);
  auto prep = [&](int olen, int ilen, std::vector<int>& i0, std::vector<int>& i1,
                  std::vector<T>& fr) {
    for (int o = 0; o < olen; ++o) {
      T src = (T(o) + T(0.5)) / T(factor) - T(0.5);
      T f0 = std::floor(src);
      int a = static_cast<int>(f0);
      T f = src - f0;
      int b = a + 1;
      if (a < 0) a = 0;
      if (a > ilen - 1) a = ilen - 1;
      if (b < 0) b = 0;
      if (b > ilen - 1) b = ilen - 1;
      i0[static_cast<size_t>(o)] = a;
      i1[static_cast<size_t>(o)] = b;
      fr[static_cast<size_t>(o)] = f;
    }
  };
  prep(oh, h, y0, y1, wy);
  prep(ow, w, x0, x1, wx);

  const T* px = x.val().data();
  T* py = y.data();
  for (int ch = 0; ch < c; ++ch) {
    const T* src = px + static_cast<long long>(ch) * h * w;
    T* dst = py + static_cast<long long>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      T fy = wy[static_cast<size_t>(oy)];
      const T* r0 = src + static_cast<long long>(y0[static_cast<size_t>(oy)]) * w;
      const T* r1 = src + static_cast<long long>(y1[static_cast<size_t>(oy)]) * w;
      for (int ox = 0; ox < ow; ++ox) {
        T fx = wx[static_cast<size_t>(ox)];
        int a = x0[static_cast<size_t>(ox)], b = x1[static_cast<size_t>(ox)];
        dst[static_cast<long long>(oy) * ow + ox] =
            (T(1) - fy) * ((T(1) - fx) * r0[a] + fx * r0[b]) +
            fy * ((T(1) - fx) * r1[a] + fx * r1[b]);
      }
    }
  }
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix},
                        [ix, c, h, w, factor, y0, y1, x0, x1, wy, wx](Tape<T>& t,
                                                                      int self) {
    if (!t.requires_grad(ix)) return;
    int oh = h * factor, ow = w * factor;
    const Tensor<T>& g = t.grad(self);
    const T* pg = g.data();
    T* gx = t.grad(ix).data();
    for (int ch = 0; ch < c; ++ch) {
      const T* src = pg + static_cast<long long>(ch) * oh * ow;
      T* dst = gx + static_cast<long long>(ch) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        T fy = wy[static_cast<size_t>(oy)];
        T* r0 = dst + static_cast<long long>(y0[static_cast<size_t>(oy)]) * w;
        T* r1 = dst + static_cast<long long>(y1[static_cast<size_t>(oy)]) * w;
        for (int ox = 0; ox < ow; ++ox) {
          T go = src[static_cast<long long>(oy) * ow + ox];
          if (go == T(0)) continue;
          T fx = wx[static_cast<size_t>(ox)];
          int a = x0[static_cast<size_t>(ox)], b = x1[static_cast<size_t>(ox)];
          r0[a] += go * (T(1) - fy) * (T(1) - fx);
          r0[b] += go * (T(1) - fy) * fx;
          r1[a] += go * fy * (T(1) - fx);
          r1[b] += go * fy * fx;
        }
      }
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-row normalization of x [P,D] to zero mean / unit variance over D,
// followed by a learned affine (gamma, beta of shape [D]).
template <typename T>
Var<T> feature_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  check(x.val().rank() == 2, "feature_norm: input must be [P,D]");
  int p = x.val().dim(0), d = x.val().dim(1);
  check(gamma.val().rank() == 1 && gamma.val().dim(0) == d &&
            beta.val().rank() == 1 && beta.val().dim(0) == d,
        "feature_norm: gamma/beta must be [D]");
  const T eps = T(1e-6);
  Tensor<T> y({p, d});
  auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{p, d});
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(p));
  const T* px = x.val().data();
  const T* pgm = gamma.val().data();
  const T* pbt = beta.val().data();
  T* py = y.data();
  T* ph = xhat->data();
  for (int i = 0; i < p; ++i) {
    const T* xr = px + static_cast<long long>(i) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      T dv = xr[j] - mu;
      var += dv * dv;
    }
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(i)] = is;
    T* hr = ph + static_cast<long long>(i) * d;
    T* yr = py + static_cast<long long>(i) * d;
    for (int j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * is;
      yr[j] = pgm[j] * hr[j] + pbt[j];
    }
  }
  int ix = x.id, ig = gamma.id, ib = beta.id;
  int id = x.tape->node(std::move(y), {ix, ig, ib},
                        [ix, ig, ib, p, d, xhat, istd](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const T* pg = g.data();
    const T* ph = xhat->data();
    const T* pgm = t.val(ig).data();
    if (t.requires_grad(ig)) {
      T* gg = t.grad(ig).data();
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < d; ++j)
          gg[j] += pg[static_cast<long long>(i) * d + j] * ph[static_cast<long long>(i) * d + j];
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).data();
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < d; ++j) gb[j] += pg[static_cast<long long>(i) * d + j];
    }
    if (t.requires_grad(ix)) {
      T* gx = t.grad(ix).data();
      for (int i = 0; i < p; ++i) {
        const T* gr = pg + static_cast<long long>(i) * d;
        const T* hr = ph + static_cast<long long>(i) * d;
        T is = (*istd)[static_cast<size_t>(i)];
        T mean_dh = T(0), mean_dhh = T(0);
        for (int j = 0; j < d; ++j) {
          T dh = gr[j] * pgm[j];
          mean_dh += dh;
          mean_dhh += dh * hr[j];
        }
        mean_dh /= T(d);
        mean_dhh /= T(d);
        T* gxr = gx + static_cast<long long>(i) * d;
        for (int j = 0; j < d; ++j) {
          T dh = gr[j] * pgm[j];
          gxr[j] += is * (dh - mean_dh - hr[j] * mean_dhh);
        }
      }
    }
  });
  return {x.tape, id};
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
  T acc = T(0);
  const T* px = x.val().data();
  for (long long i = 0; i < x.val().size(); ++i) acc += px[i];
  Tensor<T> y = Tensor<T>::from({1}, {acc});
  int ix = x.id;
  int id = x.tape->node(std::move(y), {ix}, [ix](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    T go = t.grad(self)[0];
    T* gx = t.grad(ix).data();
    for (long long i = 0; i < t.val(ix).size(); ++i) gx[i] += go;
  });
  return {x.tape, id};
}

// Mean absolute error over mask==1 elements; 0 when the mask is empty.
// target and mask are constants with the same shape as pred.
template <typename T>
Var<T> l1_loss(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask) {
  check(pred.val().same_shape(target) && pred.val().same_shape(mask),
        "l1_loss: pred/target/mask shapes must match");
  const T* pp = pred.val().data();
  const T* pt = target.data();
  const T* pm = mask.data();
  T cnt = T(0), acc = T(0);
  for (long long i = 0; i < pred.val().size(); ++i) {
    cnt += pm[i];
    acc += pm[i] * std::abs(pp[i] - pt[i]);
  }
  T value = cnt > T(0) ? acc / cnt : T(0);
  Tensor<T> y = Tensor<T>::from({1}, {value});
  int ip = pred.id;
  auto tgt = std::make_shared<Tensor<T>>(target);
  auto msk = std::make_shared<Tensor<T>>(mask);
  int id = pred.tape->node(std::move(y), {ip},
                           [ip, tgt, msk, cnt](Tape<T>& t, int self) {
    if (!t.requires_grad(ip) || !(cnt > T(0))) return;
    T go = t.grad(self)[0] / cnt;
    const Tensor<T>& vp = t.val(ip);
    T* gp = t.grad(ip).data();
    const T* pp = vp.data();
    const T* pt = tgt->data();
    const T* pm = msk->data();
    for (long long i = 0; i < vp.size(); ++i) {
      if (pm[i] == T(0)) continue;
      T dv = pp[i] - pt[i];
      T s = dv > T(0) ? T(1) : (dv < T(0) ? T(-1) : T(0));
      gp[i] += go * s;
    }
  });
  return {pred.tape, id};
}

}  // namespace tma
