#pragma once

// Differentiable kernels over Tensor<T>. Conventions fixed here:
//  - conv2d is cross-correlation (no kernel flip).
//  - bilinear_resize uses the align-corners-false sample grid.
//  - reductions accumulate in double regardless of T, in a fixed order,
//    so results are deterministic for a given input.

#include <algorithm>
#include <cmath>
#include <utility>

#include "lsnerf/tensor.hpp"

namespace lsnerf {

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// C[MxP] += A[MxK] * B[KxP], row-major. The j-inner ordering keeps the
// accumulation over k sequential per output element (single accumulator),
// which the conv oracle test relies on.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int p) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<int64_t>(i) * k;
    T* crow = c + static_cast<int64_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + static_cast<int64_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.node(), bn = b.node();
  return make_op_output<T>(a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& o) {
                             if (an->requires_grad) {
                               an->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] - pb[i];
  auto an = a.node(), bn = b.node();
  return make_op_output<T>(a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& o) {
                             if (an->requires_grad) {
                               an->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] * pb[i];
  auto an = a.node(), bn = b.node();
  return make_op_output<T>(a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& o) {
                             if (an->requires_grad) {
                               an->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i)
                                 an->grad[i] += o.grad[i] * bn->value[i];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i)
                                 bn->grad[i] += o.grad[i] * an->value[i];
                             }
                           });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] / pb[i];
  auto an = a.node(), bn = b.node();
  return make_op_output<T>(a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& o) {
                             if (an->requires_grad) {
                               an->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i)
                                 an->grad[i] += o.grad[i] / bn->value[i];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i)
                                 bn->grad[i] -= o.grad[i] * an->value[i] /
                                                (bn->value[i] * bn->value[i]);
                             }
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] * s;
  auto an = a.node();
  return make_op_output<T>(a.shape(), std::move(out), {a},
                           [an, s](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
                           });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::max(pa[i], lo);
  auto an = a.node();
  return make_op_output<T>(a.shape(), std::move(out), {a},
                           [an, lo](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i)
                               if (an->value[i] >= lo) an->grad[i] += o.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> elu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i)
    out[i] = pa[i] > T(0) ? pa[i] : std::expm1(pa[i]);
  auto an = a.node();
  return make_op_output<T>(a.shape(), std::move(out), {a},
                           [an](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             // d/dx = 1 for x>0, exp(x) = y+1 otherwise
                             for (size_t i = 0; i < o.grad.size(); ++i)
                               an->grad[i] += o.grad[i] * (an->value[i] > T(0)
                                                               ? T(1)
                                                               : o.value[i] + T(1));
                           });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) {
    const T x = pa[i];
    if (x >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  auto an = a.node();
  return make_op_output<T>(a.shape(), std::move(out), {a},
                           [an](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) {
                               const T y = o.value[i];
                               an->grad[i] += o.grad[i] * y * (T(1) - y);
                             }
                           });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) {
    const T x = pa[i];
    out[i] = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
  }
  auto an = a.node();
  return make_op_output<T>(a.shape(), std::move(out), {a},
                           [an](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             // sigmoid(x) recovered from the output: 1 - exp(-y)
                             for (size_t i = 0; i < o.grad.size(); ++i)
                               an->grad[i] += o.grad[i] * (-std::expm1(-o.value[i]));
                           });
}

// ---------------------------------------------------------------------------
// Matrix / layer ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw std::invalid_argument("matmul: inputs must be 2-D");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), p = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(static_cast<int64_t>(m) * p, T(0));
  detail::gemm_acc(a.ptr(), b.ptr(), out.data(), m, k, p);
  auto an = a.node(), bn = b.node();
  return make_op_output<T>({m, p}, std::move(out), {a, b},
                           [an, bn, m, k, p](TensorNode<T>& o) {
                             const T* g = o.grad.data();
                             if (an->requires_grad) {
                               an->ensure_grad();
                               // gA += gC * B^T
                               std::vector<T> bt(static_cast<int64_t>(p) * k);
                               for (int kk = 0; kk < k; ++kk)
                                 for (int j = 0; j < p; ++j)
                                   bt[static_cast<int64_t>(j) * k + kk] =
                                       bn->value[static_cast<int64_t>(kk) * p + j];
                               detail::gemm_acc(g, bt.data(), an->grad.data(), m, p, k);
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               // gB += A^T * gC, accumulated row by row
                               for (int i = 0; i < m; ++i) {
                                 const T* arow = an->value.data() + static_cast<int64_t>(i) * k;
                                 const T* grow = g + static_cast<int64_t>(i) * p;
                                 for (int kk = 0; kk < k; ++kk) {
                                   const T av = arow[kk];
                                   T* brow = bn->grad.data() + static_cast<int64_t>(kk) * p;
                                   for (int j = 0; j < p; ++j) brow[j] += av * grow[j];
                                 }
                               }
                             }
                           });
}

// m: [M x K], bias: [K]; adds the bias to every row.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& m, const Tensor<T>& bias) {
  if (m.shape().size() != 2 || bias.numel() != m.dim(1))
    throw std::invalid_argument("add_row_bias: bias length must equal columns");
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<T> out(m.numel());
  const T* pm = m.ptr();
  const T* pb = bias.ptr();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<int64_t>(i) * cols + j] = pm[static_cast<int64_t>(i) * cols + j] + pb[j];
  auto mn = m.node(), bn = bias.node();
  return make_op_output<T>(m.shape(), std::move(out), {m, bias},
                           [mn, bn, rows, cols](TensorNode<T>& o) {
                             if (mn->requires_grad) {
                               mn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) mn->grad[i] += o.grad[i];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (int i = 0; i < rows; ++i) {
                                 const T* grow = o.grad.data() + static_cast<int64_t>(i) * cols;
                                 for (int j = 0; j < cols; ++j) bn->grad[j] += grow[j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: row counts must match");
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<T> out(static_cast<int64_t>(rows) * (ca + cb));
  for (int i = 0; i < rows; ++i) {
    std::copy_n(a.ptr() + static_cast<int64_t>(i) * ca, ca,
                out.data() + static_cast<int64_t>(i) * (ca + cb));
    std::copy_n(b.ptr() + static_cast<int64_t>(i) * cb, cb,
                out.data() + static_cast<int64_t>(i) * (ca + cb) + ca);
  }
  auto an = a.node(), bn = b.node();
  return make_op_output<T>({rows, ca + cb}, std::move(out), {a, b},
                           [an, bn, rows, ca, cb](TensorNode<T>& o) {
                             const int cc = ca + cb;
                             if (an->requires_grad) {
                               an->ensure_grad();
                               for (int i = 0; i < rows; ++i)
                                 for (int j = 0; j < ca; ++j)
                                   an->grad[static_cast<int64_t>(i) * ca + j] +=
                                       o.grad[static_cast<int64_t>(i) * cc + j];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (int i = 0; i < rows; ++i)
                                 for (int j = 0; j < cb; ++j)
                                   bn->grad[static_cast<int64_t>(i) * cb + j] +=
                                       o.grad[static_cast<int64_t>(i) * cc + ca + j];
                             }
                           });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int c1) {
  if (a.shape().size() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad column range");
  const int rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
  std::vector<T> out(static_cast<int64_t>(rows) * w);
  for (int i = 0; i < rows; ++i)
    std::copy_n(a.ptr() + static_cast<int64_t>(i) * cols + c0, w,
                out.data() + static_cast<int64_t>(i) * w);
  auto an = a.node();
  return make_op_output<T>({rows, w}, std::move(out), {a},
                           [an, rows, cols, c0, w](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < w; ++j)
                                 an->grad[static_cast<int64_t>(i) * cols + c0 + j] +=
                                     o.grad[static_cast<int64_t>(i) * w + j];
                           });
}

// Copies data into a new shape with the same element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  std::vector<T> out(a.data());
  auto an = a.node();
  return make_op_output<T>(std::move(shape), std::move(out), {a},
                           [an](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(pa[i]);
  auto an = a.node();
  return make_op_output<T>({1}, {static_cast<T>(acc)}, {a},
                           [an](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             const T g = o.grad[0];
                             for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
                           });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(pa[i]);
  const int64_t n = a.numel();
  auto an = a.node();
  return make_op_output<T>({1}, {static_cast<T>(acc / static_cast<double>(n))}, {a},
                           [an, n](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             const T g = o.grad[0] / static_cast<T>(n);
                             for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
                           });
}

// Mean squared error between two same-shape tensors.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mse");
  double acc = 0;
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
    acc += d * d;
  }
  auto an = a.node(), bn = b.node();
  return make_op_output<T>({1}, {static_cast<T>(acc / static_cast<double>(n))}, {a, b},
                           [an, bn, n](TensorNode<T>& o) {
                             const T g = o.grad[0] * T(2) / static_cast<T>(n);
                             if (an->requires_grad) {
                               an->ensure_grad();
                               for (int64_t i = 0; i < n; ++i)
                                 an->grad[i] += g * (an->value[i] - bn->value[i]);
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (int64_t i = 0; i < n; ++i)
                                 bn->grad[i] -= g * (an->value[i] - bn->value[i]);
                             }
                           });
}

// MSE restricted to rows flagged valid; returns 0 when nothing is valid.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const std::vector<T>& target,
                     const std::vector<uint8_t>& valid) {
  if (static_cast<int64_t>(target.size()) != pred.numel() ||
      valid.size() != target.size())
    throw std::invalid_argument("masked_mse: size mismatch");
  const int64_t n = pred.numel();
  int64_t n_valid = 0;
  double acc = 0;
  const T* pp = pred.ptr();
  for (int64_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    ++n_valid;
    const double d = static_cast<double>(pp[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  const T value = n_valid ? static_cast<T>(acc / static_cast<double>(n_valid)) : T(0);
  auto pn = pred.node();
  auto tgt = std::make_shared<std::vector<T>>(target);
  auto msk = std::make_shared<std::vector<uint8_t>>(valid);
  return make_op_output<T>({1}, {value}, {pred},
                           [pn, tgt, msk, n, n_valid](TensorNode<T>& o) {
                             if (!pn->requires_grad || n_valid == 0) return;
                             pn->ensure_grad();
                             const T g = o.grad[0] * T(2) / static_cast<T>(n_valid);
                             for (int64_t i = 0; i < n; ++i)
                               if ((*msk)[i])
                                 pn->grad[i] += g * (pn->value[i] - (*tgt)[i]);
                           });
}

// Row sums of a [R x N] matrix -> [R x 1].
template <typename T>
Tensor<T> rowsum(const Tensor<T>& a) {
  if (a.shape().size() != 2) throw std::invalid_argument("rowsum: input must be 2-D");
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(rows);
  for (int i = 0; i < rows; ++i) {
    double acc = 0;
    const T* row = a.ptr() + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) acc += static_cast<double>(row[j]);
    out[i] = static_cast<T>(acc);
  }
  auto an = a.node();
  return make_op_output<T>({rows, 1}, std::move(out), {a},
                           [an, rows, cols](TensorNode<T>& o) {
                             if (!an->requires_grad) return;
                             an->ensure_grad();
                             for (int i = 0; i < rows; ++i) {
                               const T g = o.grad[i];
                               T* grow = an->grad.data() + static_cast<int64_t>(i) * cols;
                               for (int j = 0; j < cols; ++j) grow[j] += g;
                             }
                           });
}

// ---------------------------------------------------------------------------
// conv2d: x [Cin,H,W], w [Cout,Cin,k,k] -> [Cout,H',W'], cross-correlation.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4)
    throw std::invalid_argument("conv2d: expected x [C,H,W] and w [Cout,Cin,k,k]");
  const int cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (w.dim(3) != k || (k != 1 && k != 3 && k != 5))
    throw std::invalid_argument("conv2d: kernel must be square with k in {1,3,5}");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  if ((h + 2 * pad - k) % stride != 0 || (ww + 2 * pad - k) % stride != 0)
    throw std::invalid_argument("conv2d: non-integral output size");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (ww + 2 * pad - k) / stride + 1;
  const int kk = cin * k * k;       // im2col rows
  const int np = ho * wo;           // im2col cols

  // im2col with rows ordered (cin, ky, kx) so the gemm accumulation order
  // matches the naive nested-loop formulation exactly.
  auto cols = std::make_shared<std::vector<T>>(static_cast<int64_t>(kk) * np, T(0));
  {
    T* pc = cols->data();
    const T* px = x.ptr();
    for (int c = 0; c < cin; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int r = (c * k + ky) * k + kx;
          T* dst = pc + static_cast<int64_t>(r) * np;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const T* src = px + (static_cast<int64_t>(c) * h + iy) * ww;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < ww) dst[oy * wo + ox] = src[ix];
            }
          }
        }
  }

  std::vector<T> out(static_cast<int64_t>(cout) * np, T(0));
  detail::gemm_acc(w.ptr(), cols->data(), out.data(), cout, kk, np);

  auto xn = x.node(), wn = w.node();
  return make_op_output<T>(
      {cout, ho, wo}, std::move(out), {x, w},
      [xn, wn, cols, cin, h, ww, cout, k, stride, pad, ho, wo, kk,
       np](TensorNode<T>& o) {
        const T* g = o.grad.data();
        if (wn->requires_grad) {
          wn->ensure_grad();
          // gW += gOut * cols^T
          std::vector<T> colsT(static_cast<int64_t>(np) * kk);
          for (int r = 0; r < kk; ++r)
            for (int c = 0; c < np; ++c)
              colsT[static_cast<int64_t>(c) * kk + r] = (*cols)[static_cast<int64_t>(r) * np + c];
          detail::gemm_acc(g, colsT.data(), wn->grad.data(), cout, np, kk);
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          // gCols = W^T * gOut, then scatter back (col2im)
          std::vector<T> gcols(static_cast<int64_t>(kk) * np, T(0));
          for (int r = 0; r < kk; ++r) {
            T* grow = gcols.data() + static_cast<int64_t>(r) * np;
            for (int oc = 0; oc < cout; ++oc) {
              const T wv = wn->value[static_cast<int64_t>(oc) * kk + r];
              const T* go = g + static_cast<int64_t>(oc) * np;
              for (int c = 0; c < np; ++c) grow[c] += wv * go[c];
            }
          }
          T* gx = xn->grad.data();
          for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int r = (c * k + ky) * k + kx;
                const T* src = gcols.data() + static_cast<int64_t>(r) * np;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  T* dst = gx + (static_cast<int64_t>(c) * h + iy) * ww;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < ww) dst[ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

// Adds b[c] to every pixel of channel c of x [C,H,W].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.shape().size() != 3 || b.numel() != x.dim(0))
    throw std::invalid_argument("add_channel_bias: bias length must equal channels");
  const int c = x.dim(0);
  const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  std::vector<T> out(x.numel());
  for (int ch = 0; ch < c; ++ch) {
    const T bias = b.ptr()[ch];
    const T* src = x.ptr() + ch * hw;
    T* dst = out.data() + ch * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
  }
  auto xn = x.node(), bn = b.node();
  return make_op_output<T>(x.shape(), std::move(out), {x, b},
                           [xn, bn, c, hw](TensorNode<T>& o) {
                             if (xn->requires_grad) {
                               xn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (int ch = 0; ch < c; ++ch) {
                                 double acc = 0;
                                 const T* g = o.grad.data() + ch * hw;
                                 for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(g[i]);
                                 bn->grad[ch] += static_cast<T>(acc);
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Instance normalization over x [C,H,W], population variance, then affine.

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& beta, T eps) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("instance_norm: expected [C,H,W]");
  const int c = x.dim(0);
  const int64_t m = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c)
    throw std::invalid_argument("instance_norm: affine params must have C entries");
  if (m < 1) throw std::invalid_argument("instance_norm: empty spatial extent");

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invstd = std::make_shared<std::vector<T>>(c);
  std::vector<T> out(x.numel());
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x.ptr() + ch * m;
    double mu = 0;
    for (int64_t i = 0; i < m; ++i) mu += static_cast<double>(src[i]);
    mu /= static_cast<double>(m);
    double var = 0;
    for (int64_t i = 0; i < m; ++i) {
      const double d = static_cast<double>(src[i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*invstd)[ch] = static_cast<T>(is);
    const T g = gamma.ptr()[ch], b = beta.ptr()[ch];
    T* xh = xhat->data() + ch * m;
    T* dst = out.data() + ch * m;
    for (int64_t i = 0; i < m; ++i) {
      xh[i] = static_cast<T>((static_cast<double>(src[i]) - mu) * is);
      dst[i] = g * xh[i] + b;
    }
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op_output<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, invstd, c, m](TensorNode<T>& o) {
        for (int ch = 0; ch < c; ++ch) {
          const T* g = o.grad.data() + ch * m;
          const T* xh = xhat->data() + ch * m;
          double sum_g = 0, sum_gx = 0;
          for (int64_t i = 0; i < m; ++i) {
            sum_g += static_cast<double>(g[i]);
            sum_gx += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad[ch] += static_cast<T>(sum_gx);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[ch] += static_cast<T>(sum_g);
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            const double s = static_cast<double>(gn->value[ch]);
            const double is = static_cast<double>((*invstd)[ch]);
            const double mean_g = sum_g / static_cast<double>(m);
            const double mean_gx = sum_gx / static_cast<double>(m);
            T* gx = xn->grad.data() + ch * m;
            for (int64_t i = 0; i < m; ++i)
              gx[i] += static_cast<T>(s * is *
                                      (static_cast<double>(g[i]) - mean_g -
                                       static_cast<double>(xh[i]) * mean_gx));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear resize, factor 2.0 (doubling) or 0.5 (halving), align-corners-false.

namespace detail {

struct ResizeTap {
  int i0, i1;
  double w0, w1;
};

// Output coordinate o samples the input at (o + 0.5) / factor - 0.5.
inline std::vector<ResizeTap> resize_taps(int in_size, int out_size, double factor) {
  std::vector<ResizeTap> taps(out_size);
  for (int o = 0; o < out_size; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    double fl = std::floor(src);
    int i0 = static_cast<int>(fl);
    double w1 = src - fl;
    int i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0; }
    if (i1 >= in_size) { i1 = in_size - 1; if (i0 > i1) i0 = i1; w1 = (i0 == i1) ? 0 : w1; }
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, double factor) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("bilinear_resize: expected [C,H,W]");
  if (factor != 2.0 && factor != 0.5)
    throw std::invalid_argument("bilinear_resize: factor must be 0.5 or 2.0");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (factor == 0.5 && (h % 2 || w % 2))
    throw std::invalid_argument("bilinear_resize: halving requires even dimensions");
  const int ho = factor == 2.0 ? h * 2 : h / 2;
  const int wo = factor == 2.0 ? w * 2 : w / 2;
  const auto ty = detail::resize_taps(h, ho, factor);
  const auto tx = detail::resize_taps(w, wo, factor);

  std::vector<T> out(static_cast<int64_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x.ptr() + static_cast<int64_t>(ch) * h * w;
    T* dst = out.data() + static_cast<int64_t>(ch) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const auto& ry = ty[oy];
      for (int ox = 0; ox < wo; ++ox) {
        const auto& rx = tx[ox];
        const double v =
            ry.w0 * (rx.w0 * src[ry.i0 * w + rx.i0] + rx.w1 * src[ry.i0 * w + rx.i1]) +
            ry.w1 * (rx.w0 * src[ry.i1 * w + rx.i0] + rx.w1 * src[ry.i1 * w + rx.i1]);
        dst[oy * wo + ox] = static_cast<T>(v);
      }
    }
  }
  auto xn = x.node();
  auto tys = std::make_shared<std::vector<detail::ResizeTap>>(ty);
  auto txs = std::make_shared<std::vector<detail::ResizeTap>>(tx);
  return make_op_output<T>({c, ho, wo}, std::move(out), {x},
                           [xn, tys, txs, c, h, w, ho, wo](TensorNode<T>& o) {
                             if (!xn->requires_grad) return;
                             xn->ensure_grad();
                             for (int ch = 0; ch < c; ++ch) {
                               const T* g = o.grad.data() + static_cast<int64_t>(ch) * ho * wo;
                               T* gx = xn->grad.data() + static_cast<int64_t>(ch) * h * w;
                               for (int oy = 0; oy < ho; ++oy) {
                                 const auto& ry = (*tys)[oy];
                                 for (int ox = 0; ox < wo; ++ox) {
                                   const auto& rx = (*txs)[ox];
                                   const T gv = g[oy * wo + ox];
                                   gx[ry.i0 * w + rx.i0] += static_cast<T>(ry.w0 * rx.w0) * gv;
                                   gx[ry.i0 * w + rx.i1] += static_cast<T>(ry.w0 * rx.w1) * gv;
                                   gx[ry.i1 * w + rx.i0] += static_cast<T>(ry.w1 * rx.w0) * gv;
                                   gx[ry.i1 * w + rx.i1] += static_cast<T>(ry.w1 * rx.w1) * gv;
                                 }
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Volume-rendering ops.

// sigma: any tensor with R*N elements (per-ray densities, samples grouped by
// ray); delta: interval lengths, same layout. Returns weights [R x N]:
//   w_k = T_k * (1 - exp(-sigma_k * delta_k)),  T_k = exp(-sum_{j<k} sigma_j delta_j)
template <typename T>
Tensor<T> transmittance_weights(const Tensor<T>& sigma, const std::vector<T>& delta,
                                int rays, int samples) {
  if (sigma.numel() != static_cast<int64_t>(rays) * samples ||
      delta.size() != static_cast<size_t>(sigma.numel()))
    throw std::invalid_argument("transmittance_weights: size mismatch");
  const T* ps = sigma.ptr();
  std::vector<T> out(sigma.numel());
  auto decay = std::make_shared<std::vector<T>>(sigma.numel());  // exp(-sigma*delta)
  for (int r = 0; r < rays; ++r) {
    const int64_t base = static_cast<int64_t>(r) * samples;
    double trans = 1.0;
    for (int k = 0; k < samples; ++k) {
      const T s = ps[base + k];
      if (s < T(0))
        throw std::invalid_argument("transmittance_weights: negative density");
      const double a = static_cast<double>(s) * static_cast<double>(delta[base + k]);
      if (delta[base + k] <= T(0))
        throw std::invalid_argument("transmittance_weights: non-positive interval");
      const double e = std::exp(-a);
      (*decay)[base + k] = static_cast<T>(e);
      out[base + k] = static_cast<T>(trans * (1.0 - e));
      trans *= e;
    }
  }
  auto sn = sigma.node();
  auto del = std::make_shared<std::vector<T>>(delta);
  auto wsaved = std::make_shared<std::vector<T>>(out);
  return make_op_output<T>(
      {rays, samples}, std::move(out), {sigma},
      [sn, del, decay, wsaved, rays, samples](TensorNode<T>& o) {
        if (!sn->requires_grad) return;
        sn->ensure_grad();
        // dL/dsigma_i = delta_i * (g_i * T_{i+1} - sum_{k>i} g_k w_k)
        std::vector<double> suffix(samples + 1);
        for (int r = 0; r < rays; ++r) {
          const int64_t base = static_cast<int64_t>(r) * samples;
          suffix[samples] = 0;
          for (int k = samples - 1; k >= 0; --k)
            suffix[k] = suffix[k + 1] +
                        static_cast<double>(o.grad[base + k]) *
                            static_cast<double>((*wsaved)[base + k]);
          double trans = 1.0;
          for (int k = 0; k < samples; ++k) {
            const double tnext = trans * static_cast<double>((*decay)[base + k]);
            sn->grad[base + k] += static_cast<T>(
                static_cast<double>((*del)[base + k]) *
                (static_cast<double>(o.grad[base + k]) * tnext - suffix[k + 1]));
            trans = tnext;
          }
        }
      });
}

// out[r,c] = sum_k w[r,k] * v[r*N + k, c] : quadrature compositing of
// per-sample values v [R*N x C] with weights w [R x N].
template <typename T>
Tensor<T> composite(const Tensor<T>& w, const Tensor<T>& v) {
  if (w.shape().size() != 2 || v.shape().size() != 2 ||
      v.dim(0) != w.dim(0) * w.dim(1))
    throw std::invalid_argument("composite: v rows must equal R*N");
  const int rays = w.dim(0), samples = w.dim(1), ch = v.dim(1);
  std::vector<T> out(static_cast<int64_t>(rays) * ch);
  for (int r = 0; r < rays; ++r) {
    for (int c = 0; c < ch; ++c) {
      double acc = 0;
      for (int k = 0; k < samples; ++k)
        acc += static_cast<double>(w.ptr()[static_cast<int64_t>(r) * samples + k]) *
               static_cast<double>(
                   v.ptr()[(static_cast<int64_t>(r) * samples + k) * ch + c]);
      out[static_cast<int64_t>(r) * ch + c] = static_cast<T>(acc);
    }
  }
  auto wn = w.node(), vn = v.node();
  return make_op_output<T>(
      {rays, ch}, std::move(out), {w, v},
      [wn, vn, rays, samples, ch](TensorNode<T>& o) {
        for (int r = 0; r < rays; ++r) {
          const T* go = o.grad.data() + static_cast<int64_t>(r) * ch;
          for (int k = 0; k < samples; ++k) {
            const int64_t vrow = (static_cast<int64_t>(r) * samples + k) * ch;
            if (wn->requires_grad) {
              wn->ensure_grad();
              double acc = 0;
              for (int c = 0; c < ch; ++c)
                acc += static_cast<double>(go[c]) * static_cast<double>(vn->value[vrow + c]);
              wn->grad[static_cast<int64_t>(r) * samples + k] += static_cast<T>(acc);
            }
            if (vn->requires_grad) {
              vn->ensure_grad();
              const T wv = wn->value[static_cast<int64_t>(r) * samples + k];
              for (int c = 0; c < ch; ++c) vn->grad[vrow + c] += wv * go[c];
            }
          }
        }
      });
}

// out[r,c] = v[r,c] + bg * (1 - opacity[r]): composites a constant
// background behind partially transparent rays.
template <typename T>
Tensor<T> add_scaled_complement(const Tensor<T>& v, const Tensor<T>& opacity, T bg) {
  if (v.shape().size() != 2 || opacity.numel() != v.dim(0))
    throw std::invalid_argument("add_scaled_complement: opacity must have one entry per row");
  const int rows = v.dim(0), cols = v.dim(1);
  std::vector<T> out(v.numel());
  for (int r = 0; r < rows; ++r) {
    const T add = bg * (T(1) - opacity.ptr()[r]);
    for (int c = 0; c < cols; ++c)
      out[static_cast<int64_t>(r) * cols + c] = v.ptr()[static_cast<int64_t>(r) * cols + c] + add;
  }
  auto vn = v.node(), on = opacity.node();
  return make_op_output<T>(v.shape(), std::move(out), {v, opacity},
                           [vn, on, rows, cols, bg](TensorNode<T>& o) {
                             if (vn->requires_grad) {
                               vn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) vn->grad[i] += o.grad[i];
                             }
                             if (on->requires_grad) {
                               on->ensure_grad();
                               for (int r = 0; r < rows; ++r) {
                                 double acc = 0;
                                 for (int c = 0; c < cols; ++c)
                                   acc += static_cast<double>(o.grad[static_cast<int64_t>(r) * cols + c]);
                                 on->grad[r] -= static_cast<T>(static_cast<double>(bg) * acc);
                               }
                             }
                           });
}

// Pixel-major rows [H*W x C] -> channel-major [C,H,W]; the bridge between
// per-ray rendering output and convolutional layers.
template <typename T>
Tensor<T> rows_to_chw(const Tensor<T>& t, int h, int w) {
  if (t.shape().size() != 2 || t.dim(0) != h * w)
    throw std::invalid_argument("rows_to_chw: row count must equal h*w");
  const int c = t.dim(1);
  std::vector<T> out(t.numel());
  for (int p = 0; p < h * w; ++p)
    for (int ch = 0; ch < c; ++ch)
      out[static_cast<int64_t>(ch) * h * w + p] = t.ptr()[static_cast<int64_t>(p) * c + ch];
  auto tn = t.node();
  return make_op_output<T>({c, h, w}, std::move(out), {t},
                           [tn, h, w, c](TensorNode<T>& o) {
                             if (!tn->requires_grad) return;
                             tn->ensure_grad();
                             for (int p = 0; p < h * w; ++p)
                               for (int ch = 0; ch < c; ++ch)
                                 tn->grad[static_cast<int64_t>(p) * c + ch] +=
                                     o.grad[static_cast<int64_t>(ch) * h * w + p];
                           });
}

// Ray-interval distortion penalty, averaged over rays:
//   L = sum_{i,j} w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 d_i
// with s the normalized interval midpoints and d the normalized lengths.
template <typename T>
Tensor<T> distortion_mean(const Tensor<T>& w, const std::vector<T>& s,
                          const std::vector<T>& d) {
  if (w.shape().size() != 2 ||
      s.size() != static_cast<size_t>(w.numel()) || d.size() != s.size())
    throw std::invalid_argument("distortion_mean: size mismatch");
  const int rays = w.dim(0), samples = w.dim(1);
  double total = 0;
  const T* pw = w.ptr();
  for (int r = 0; r < rays; ++r) {
    const int64_t base = static_cast<int64_t>(r) * samples;
    double acc = 0;
    for (int i = 0; i < samples; ++i) {
      const double wi = pw[base + i];
      for (int j = 0; j < samples; ++j)
        acc += wi * static_cast<double>(pw[base + j]) *
               std::abs(static_cast<double>(s[base + i]) - static_cast<double>(s[base + j]));
      acc += (1.0 / 3.0) * wi * wi * static_cast<double>(d[base + i]);
    }
    total += acc;
  }
  auto wn = w.node();
  auto ss = std::make_shared<std::vector<T>>(s);
  auto dd = std::make_shared<std::vector<T>>(d);
  return make_op_output<T>(
      {1}, {static_cast<T>(total / rays)}, {w},
      [wn, ss, dd, rays, samples](TensorNode<T>& o) {
        if (!wn->requires_grad) return;
        wn->ensure_grad();
        const double g = static_cast<double>(o.grad[0]) / rays;
        for (int r = 0; r < rays; ++r) {
          const int64_t base = static_cast<int64_t>(r) * samples;
          for (int i = 0; i < samples; ++i) {
            double acc = 0;
            for (int j = 0; j < samples; ++j)
              acc += 2.0 * static_cast<double>(wn->value[base + j]) *
                     std::abs(static_cast<double>((*ss)[base + i]) -
                              static_cast<double>((*ss)[base + j]));
            acc += (2.0 / 3.0) * static_cast<double>(wn->value[base + i]) *
                   static_cast<double>((*dd)[base + i]);
            wn->grad[base + i] += static_cast<T>(g * acc);
          }
        }
      });
}

}  // namespace lsnerf
