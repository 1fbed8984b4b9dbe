#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "memscan/tape.hpp"
#include "memscan/tensor.hpp"

namespace memscan {
namespace detail {

#define MEMSCAN_RESTRICT __restrict__

// ---- raw matmul kernels, row-major, optional accumulate ----
//
// All kernels use fixed, data-independent accumulation orders, so results are
// bit-identical from run to run on the same build.

// One output row segment of width TJ: o[0..TJ) (+)= arow[0..k) * b[., TJ).
// The contraction runs innermost with a TJ-wide accumulator, one broadcast
// multiply-add per step, so the compiler can keep the accumulator in vector
// registers for the whole k loop.
template <typename T, int TJ>
void mm_nn_row(const T* MEMSCAN_RESTRICT arow, const T* MEMSCAN_RESTRICT b, T* MEMSCAN_RESTRICT o,
               int k, int ldb, bool accum) {
  T acc[TJ];
  for (int jj = 0; jj < TJ; ++jj) acc[jj] = accum ? o[jj] : T(0);
  for (int p = 0; p < k; ++p) {
    T av = arow[p];
    const T* MEMSCAN_RESTRICT brow = b + static_cast<std::int64_t>(p) * ldb;
    for (int jj = 0; jj < TJ; ++jj) acc[jj] += av * brow[jj];
  }
  for (int jj = 0; jj < TJ; ++jj) o[jj] = acc[jj];
}

// out[n,m] (+)= a[n,k] * b[k,m]
template <typename T>
void mm_nn(const T* MEMSCAN_RESTRICT a, const T* MEMSCAN_RESTRICT b, T* MEMSCAN_RESTRICT out,
           int n, int k, int m, bool accum) {
  constexpr int TJ = 8;
  for (int i = 0; i < n; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* orow = out + static_cast<std::int64_t>(i) * m;
    int j = 0;
    for (; j + TJ <= m; j += TJ) mm_nn_row<T, TJ>(arow, b + j, orow + j, k, m, accum);
    for (; j + 4 <= m; j += 4) mm_nn_row<T, 4>(arow, b + j, orow + j, k, m, accum);
    for (; j < m; ++j) mm_nn_row<T, 1>(arow, b + j, orow + j, k, m, accum);
  }
}

// One row x four columns of a * b^T: four dot products sharing the a-row
// stream, each split over four independent partial sums so the chains
// pipeline instead of serializing on FMA latency.
template <typename T, int TJ>
void mm_nt_dots(const T* MEMSCAN_RESTRICT arow, const T* MEMSCAN_RESTRICT b, T* MEMSCAN_RESTRICT o,
                int k, int ldb, bool accum) {
  T acc[TJ][4] = {};
  int p = 0;
  for (; p + 4 <= k; p += 4) {
    for (int jj = 0; jj < TJ; ++jj) {
      const T* MEMSCAN_RESTRICT brow = b + static_cast<std::int64_t>(jj) * ldb + p;
      acc[jj][0] += arow[p] * brow[0];
      acc[jj][1] += arow[p + 1] * brow[1];
      acc[jj][2] += arow[p + 2] * brow[2];
      acc[jj][3] += arow[p + 3] * brow[3];
    }
  }
  for (; p < k; ++p)
    for (int jj = 0; jj < TJ; ++jj)
      acc[jj][0] += arow[p] * b[static_cast<std::int64_t>(jj) * ldb + p];
  for (int jj = 0; jj < TJ; ++jj) {
    T sum = (acc[jj][0] + acc[jj][1]) + (acc[jj][2] + acc[jj][3]);
    o[jj] = accum ? o[jj] + sum : sum;
  }
}

// out[n,m] (+)= a[n,k] * b[m,k]^T
//
// For tall outputs the product runs as mm_nn against a transposed copy of b
// held in a reused thread-local buffer: the copy costs k*m element moves,
// amortized over n rows, and the row kernel is far faster than strided dot
// products. Short outputs keep the direct dot-product path, where the copy
// would not pay for itself. Path choice depends only on n, so accumulation
// order stays fixed for any given call site and config.
template <typename T>
void mm_nt(const T* MEMSCAN_RESTRICT a, const T* MEMSCAN_RESTRICT b, T* MEMSCAN_RESTRICT out,
           int n, int k, int m, bool accum) {
  if (n >= 8) {
    thread_local std::vector<T> bt_store;
    bt_store.resize(static_cast<std::size_t>(k) * m);
    T* MEMSCAN_RESTRICT bt = bt_store.data();
    for (int p = 0; p < k; ++p) {
      T* MEMSCAN_RESTRICT brow = bt + static_cast<std::int64_t>(p) * m;
      for (int j = 0; j < m; ++j) brow[j] = b[static_cast<std::int64_t>(j) * k + p];
    }
    mm_nn(a, bt, out, n, k, m, accum);
    return;
  }
  for (int i = 0; i < n; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* orow = out + static_cast<std::int64_t>(i) * m;
    int j = 0;
    for (; j + 4 <= m; j += 4)
      mm_nt_dots<T, 4>(arow, b + static_cast<std::int64_t>(j) * k, orow + j, k, k, accum);
    for (; j < m; ++j)
      mm_nt_dots<T, 1>(arow, b + static_cast<std::int64_t>(j) * k, orow + j, k, k, accum);
  }
}

// out[k,m] (+)= a[n,k]^T * b[n,m]: a TP x TJ block of the (small) output
// stays in registers while the long n dimension streams past.
template <typename T, int TP, int TJ>
void mm_tn_tile(const T* MEMSCAN_RESTRICT a, const T* MEMSCAN_RESTRICT b, T* MEMSCAN_RESTRICT out,
                int n, int k, int m, bool accum) {
  T acc[TP][TJ];
  for (int pp = 0; pp < TP; ++pp)
    for (int jj = 0; jj < TJ; ++jj)
      acc[pp][jj] = accum ? out[static_cast<std::int64_t>(pp) * m + jj] : T(0);
  for (int i = 0; i < n; ++i) {
    const T* MEMSCAN_RESTRICT arow = a + static_cast<std::int64_t>(i) * k;
    const T* MEMSCAN_RESTRICT brow = b + static_cast<std::int64_t>(i) * m;
    for (int pp = 0; pp < TP; ++pp) {
      T av = arow[pp];
      for (int jj = 0; jj < TJ; ++jj) acc[pp][jj] += av * brow[jj];
    }
  }
  for (int pp = 0; pp < TP; ++pp)
    for (int jj = 0; jj < TJ; ++jj) out[static_cast<std::int64_t>(pp) * m + jj] = acc[pp][jj];
}

template <typename T>
void mm_tn(const T* MEMSCAN_RESTRICT a, const T* MEMSCAN_RESTRICT b, T* MEMSCAN_RESTRICT out,
           int n, int k, int m, bool accum) {
  constexpr int TP = 4, TJ = 8;
  int p = 0;
  for (; p + TP <= k; p += TP) {
    T* oblk = out + static_cast<std::int64_t>(p) * m;
    int j = 0;
    for (; j + TJ <= m; j += TJ) mm_tn_tile<T, TP, TJ>(a + p, b + j, oblk + j, n, k, m, accum);
    for (; j + 4 <= m; j += 4) mm_tn_tile<T, TP, 4>(a + p, b + j, oblk + j, n, k, m, accum);
    for (; j < m; ++j) mm_tn_tile<T, TP, 1>(a + p, b + j, oblk + j, n, k, m, accum);
  }
  for (; p < k; ++p) {
    T* oblk = out + static_cast<std::int64_t>(p) * m;
    int j = 0;
    for (; j + TJ <= m; j += TJ) mm_tn_tile<T, 1, TJ>(a + p, b + j, oblk + j, n, k, m, accum);
    for (; j < m; ++j) mm_tn_tile<T, 1, 1>(a + p, b + j, oblk + j, n, k, m, accum);
  }
}

// ---- direct conv kernels ----

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Keep-shape 3x3, stride 1, pad 1. Each output row accumulates across every
// input channel in a local buffer so stores stay in L1; inner loops run over
// contiguous x.
template <typename T>
void conv3x3_same(const T* MEMSCAN_RESTRICT in, const T* MEMSCAN_RESTRICT w,
                  const T* MEMSCAN_RESTRICT bias, T* MEMSCAN_RESTRICT out, int ci_n, int co_n,
                  int h, int wd, bool accum) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * wd;
  std::vector<T> rowbuf(static_cast<std::size_t>(wd));
  T* MEMSCAN_RESTRICT buf = rowbuf.data();
  for (int co = 0; co < co_n; ++co) {
    T* op = out + co * plane;
    const T* wc = w + static_cast<std::int64_t>(co) * ci_n * 9;
    T bv = bias ? bias[co] : T(0);
    for (int y = 0; y < h; ++y) {
      T* MEMSCAN_RESTRICT orow = op + static_cast<std::int64_t>(y) * wd;
      if (accum)
        for (int x = 0; x < wd; ++x) buf[x] = orow[x] + bv;
      else
        for (int x = 0; x < wd; ++x) buf[x] = bv;
      for (int ci = 0; ci < ci_n; ++ci) {
        const T* xp = in + ci * plane;
        const T* wk = wc + static_cast<std::int64_t>(ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
          int yy = y + ky - 1;
          if (yy < 0 || yy >= h) continue;
          const T* MEMSCAN_RESTRICT xrow = xp + static_cast<std::int64_t>(yy) * wd;
          T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
          for (int x = 1; x + 1 < wd; ++x)
            buf[x] += w0 * xrow[x - 1] + w1 * xrow[x] + w2 * xrow[x + 1];
          buf[0] += w1 * xrow[0];
          if (wd > 1) {
            buf[0] += w2 * xrow[1];
            buf[wd - 1] += w0 * xrow[wd - 2] + w1 * xrow[wd - 1];
          }
        }
      }
      for (int x = 0; x < wd; ++x) orow[x] = buf[x];
    }
  }
}

// First/last output index whose input index ox*stride + off stays in [0, n).
inline int conv_x_lo(int off, int stride) {
  return off >= 0 ? 0 : (-off + stride - 1) / stride;
}
inline int conv_x_hi(int off, int stride, int n, int out_n) {  // exclusive
  if (off >= n) return 0;
  return std::min(out_n, (n - 1 - off) / stride + 1);
}

// Reused packing buffer for the patch-matrix conv paths below.
template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

// Packs conv input patches into a matrix with one row per weight tap
// (ci, ky, kx) and one column per output position, so convolutions become
// plain matrix products against the fast kernels above. Out-of-range taps
// pack as zeros. Row writes are contiguous; stride-1 rows are straight copies.
template <typename T>
void conv_pack_patches(const T* MEMSCAN_RESTRICT in, T* MEMSCAN_RESTRICT pk, int ci_n, int h,
                       int wd, int k, int stride, int pad, int ho, int wo) {
  const std::int64_t iplane = static_cast<std::int64_t>(h) * wd;
  const std::int64_t opos = static_cast<std::int64_t>(ho) * wo;
  T* row = pk;
  for (int ci = 0; ci < ci_n; ++ci) {
    const T* xp = in + ci * iplane;
    for (int ky = 0; ky < k; ++ky) {
      int offy = ky - pad;
      int y0 = conv_x_lo(offy, stride), y1 = conv_x_hi(offy, stride, h, ho);
      for (int kx = 0; kx < k; ++kx, row += opos) {
        int offx = kx - pad;
        int x0 = conv_x_lo(offx, stride), x1 = conv_x_hi(offx, stride, wd, wo);
        if (y0 > 0) std::fill(row, row + static_cast<std::int64_t>(y0) * wo, T(0));
        if (y1 < ho) std::fill(row + static_cast<std::int64_t>(y1) * wo, row + opos, T(0));
        for (int oy = y0; oy < y1; ++oy) {
          T* MEMSCAN_RESTRICT orow = row + static_cast<std::int64_t>(oy) * wo;
          const T* MEMSCAN_RESTRICT xrow =
              xp + (static_cast<std::int64_t>(oy) * stride + offy) * wd + offx;
          for (int ox = 0; ox < x0; ++ox) orow[ox] = T(0);
          if (stride == 1) {
            std::memcpy(orow + x0, xrow + x0, static_cast<std::size_t>(x1 - x0) * sizeof(T));
          } else {
            for (int ox = x0; ox < x1; ++ox) orow[ox] = xrow[static_cast<std::int64_t>(ox) * stride];
          }
          for (int ox = x1; ox < wo; ++ox) orow[ox] = T(0);
        }
      }
    }
  }
}

// Writes bias (or zero) into out, or adds bias on top when accumulating, so a
// following accumulate-mode matrix product completes the convolution.
template <typename T>
void conv_seed_bias(const T* bias, T* MEMSCAN_RESTRICT out, int co_n, std::int64_t oplane,
                    bool accum) {
  for (int co = 0; co < co_n; ++co) {
    T* op = out + co * oplane;
    if (!accum) {
      T b = bias ? bias[co] : T(0);
      for (std::int64_t i = 0; i < oplane; ++i) op[i] = b;
    } else if (bias) {
      T b = bias[co];
      for (std::int64_t i = 0; i < oplane; ++i) op[i] += b;
    }
  }
}

template <typename T>
void conv2d_fwd(const T* in, const T* w, const T* bias, T* out, int ci_n, int co_n, int h, int wd,
                int k, int stride, int pad, bool accum = false) {
  if (k == 3 && stride == 1 && pad == 1) {
    conv3x3_same(in, w, bias, out, ci_n, co_n, h, wd, accum);
    return;
  }
  int ho = conv_out_dim(h, k, stride, pad);
  int wo = conv_out_dim(wd, k, stride, pad);
  const std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
  conv_seed_bias(bias, out, co_n, oplane, accum);
  if (k == 1 && stride == 1 && pad == 0) {
    // 1x1: already a matrix product, no packing needed.
    mm_nn(w, in, out, co_n, ci_n, static_cast<int>(oplane), true);
    return;
  }
  std::vector<T>& buf = conv_scratch<T>();
  buf.resize(static_cast<std::size_t>(ci_n) * k * k * oplane);
  conv_pack_patches(in, buf.data(), ci_n, h, wd, k, stride, pad, ho, wo);
  mm_nn(w, buf.data(), out, co_n, ci_n * k * k, static_cast<int>(oplane), true);
}

// dW for conv: dw[co,ci,ky,kx] += sum_{oy,ox} g[co,oy,ox] * in[ci, oy*s+ky-p, ox*s+kx-p].
// Runs as g times the packed patch matrix.
template <typename T>
void conv2d_grad_w(const T* MEMSCAN_RESTRICT in, const T* MEMSCAN_RESTRICT g,
                   T* MEMSCAN_RESTRICT dw, int ci_n, int co_n, int h, int wd, int k, int stride,
                   int pad) {
  int ho = conv_out_dim(h, k, stride, pad);
  int wo = conv_out_dim(wd, k, stride, pad);
  const std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
  if (k == 1 && stride == 1 && pad == 0) {
    mm_nt(g, in, dw, co_n, static_cast<int>(oplane), ci_n, true);
    return;
  }
  std::vector<T>& buf = conv_scratch<T>();
  buf.resize(static_cast<std::size_t>(ci_n) * k * k * oplane);
  conv_pack_patches(in, buf.data(), ci_n, h, wd, k, stride, pad, ho, wo);
  mm_nt(g, buf.data(), dw, co_n, static_cast<int>(oplane), ci_n * k * k, true);
}

// dX for conv. Stride 1 uses the forward kernel on flipped, channel-swapped
// weights; strided computes the per-tap gradient matrix w^T * g, then
// scatter-adds it back onto the input grid.
template <typename T>
void conv2d_grad_x(const T* g, const T* w, T* dx, int ci_n, int co_n, int h, int wd, int k,
                   int stride, int pad) {
  int ho = conv_out_dim(h, k, stride, pad);
  int wo = conv_out_dim(wd, k, stride, pad);
  if (stride == 1 && 2 * pad == k - 1) {
    std::vector<T> wt(static_cast<size_t>(ci_n) * co_n * k * k);
    for (int co = 0; co < co_n; ++co)
      for (int ci = 0; ci < ci_n; ++ci)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            wt[((static_cast<std::int64_t>(ci) * co_n + co) * k + (k - 1 - ky)) * k +
               (k - 1 - kx)] =
                w[((static_cast<std::int64_t>(co) * ci_n + ci) * k + ky) * k + kx];
    conv2d_fwd<T>(g, wt.data(), nullptr, dx, co_n, ci_n, ho, wo, k, 1, pad, true);
    return;
  }
  const std::int64_t iplane = static_cast<std::int64_t>(h) * wd;
  const std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
  std::vector<T>& buf = conv_scratch<T>();
  buf.resize(static_cast<std::size_t>(ci_n) * k * k * oplane);
  T* MEMSCAN_RESTRICT dp = buf.data();
  mm_tn(w, g, dp, co_n, ci_n * k * k, static_cast<int>(oplane), false);
  const T* row = dp;
  for (int ci = 0; ci < ci_n; ++ci) {
    T* dxp = dx + ci * iplane;
    for (int ky = 0; ky < k; ++ky) {
      int offy = ky - pad;
      int y0 = conv_x_lo(offy, stride), y1 = conv_x_hi(offy, stride, h, ho);
      for (int kx = 0; kx < k; ++kx, row += oplane) {
        int offx = kx - pad;
        int x0 = conv_x_lo(offx, stride), x1 = conv_x_hi(offx, stride, wd, wo);
        for (int oy = y0; oy < y1; ++oy) {
          const T* MEMSCAN_RESTRICT drow = row + static_cast<std::int64_t>(oy) * wo;
          T* MEMSCAN_RESTRICT dxrow =
              dxp + (static_cast<std::int64_t>(oy) * stride + offy) * wd + offx;
          for (int ox = x0; ox < x1; ++ox) dxrow[static_cast<std::int64_t>(ox) * stride] += drow[ox];
        }
      }
    }
  }
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape ops. Each returns a new Var; backward closures read parent values from
// the tape and accumulate into parent gradient buffers.
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "add");
  Tensor<T> out(t.val(a).shape());
  const T* pa = t.val(a).data();
  const T* pb = t.val(b).data();
  T* po = out.data();
  std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  bool ng = t.any_needs_grad({a, b});
  return t.push(std::move(out), {a.id, b.id}, ng, [a, b](Tape<T>& tp, int self) {
    const Tensor<T>& g = tp.grad(Var{self});
    for (Var v : {a, b}) {
      if (!tp.needs_grad(v)) continue;
      T* dst = tp.grad_buf(v).data();
      const T* src = g.data();
      for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "sub");
  Tensor<T> out(t.val(a).shape());
  const T* pa = t.val(a).data();
  const T* pb = t.val(b).data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  bool ng = t.any_needs_grad({a, b});
  return t.push(std::move(out), {a.id, b.id}, ng, [a, b](Tape<T>& tp, int self) {
    const Tensor<T>& g = tp.grad(Var{self});
    if (tp.needs_grad(a)) {
      T* dst = tp.grad_buf(a).data();
      for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data()[i];
    }
    if (tp.needs_grad(b)) {
      T* dst = tp.grad_buf(b).data();
      for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] -= g.data()[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "mul");
  Tensor<T> out(t.val(a).shape());
  const T* pa = t.val(a).data();
  const T* pb = t.val(b).data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  bool ng = t.any_needs_grad({a, b});
  return t.push(std::move(out), {a.id, b.id}, ng, [a, b](Tape<T>& tp, int self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const T* pa = tp.val(a).data();
    const T* pb = tp.val(b).data();
    if (tp.needs_grad(a)) {
      T* dst = tp.grad_buf(a).data();
      for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data()[i] * pb[i];
    }
    if (tp.needs_grad(b)) {
      T* dst = tp.grad_buf(b).data();
      for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data()[i] * pa[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  Tensor<T> out(t.val(a).shape());
  const T* pa = t.val(a).data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  return t.push(std::move(out), {a.id}, t.needs_grad(a), [a, s](Tape<T>& tp, int self) {
    if (!tp.needs_grad(a)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    T* dst = tp.grad_buf(a).data();
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data()[i] * s;
  });
}

template <typename T>
Var silu(Tape<T>& t, Var a) {
  Tensor<T> out(t.val(a).shape());
  const T* pa = t.val(a).data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * detail::sigmoid(pa[i]);
  return t.push(std::move(out), {a.id}, t.needs_grad(a), [a](Tape<T>& tp, int self) {
    if (!tp.needs_grad(a)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    const T* pa = tp.val(a).data();
    T* dst = tp.grad_buf(a).data();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      T s = detail::sigmoid(pa[i]);
      dst[i] += g.data()[i] * (s + pa[i] * s * (T(1) - s));
    }
  });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  Tensor<T> out(t.val(a).shape());
  const T* pa = t.val(a).data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  return t.push(std::move(out), {a.id}, t.needs_grad(a), [a](Tape<T>& tp, int self) {
    if (!tp.needs_grad(a)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    const T* pa = tp.val(a).data();
    T* dst = tp.grad_buf(a).data();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (pa[i] > T(0)) dst[i] += g.data()[i];
  });
}

// x: {L,Din}, w: {Dout,Din}, b: {Dout} or invalid Var for no bias.
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b = {}) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& wv = t.val(w);
  if (xv.shape().ndim() != 2 || wv.shape().ndim() != 2 || xv.shape()[1] != wv.shape()[1])
    throw ConfigError("linear: incompatible shapes " + xv.shape().str() + " x " +
                      wv.shape().str());
  int L = xv.shape()[0], din = xv.shape()[1], dout = wv.shape()[0];
  if (b.valid() && t.val(b).numel() != dout) throw ConfigError("linear: bias size mismatch");
  Tensor<T> out({L, dout});
  detail::mm_nt(xv.data(), wv.data(), out.data(), L, din, dout, false);
  if (b.valid()) {
    const T* pb = t.val(b).data();
    for (int l = 0; l < L; ++l)
      for (int o = 0; o < dout; ++o) out.at(l, o) += pb[o];
  }
  std::vector<int> parents{x.id, w.id};
  if (b.valid()) parents.push_back(b.id);
  bool ng = t.any_needs_grad({x, w, b});
  return t.push(std::move(out), std::move(parents), ng,
                [x, w, b, L, din, dout](Tape<T>& tp, int self) {
                  const Tensor<T>& g = tp.grad(Var{self});
                  if (tp.needs_grad(x))
                    detail::mm_nn(g.data(), tp.val(w).data(), tp.grad_buf(x).data(), L, dout, din,
                                  true);
                  if (tp.needs_grad(w))
                    detail::mm_tn(g.data(), tp.val(x).data(), tp.grad_buf(w).data(), L, dout, din,
                                  true);
                  if (b.valid() && tp.needs_grad(b)) {
                    T* db = tp.grad_buf(b).data();
                    for (int l = 0; l < L; ++l)
                      for (int o = 0; o < dout; ++o) db[o] += g.at(l, o);
                  }
                });
}

// a: {n,k} * b: {k,m}
template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.val(a);
  const Tensor<T>& bv = t.val(b);
  if (av.shape().ndim() != 2 || bv.shape().ndim() != 2 || av.shape()[1] != bv.shape()[0])
    throw ConfigError("matmul: incompatible shapes " + av.shape().str() + " x " +
                      bv.shape().str());
  int n = av.shape()[0], k = av.shape()[1], m = bv.shape()[1];
  Tensor<T> out({n, m});
  detail::mm_nn(av.data(), bv.data(), out.data(), n, k, m, false);
  bool ng = t.any_needs_grad({a, b});
  return t.push(std::move(out), {a.id, b.id}, ng, [a, b, n, k, m](Tape<T>& tp, int self) {
    const Tensor<T>& g = tp.grad(Var{self});
    if (tp.needs_grad(a))
      detail::mm_nt(g.data(), tp.val(b).data(), tp.grad_buf(a).data(), n, m, k, true);
    if (tp.needs_grad(b))
      detail::mm_tn(tp.val(a).data(), g.data(), tp.grad_buf(b).data(), n, k, m, true);
  });
}

// a: {n,k} * b^T where b: {m,k}
template <typename T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.val(a);
  const Tensor<T>& bv = t.val(b);
  if (av.shape().ndim() != 2 || bv.shape().ndim() != 2 || av.shape()[1] != bv.shape()[1])
    throw ConfigError("matmul_nt: incompatible shapes " + av.shape().str() + " x " +
                      bv.shape().str());
  int n = av.shape()[0], k = av.shape()[1], m = bv.shape()[0];
  Tensor<T> out({n, m});
  detail::mm_nt(av.data(), bv.data(), out.data(), n, k, m, false);
  bool ng = t.any_needs_grad({a, b});
  return t.push(std::move(out), {a.id, b.id}, ng, [a, b, n, k, m](Tape<T>& tp, int self) {
    const Tensor<T>& g = tp.grad(Var{self});
    if (tp.needs_grad(a))
      detail::mm_nn(g.data(), tp.val(b).data(), tp.grad_buf(a).data(), n, m, k, true);
    if (tp.needs_grad(b))
      detail::mm_tn(g.data(), tp.val(a).data(), tp.grad_buf(b).data(), n, m, k, true);
  });
}

// 1x1 convolution: x {Ci,H,W}, w {Co,Ci}, b {Co} or invalid.
template <typename T>
Var pointwise_conv(Tape<T>& t, Var x, Var w, Var b = {}) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& wv = t.val(w);
  if (xv.shape().ndim() != 3 || wv.shape().ndim() != 2 || wv.shape()[1] != xv.shape()[0])
    throw ConfigError("pointwise_conv: incompatible shapes " + xv.shape().str() + " x " +
                      wv.shape().str());
  int ci = xv.shape()[0], h = xv.shape()[1], wd = xv.shape()[2], co = wv.shape()[0];
  if (b.valid() && t.val(b).numel() != co)
    throw ConfigError("pointwise_conv: bias size mismatch");
  std::int64_t hw = static_cast<std::int64_t>(h) * wd;
  Tensor<T> out({co, h, wd});
  detail::mm_nn(wv.data(), xv.data(), out.data(), co, ci, static_cast<int>(hw), false);
  if (b.valid()) {
    const T* pb = t.val(b).data();
    for (int c = 0; c < co; ++c) {
      T* row = out.data() + c * hw;
      for (std::int64_t i = 0; i < hw; ++i) row[i] += pb[c];
    }
  }
  std::vector<int> parents{x.id, w.id};
  if (b.valid()) parents.push_back(b.id);
  bool ng = t.any_needs_grad({x, w, b});
  return t.push(std::move(out), std::move(parents), ng,
                [x, w, b, ci, co, hw](Tape<T>& tp, int self) {
                  const Tensor<T>& g = tp.grad(Var{self});
                  int m = static_cast<int>(hw);
                  if (tp.needs_grad(x))
                    detail::mm_tn(tp.val(w).data(), g.data(), tp.grad_buf(x).data(), co, ci, m,
                                  true);
                  if (tp.needs_grad(w))
                    detail::mm_nt(g.data(), tp.val(x).data(), tp.grad_buf(w).data(), co, m, ci,
                                  true);
                  if (b.valid() && tp.needs_grad(b)) {
                    T* db = tp.grad_buf(b).data();
                    for (int c = 0; c < co; ++c) {
                      const T* row = g.data() + c * hw;
                      T acc = 0;
                      for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
                      db[c] += acc;
                    }
                  }
                });
}

// x {Ci,H,W}, w {Co,Ci,k,k}, zero padding.
template <typename T>
Var conv2d(Tape<T>& t, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& wv = t.val(w);
  if (xv.shape().ndim() != 3 || wv.shape().ndim() != 4 || wv.shape()[1] != xv.shape()[0] ||
      wv.shape()[2] != wv.shape()[3])
    throw ConfigError("conv2d: incompatible shapes " + xv.shape().str() + " x " +
                      wv.shape().str());
  int ci = xv.shape()[0], h = xv.shape()[1], wd = xv.shape()[2];
  int co = wv.shape()[0], k = wv.shape()[2];
  if (b.valid() && t.val(b).numel() != co) throw ConfigError("conv2d: bias size mismatch");
  int ho = detail::conv_out_dim(h, k, stride, pad);
  int wo = detail::conv_out_dim(wd, k, stride, pad);
  if (ho < 1 || wo < 1) throw ConfigError("conv2d: output would be empty");
  Tensor<T> out({co, ho, wo});
  detail::conv2d_fwd(xv.data(), wv.data(), b.valid() ? t.val(b).data() : nullptr, out.data(), ci,
                     co, h, wd, k, stride, pad);
  std::vector<int> parents{x.id, w.id};
  if (b.valid()) parents.push_back(b.id);
  bool ng = t.any_needs_grad({x, w, b});
  return t.push(std::move(out), std::move(parents), ng,
                [x, w, b, ci, co, h, wd, k, stride, pad, ho, wo](Tape<T>& tp, int self) {
                  const Tensor<T>& g = tp.grad(Var{self});
                  if (tp.needs_grad(x))
                    detail::conv2d_grad_x(g.data(), tp.val(w).data(), tp.grad_buf(x).data(), ci,
                                          co, h, wd, k, stride, pad);
                  if (tp.needs_grad(w))
                    detail::conv2d_grad_w(tp.val(x).data(), g.data(), tp.grad_buf(w).data(), ci,
                                          co, h, wd, k, stride, pad);
                  if (b.valid() && tp.needs_grad(b)) {
                    T* db = tp.grad_buf(b).data();
                    std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
                    for (int c = 0; c < co; ++c) {
                      const T* row = g.data() + c * oplane;
                      T acc = 0;
                      for (std::int64_t i = 0; i < oplane; ++i) acc += row[i];
                      db[c] += acc;
                    }
                  }
                });
}

// Layer norm across channels, per spatial position. x {C,H,W}, gamma/beta {C}.
template <typename T>
Var layer_norm_chan(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
  const Tensor<T>& xv = t.val(x);
  if (xv.shape().ndim() != 3) throw ConfigError("layer_norm_chan: need {C,H,W}");
  int c = xv.shape()[0], h = xv.shape()[1], wd = xv.shape()[2];
  if (t.val(gamma).numel() != c || t.val(beta).numel() != c)
    throw ConfigError("layer_norm_chan: gamma/beta size mismatch");
  std::int64_t hw = static_cast<std::int64_t>(h) * wd;
  Tensor<T> out(xv.shape());
  auto saved = std::make_shared<Tensor<T>>(Shape{2, h, wd});  // mean, inv std per position
  const T* px = xv.data();
  const T* pg = t.val(gamma).data();
  const T* pb = t.val(beta).data();
  for (std::int64_t p = 0; p < hw; ++p) {
    T mean = 0;
    for (int i = 0; i < c; ++i) mean += px[i * hw + p];
    mean /= c;
    T var = 0;
    for (int i = 0; i < c; ++i) {
      T d = px[i * hw + p] - mean;
      var += d * d;
    }
    var /= c;
    T istd = T(1) / std::sqrt(var + eps);
    saved->data()[p] = mean;
    saved->data()[hw + p] = istd;
    for (int i = 0; i < c; ++i)
      out.data()[i * hw + p] = (px[i * hw + p] - mean) * istd * pg[i] + pb[i];
  }
  bool ng = t.any_needs_grad({x, gamma, beta});
  return t.push(std::move(out), {x.id, gamma.id, beta.id}, ng,
                [x, gamma, beta, c, hw, saved](Tape<T>& tp, int self) {
                  const Tensor<T>& g = tp.grad(Var{self});
                  const T* px = tp.val(x).data();
                  const T* pg = tp.val(gamma).data();
                  bool nx = tp.needs_grad(x);
                  bool ngm = tp.needs_grad(gamma);
                  bool nbt = tp.needs_grad(beta);
                  T* dx = nx ? tp.grad_buf(x).data() : nullptr;
                  T* dgm = ngm ? tp.grad_buf(gamma).data() : nullptr;
                  T* dbt = nbt ? tp.grad_buf(beta).data() : nullptr;
                  for (std::int64_t p = 0; p < hw; ++p) {
                    T mean = saved->data()[p];
                    T istd = saved->data()[hw + p];
                    T sum_dh = 0, sum_dh_xh = 0;
                    for (int i = 0; i < c; ++i) {
                      T xh = (px[i * hw + p] - mean) * istd;
                      T go = g.data()[i * hw + p];
                      if (ngm) dgm[i] += go * xh;
                      if (nbt) dbt[i] += go;
                      if (nx) {
                        T dh = go * pg[i];
                        sum_dh += dh;
                        sum_dh_xh += dh * xh;
                      }
                    }
                    if (nx) {
                      for (int i = 0; i < c; ++i) {
                        T xh = (px[i * hw + p] - mean) * istd;
                        T dh = g.data()[i * hw + p] * pg[i];
                        dx[i * hw + p] += istd * (dh - sum_dh / c - xh * sum_dh_xh / c);
                      }
                    }
                  }
                });
}

// Softmax over the last axis of a {R,C} matrix.
template <typename T>
Var softmax_rows(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.val(x);
  if (xv.shape().ndim() != 2) throw ConfigError("softmax_rows: need {R,C}");
  int r = xv.shape()[0], c = xv.shape()[1];
  Tensor<T> out(xv.shape());
  for (int i = 0; i < r; ++i) {
    const T* row = xv.data() + static_cast<std::int64_t>(i) * c;
    T* orow = out.data() + static_cast<std::int64_t>(i) * c;
    T m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    T sum = 0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - m);
      sum += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= sum;
  }
  return t.push(std::move(out), {x.id}, t.needs_grad(x), [x, r, c](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& s = tp.val(Var{self});
    T* dx = tp.grad_buf(x).data();
    for (int i = 0; i < r; ++i) {
      const T* gr = g.data() + static_cast<std::int64_t>(i) * c;
      const T* sr = s.data() + static_cast<std::int64_t>(i) * c;
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += gr[j] * sr[j];
      T* dr = dx + static_cast<std::int64_t>(i) * c;
      for (int j = 0; j < c; ++j) dr[j] += sr[j] * (gr[j] - dot);
    }
  });
}

// {C,H,W} feature map -> {H*W, C} sequence in raster order.
template <typename T>
Var chw_to_seq(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.val(x);
  if (xv.shape().ndim() != 3) throw ConfigError("chw_to_seq: need {C,H,W}");
  int c = xv.shape()[0];
  std::int64_t hw = static_cast<std::int64_t>(xv.shape()[1]) * xv.shape()[2];
  Tensor<T> out({static_cast<int>(hw), c});
  for (int i = 0; i < c; ++i)
    for (std::int64_t p = 0; p < hw; ++p) out.data()[p * c + i] = xv.data()[i * hw + p];
  return t.push(std::move(out), {x.id}, t.needs_grad(x), [x, c, hw](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    T* dx = tp.grad_buf(x).data();
    for (int i = 0; i < c; ++i)
      for (std::int64_t p = 0; p < hw; ++p) dx[i * hw + p] += g.data()[p * c + i];
  });
}

// {L,C} sequence -> {C,H,W} with L == H*W.
template <typename T>
Var seq_to_chw(Tape<T>& t, Var x, int h, int w) {
  const Tensor<T>& xv = t.val(x);
  if (xv.shape().ndim() != 2 || xv.shape()[0] != h * w)
    throw ConfigError("seq_to_chw: sequence length does not match " + std::to_string(h) + "x" +
                      std::to_string(w));
  int c = xv.shape()[1];
  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor<T> out({c, h, w});
  for (std::int64_t p = 0; p < hw; ++p)
    for (int i = 0; i < c; ++i) out.data()[i * hw + p] = xv.data()[p * c + i];
  return t.push(std::move(out), {x.id}, t.needs_grad(x), [x, c, hw](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    T* dx = tp.grad_buf(x).data();
    for (std::int64_t p = 0; p < hw; ++p)
      for (int i = 0; i < c; ++i) dx[p * c + i] += g.data()[i * hw + p];
  });
}

// Same data, new shape; numel must match.
template <typename T>
Var reshape(Tape<T>& t, Var x, Shape s) {
  const Tensor<T>& xv = t.val(x);
  if (xv.numel() != s.numel())
    throw ConfigError("reshape: numel mismatch " + xv.shape().str() + " -> " + s.str());
  Tensor<T> out(s, xv.vec());
  return t.push(std::move(out), {x.id}, t.needs_grad(x), [x](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    T* dst = tp.grad_buf(x).data();
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data()[i];
  });
}

template <typename T>
Var concat_chan(Tape<T>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_chan: empty list");
  int h = t.val(parts[0]).shape()[1], w = t.val(parts[0]).shape()[2];
  int ctot = 0;
  for (Var p : parts) {
    const Shape& s = t.val(p).shape();
    if (s.ndim() != 3 || s[1] != h || s[2] != w)
      throw ConfigError("concat_chan: spatial mismatch");
    ctot += s[0];
  }
  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor<T> out({ctot, h, w});
  std::int64_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& pv = t.val(p);
    std::memcpy(out.data() + off, pv.data(), sizeof(T) * static_cast<size_t>(pv.numel()));
    off += pv.numel();
  }
  std::vector<int> parents;
  bool ng = false;
  for (Var p : parts) {
    parents.push_back(p.id);
    ng = ng || t.needs_grad(p);
  }
  std::vector<Var> captured = parts;
  return t.push(std::move(out), std::move(parents), ng,
                [captured](Tape<T>& tp, int self) {
                  const Tensor<T>& g = tp.grad(Var{self});
                  std::int64_t off = 0;
                  for (Var p : captured) {
                    std::int64_t n = tp.val(p).numel();
                    if (tp.needs_grad(p)) {
                      T* dst = tp.grad_buf(p).data();
                      const T* src = g.data() + off;
                      for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
                    }
                    off += n;
                  }
                });
}

template <typename T>
Var slice_chan(Tape<T>& t, Var x, int c0, int len) {
  const Tensor<T>& xv = t.val(x);
  if (xv.shape().ndim() != 3 || c0 < 0 || len < 1 || c0 + len > xv.shape()[0])
    throw ConfigError("slice_chan: bad range [" + std::to_string(c0) + "," +
                      std::to_string(c0 + len) + ") for " + xv.shape().str());
  int h = xv.shape()[1], w = xv.shape()[2];
  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor<T> out({len, h, w});
  std::memcpy(out.data(), xv.data() + c0 * hw, sizeof(T) * static_cast<size_t>(out.numel()));
  return t.push(std::move(out), {x.id}, t.needs_grad(x), [x, c0, hw](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    T* dst = tp.grad_buf(x).data() + c0 * hw;
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data()[i];
  });
}

template <typename T>
Var upsample_nearest2(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.val(x);
  if (xv.shape().ndim() != 3) throw ConfigError("upsample_nearest2: need {C,H,W}");
  int c = xv.shape()[0], h = xv.shape()[1], w = xv.shape()[2];
  Tensor<T> out({c, 2 * h, 2 * w});
  for (int i = 0; i < c; ++i)
    for (int y = 0; y < 2 * h; ++y) {
      const T* src = xv.data() + (static_cast<std::int64_t>(i) * h + y / 2) * w;
      T* dst = out.data() + (static_cast<std::int64_t>(i) * 2 * h + y) * 2 * w;
      for (int xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  return t.push(std::move(out), {x.id}, t.needs_grad(x), [x, c, h, w](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(Var{self});
    T* dx = tp.grad_buf(x).data();
    for (int i = 0; i < c; ++i)
      for (int y = 0; y < 2 * h; ++y) {
        const T* grow = g.data() + (static_cast<std::int64_t>(i) * 2 * h + y) * 2 * w;
        T* drow = dx + (static_cast<std::int64_t>(i) * h + y / 2) * w;
        for (int xx = 0; xx < 2 * w; ++xx) drow[xx / 2] += grow[xx];
      }
  });
}

template <typename T>
Var sum_all(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.val(x);
  T acc = 0;
  for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv.data()[i];
  return t.push(Tensor<T>::scalar(acc), {x.id}, t.needs_grad(x), [x](Tape<T>& tp, int self) {
    if (!tp.needs_grad(x)) return;
    T g = tp.grad(Var{self})[0];
    T* dst = tp.grad_buf(x).data();
    for (std::int64_t i = 0; i < tp.val(x).numel(); ++i) dst[i] += g;
  });
}

template <typename T>
Var mean_all(Tape<T>& t, Var x) {
  std::int64_t n = t.val(x).numel();
  return scale(t, sum_all(t, x), T(1) / static_cast<T>(n));
}

// total = sum_i weights[i] * scalars[i]
template <typename T>
Var weighted_sum(Tape<T>& t, const std::vector<Var>& scalars, const std::vector<T>& weights) {
  if (scalars.size() != weights.size() || scalars.empty())
    throw ConfigError("weighted_sum: size mismatch");
  T acc = 0;
  std::vector<int> parents;
  bool ng = false;
  for (size_t i = 0; i < scalars.size(); ++i) {
    if (t.val(scalars[i]).numel() != 1) throw ConfigError("weighted_sum: non-scalar input");
    acc += weights[i] * t.val(scalars[i])[0];
    parents.push_back(scalars[i].id);
    ng = ng || t.needs_grad(scalars[i]);
  }
  std::vector<Var> vs = scalars;
  std::vector<T> ws = weights;
  return t.push(Tensor<T>::scalar(acc), std::move(parents), ng,
                [vs, ws](Tape<T>& tp, int self) {
                  T g = tp.grad(Var{self})[0];
                  for (size_t i = 0; i < vs.size(); ++i)
                    if (tp.needs_grad(vs[i])) tp.grad_buf(vs[i])[0] += g * ws[i];
                });
}

}  // namespace memscan
