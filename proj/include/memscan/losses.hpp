#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "memscan/fft.hpp"
#include "memscan/ops.hpp"
#include "memscan/tape.hpp"
#include "memscan/tensor.hpp"

namespace memscan {

enum class Neighborhood { kFour, kEight };

struct LossWeights {
  double delta_edge = 0.05;    // weight on the Laplacian-difference term
  double lambda_freq = 0.1;    // weight on the spectral term
  double ising_weight = 1.0;   // weight on the smoothness prior
  double epsilon = 1e-3;       // robust-penalty knee, shared by pixel and edge terms
  Neighborhood neighborhood = Neighborhood::kFour;
};

namespace detail {

template <typename T>
inline T sgn(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// Visits each unordered neighbor pair exactly once: fn(flat_p, flat_q) with
// both indices inside the same channel plane.
template <typename F>
void for_neighbor_pairs(int h, int w, Neighborhood nb, F&& fn) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::int64_t p = static_cast<std::int64_t>(y) * w + x;
      if (x + 1 < w) fn(p, p + 1);
      if (y + 1 < h) fn(p, p + w);
      if (nb == Neighborhood::kEight && y + 1 < h) {
        if (x + 1 < w) fn(p, p + w + 1);
        if (x > 0) fn(p, p + w - 1);
      }
    }
}

// 5-point Laplacian with replicated borders, one channel plane.
template <typename T>
void laplacian_replicate(const T* x, int h, int w, T* out) {
  for (int y = 0; y < h; ++y) {
    int ym = y > 0 ? y - 1 : 0;
    int yp = y + 1 < h ? y + 1 : h - 1;
    for (int xx = 0; xx < w; ++xx) {
      int xm = xx > 0 ? xx - 1 : 0;
      int xp = xx + 1 < w ? xx + 1 : w - 1;
      out[y * w + xx] = x[ym * w + xx] + x[yp * w + xx] + x[y * w + xm] + x[y * w + xp] -
                        T(4) * x[y * w + xx];
    }
  }
}

// Adjoint of laplacian_replicate: scatter g through the same clamped taps.
template <typename T>
void laplacian_replicate_adjoint(const T* g, int h, int w, T* dx) {
  for (int y = 0; y < h; ++y) {
    int ym = y > 0 ? y - 1 : 0;
    int yp = y + 1 < h ? y + 1 : h - 1;
    for (int xx = 0; xx < w; ++xx) {
      int xm = xx > 0 ? xx - 1 : 0;
      int xp = xx + 1 < w ? xx + 1 : w - 1;
      T gv = g[y * w + xx];
      dx[ym * w + xx] += gv;
      dx[yp * w + xx] += gv;
      dx[y * w + xm] += gv;
      dx[y * w + xp] += gv;
      dx[y * w + xx] -= T(4) * gv;
    }
  }
}

template <typename T>
void require_chw(const Tensor<T>& x, const char* where) {
  if (x.shape().ndim() != 3) throw ConfigError(std::string(where) + ": need {C,H,W}");
}

}  // namespace detail

// Mean absolute difference over all neighbor pairs, each pair counted from
// both sides, normalized by element count.
template <typename T>
T ising_value(const Tensor<T>& x, Neighborhood nb = Neighborhood::kFour) {
  detail::require_chw(x, "ising_value");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  T acc = 0;
  for (int i = 0; i < c; ++i) {
    const T* px = x.data() + i * plane;
    detail::for_neighbor_pairs(h, w, nb, [&](std::int64_t p, std::int64_t q) {
      acc += std::abs(px[p] - px[q]);
    });
  }
  return T(2) * acc / static_cast<T>(x.numel());
}

template <typename T>
T charbonnier_value(const Tensor<T>& x, const Tensor<T>& y, T eps) {
  check_same_shape(x, y, "charbonnier_value");
  T acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    T d = x[i] - y[i];
    acc += std::sqrt(d * d + eps * eps);
  }
  return acc / static_cast<T>(x.numel());
}

template <typename T>
T edge_value(const Tensor<T>& x, const Tensor<T>& y, T eps) {
  check_same_shape(x, y, "edge_value");
  detail::require_chw(x, "edge_value");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<T> lx(static_cast<size_t>(plane)), ly(static_cast<size_t>(plane));
  T acc = 0;
  for (int i = 0; i < c; ++i) {
    detail::laplacian_replicate(x.data() + i * plane, h, w, lx.data());
    detail::laplacian_replicate(y.data() + i * plane, h, w, ly.data());
    for (std::int64_t p = 0; p < plane; ++p) {
      T d = lx[static_cast<size_t>(p)] - ly[static_cast<size_t>(p)];
      acc += std::sqrt(d * d + eps * eps);
    }
  }
  return acc / static_cast<T>(x.numel());
}

template <typename T>
T frequency_value(const Tensor<T>& x, const Tensor<T>& y) {
  check_same_shape(x, y, "frequency_value");
  detail::require_chw(x, "frequency_value");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Fft2D<T>& fft = fft2d_for<T>(h, w);
  std::vector<T> diff(static_cast<size_t>(plane));
  std::vector<std::complex<T>> spec(static_cast<size_t>(plane));
  T acc = 0;
  for (int i = 0; i < c; ++i) {
    const T* px = x.data() + i * plane;
    const T* py = y.data() + i * plane;
    for (std::int64_t p = 0; p < plane; ++p) diff[static_cast<size_t>(p)] = px[p] - py[p];
    fft.forward_real(diff.data(), spec.data());
    for (std::int64_t p = 0; p < plane; ++p) acc += std::abs(spec[static_cast<size_t>(p)]);
  }
  return acc / static_cast<T>(x.numel());
}

// ---- tape ops ----

template <typename T>
Var ising_loss(Tape<T>& t, Var x, Neighborhood nb = Neighborhood::kFour) {
  const Tensor<T>& xv = t.val(x);
  T value = ising_value(xv, nb);
  int h = xv.shape()[1], w = xv.shape()[2];
  int c = xv.shape()[0];
  return t.push(Tensor<T>::scalar(value), {x.id}, t.needs_grad(x),
                [x, nb, c, h, w](Tape<T>& tp, int self) {
                  if (!tp.needs_grad(x)) return;
                  T go = tp.grad(Var{self})[0];
                  const Tensor<T>& xv = tp.val(x);
                  T* dx = tp.grad_buf(x).data();
                  std::int64_t plane = static_cast<std::int64_t>(h) * w;
                  T s = T(2) * go / static_cast<T>(xv.numel());
                  for (int i = 0; i < c; ++i) {
                    const T* px = xv.data() + i * plane;
                    T* pdx = dx + i * plane;
                    detail::for_neighbor_pairs(h, w, nb, [&](std::int64_t p, std::int64_t q) {
                      T g = s * detail::sgn(px[p] - px[q]);
                      pdx[p] += g;
                      pdx[q] -= g;
                    });
                  }
                });
}

template <typename T>
Var charbonnier_loss(Tape<T>& t, Var x, Var y, T eps) {
  T value = charbonnier_value(t.val(x), t.val(y), eps);
  bool ng = t.any_needs_grad({x, y});
  return t.push(Tensor<T>::scalar(value), {x.id, y.id}, ng, [x, y, eps](Tape<T>& tp, int self) {
    T go = tp.grad(Var{self})[0];
    const Tensor<T>& xv = tp.val(x);
    const Tensor<T>& yv = tp.val(y);
    T s = go / static_cast<T>(xv.numel());
    bool nx = tp.needs_grad(x), ny = tp.needs_grad(y);
    T* dx = nx ? tp.grad_buf(x).data() : nullptr;
    T* dy = ny ? tp.grad_buf(y).data() : nullptr;
    for (std::int64_t i = 0; i < xv.numel(); ++i) {
      T d = xv[i] - yv[i];
      T g = s * d / std::sqrt(d * d + eps * eps);
      if (nx) dx[i] += g;
      if (ny) dy[i] -= g;
    }
  });
}

template <typename T>
Var edge_loss(Tape<T>& t, Var x, Var y, T eps) {
  const Tensor<T>& xv = t.val(x);
  T value = edge_value(xv, t.val(y), eps);
  int c = xv.shape()[0], h = xv.shape()[1], w = xv.shape()[2];
  bool ng = t.any_needs_grad({x, y});
  return t.push(Tensor<T>::scalar(value), {x.id, y.id}, ng,
                [x, y, eps, c, h, w](Tape<T>& tp, int self) {
                  T go = tp.grad(Var{self})[0];
                  const Tensor<T>& xv = tp.val(x);
                  const Tensor<T>& yv = tp.val(y);
                  std::int64_t plane = static_cast<std::int64_t>(h) * w;
                  T s = go / static_cast<T>(xv.numel());
                  bool nx = tp.needs_grad(x), ny = tp.needs_grad(y);
                  T* dx = nx ? tp.grad_buf(x).data() : nullptr;
                  T* dy = ny ? tp.grad_buf(y).data() : nullptr;
                  std::vector<T> lx(static_cast<size_t>(plane)), ly(static_cast<size_t>(plane)),
                      glap(static_cast<size_t>(plane));
                  for (int i = 0; i < c; ++i) {
                    detail::laplacian_replicate(xv.data() + i * plane, h, w, lx.data());
                    detail::laplacian_replicate(yv.data() + i * plane, h, w, ly.data());
                    for (std::int64_t p = 0; p < plane; ++p) {
                      T d = lx[static_cast<size_t>(p)] - ly[static_cast<size_t>(p)];
                      glap[static_cast<size_t>(p)] = s * d / std::sqrt(d * d + eps * eps);
                    }
                    if (nx) detail::laplacian_replicate_adjoint(glap.data(), h, w, dx + i * plane);
                    if (ny) {
                      for (auto& g : glap) g = -g;
                      detail::laplacian_replicate_adjoint(glap.data(), h, w, dy + i * plane);
                    }
                  }
                });
}

template <typename T>
Var frequency_loss(Tape<T>& t, Var x, Var y) {
  const Tensor<T>& xv = t.val(x);
  T value = frequency_value(xv, t.val(y));
  int c = xv.shape()[0], h = xv.shape()[1], w = xv.shape()[2];
  bool ng = t.any_needs_grad({x, y});
  return t.push(
      Tensor<T>::scalar(value), {x.id, y.id}, ng, [x, y, c, h, w](Tape<T>& tp, int self) {
        T go = tp.grad(Var{self})[0];
        const Tensor<T>& xv = tp.val(x);
        const Tensor<T>& yv = tp.val(y);
        std::int64_t plane = static_cast<std::int64_t>(h) * w;
        T s = go / static_cast<T>(xv.numel());
        bool nx = tp.needs_grad(x), ny = tp.needs_grad(y);
        T* dx = nx ? tp.grad_buf(x).data() : nullptr;
        T* dy = ny ? tp.grad_buf(y).data() : nullptr;
        Fft2D<T>& fft = fft2d_for<T>(h, w);
        std::vector<T> diff(static_cast<size_t>(plane));
        std::vector<std::complex<T>> spec(static_cast<size_t>(plane));
        std::vector<std::complex<T>> sbar(static_cast<size_t>(plane));
        std::vector<std::complex<T>> gspat(static_cast<size_t>(plane));
        for (int i = 0; i < c; ++i) {
          const T* px = xv.data() + i * plane;
          const T* py = yv.data() + i * plane;
          for (std::int64_t p = 0; p < plane; ++p) diff[static_cast<size_t>(p)] = px[p] - py[p];
          fft.forward_real(diff.data(), spec.data());
          // d/d(diff) of sum_k |F_k| is Re(forward DFT of conj(F/|F|)).
          for (std::int64_t p = 0; p < plane; ++p) {
            std::complex<T> f = spec[static_cast<size_t>(p)];
            T mag = std::abs(f);
            sbar[static_cast<size_t>(p)] = mag > T(0) ? std::conj(f / mag) : std::complex<T>(0);
          }
          fft.forward_complex(sbar.data(), gspat.data());
          for (std::int64_t p = 0; p < plane; ++p) {
            T g = s * gspat[static_cast<size_t>(p)].real();
            if (nx) dx[i * plane + p] += g;
            if (ny) dy[i * plane + p] -= g;
          }
        }
      });
}

// ---- combined objective ----

struct LossBreakdown {
  double charbonnier = 0, edge = 0, frequency = 0, ising = 0, total = 0;
};

struct LossVars {
  Var charbonnier, edge, frequency, ising, total;
};

template <typename T>
LossVars total_loss(Tape<T>& t, Var restored, Var target, const LossWeights& w) {
  LossVars v;
  v.charbonnier = charbonnier_loss(t, restored, target, static_cast<T>(w.epsilon));
  v.edge = edge_loss(t, restored, target, static_cast<T>(w.epsilon));
  v.frequency = frequency_loss(t, restored, target);
  v.ising = ising_loss(t, restored, w.neighborhood);
  v.total = weighted_sum(t, {v.charbonnier, v.edge, v.frequency, v.ising},
                         {T(1), static_cast<T>(w.delta_edge), static_cast<T>(w.lambda_freq),
                          static_cast<T>(w.ising_weight)});
  return v;
}

template <typename T>
LossBreakdown loss_breakdown(const Tape<T>& t, const LossVars& v) {
  LossBreakdown b;
  b.charbonnier = static_cast<double>(t.val(v.charbonnier)[0]);
  b.edge = static_cast<double>(t.val(v.edge)[0]);
  b.frequency = static_cast<double>(t.val(v.frequency)[0]);
  b.ising = static_cast<double>(t.val(v.ising)[0]);
  b.total = static_cast<double>(t.val(v.total)[0]);
  return b;
}

// Value-only evaluation, no tape.
template <typename T>
LossBreakdown loss_report(const Tensor<T>& restored, const Tensor<T>& target,
                          const LossWeights& w) {
  LossBreakdown b;
  b.charbonnier = static_cast<double>(charbonnier_value(restored, target, static_cast<T>(w.epsilon)));
  b.edge = static_cast<double>(edge_value(restored, target, static_cast<T>(w.epsilon)));
  b.frequency = static_cast<double>(frequency_value(restored, target));
  b.ising = static_cast<double>(ising_value(restored, w.neighborhood));
  b.total = b.charbonnier + w.delta_edge * b.edge + w.lambda_freq * b.frequency +
            w.ising_weight * b.ising;
  return b;
}

}  // namespace memscan
