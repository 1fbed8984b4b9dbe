#pragma once

// Image quality metrics on unit-range images: peak signal-to-noise ratio and
// the structural similarity index (gaussian-windowed, valid-region).

#include <algorithm>
#include <cmath>
#include <vector>

#include "memscan/tensor.hpp"

namespace memscan {

// Mean squared error over all elements, in double regardless of T.
template <typename T>
double mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ConfigError("mean_squared_error: shape mismatch " + a.shape().str() + " vs " +
                      b.shape().str());
  if (a.numel() == 0) throw ConfigError("mean_squared_error: empty tensors");
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

// PSNR in dB for signals on [0, 1]. Identical inputs are reported as the cap
// (100 dB) so logs stay finite.
inline constexpr double kPsnrCap = 100.0;

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  double mse = mean_squared_error(a, b);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

namespace metric_detail {

// 11-tap gaussian (sigma 1.5) normalized to sum 1; the 2-D window is the
// outer product, so separable passes with this 1-D kernel are exact.
inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(11);
    double sum = 0;
    for (int i = 0; i < 11; ++i) {
      double d = i - 5;
      v[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += v[static_cast<std::size_t>(i)];
    }
    for (double& x : v) x /= sum;
    return v;
  }();
  return w;
}

// Windowed weighted mean over every fully-interior position ("valid" region):
// {h, w} plane -> {h-10, w-10}.
inline std::vector<double> window_mean(const std::vector<double>& p, int h, int w) {
  const std::vector<double>& k = ssim_window();
  int vw = w - 10, vh = h - 10;
  std::vector<double> tmp(static_cast<std::size_t>(h) * vw);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < vw; ++x) {
      double s = 0;
      for (int i = 0; i < 11; ++i) s += k[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * vw + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(vh) * vw);
  for (int y = 0; y < vh; ++y)
    for (int x = 0; x < vw; ++x) {
      double s = 0;
      for (int i = 0; i < 11; ++i) s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * vw + x];
      out[static_cast<std::size_t>(y) * vw + x] = s;
    }
  return out;
}

}  // namespace metric_detail

// SSIM with an 11x11 gaussian window (sigma 1.5), stability constants
// K1=0.01 / K2=0.03 on dynamic range 1, averaged over the valid region and
// over channels. Symmetric in its arguments; identical inputs score exactly 1.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ConfigError("ssim: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  if (a.shape().ndim() != 3) throw ConfigError("ssim: need {C,H,W} tensors, got " + a.shape().str());
  int c = static_cast<int>(a.shape()[0]);
  int h = static_cast<int>(a.shape()[1]);
  int w = static_cast<int>(a.shape()[2]);
  if (h < 11 || w < 11)
    throw ConfigError("ssim: spatial dims must be at least 11x11, got " + a.shape().str());
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  int vh = h - 10, vw = w - 10;
  std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  double total = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = static_cast<double>(a[static_cast<std::int64_t>(ch) * static_cast<std::int64_t>(plane) + static_cast<std::int64_t>(i)]);
      y[i] = static_cast<double>(b[static_cast<std::int64_t>(ch) * static_cast<std::int64_t>(plane) + static_cast<std::int64_t>(i)]);
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    std::vector<double> mx = metric_detail::window_mean(x, h, w);
    std::vector<double> my = metric_detail::window_mean(y, h, w);
    std::vector<double> mxx = metric_detail::window_mean(xx, h, w);
    std::vector<double> myy = metric_detail::window_mean(yy, h, w);
    std::vector<double> mxy = metric_detail::window_mean(xy, h, w);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      double vx = mxx[i] - mx[i] * mx[i];
      double vy = myy[i] - my[i] * my[i];
      double cov = mxy[i] - mx[i] * my[i];
      double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
      double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
      total += num / den;
    }
  }
  return total / (static_cast<double>(c) * vh * vw);
}

}  // namespace memscan
