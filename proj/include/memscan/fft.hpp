#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <memory>
#include <utility>

#include "memscan/tensor.hpp"

namespace memscan {
namespace detail {

template <typename T>
struct FftwTraits;

template <>
struct FftwTraits<double> {
  using complex = fftw_complex;
  using plan = fftw_plan;
  static void* alloc(size_t bytes) { return fftw_malloc(bytes); }
  static void dealloc(void* p) { fftw_free(p); }
  static plan make_forward(int h, int w, complex* in, complex* out) {
    return fftw_plan_dft_2d(h, w, in, out, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  static void exec(plan p) { fftw_execute(p); }
  static void destroy(plan p) { fftw_destroy_plan(p); }
};

template <>
struct FftwTraits<float> {
  using complex = fftwf_complex;
  using plan = fftwf_plan;
  static void* alloc(size_t bytes) { return fftwf_malloc(bytes); }
  static void dealloc(void* p) { fftwf_free(p); }
  static plan make_forward(int h, int w, complex* in, complex* out) {
    return fftwf_plan_dft_2d(h, w, in, out, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  static void exec(plan p) { fftwf_execute(p); }
  static void destroy(plan p) { fftwf_destroy_plan(p); }
};

}  // namespace detail

// Unnormalized forward 2-D DFT over an h x w grid with a reusable plan.
template <typename T>
class Fft2D {
  using Tr = detail::FftwTraits<T>;

 public:
  Fft2D(int h, int w) : h_(h), w_(w) {
    if (h < 1 || w < 1) throw ConfigError("Fft2D: degenerate grid");
    size_t bytes = sizeof(typename Tr::complex) * static_cast<size_t>(n());
    in_ = static_cast<typename Tr::complex*>(Tr::alloc(bytes));
    out_ = static_cast<typename Tr::complex*>(Tr::alloc(bytes));
    plan_ = Tr::make_forward(h, w, in_, out_);
  }
  ~Fft2D() {
    Tr::destroy(plan_);
    Tr::dealloc(in_);
    Tr::dealloc(out_);
  }
  Fft2D(const Fft2D&) = delete;
  Fft2D& operator=(const Fft2D&) = delete;

  std::int64_t n() const { return static_cast<std::int64_t>(h_) * w_; }

  void forward_real(const T* x, std::complex<T>* out) {
    for (std::int64_t i = 0; i < n(); ++i) {
      in_[i][0] = x[i];
      in_[i][1] = T(0);
    }
    run(out);
  }

  void forward_complex(const std::complex<T>* x, std::complex<T>* out) {
    for (std::int64_t i = 0; i < n(); ++i) {
      in_[i][0] = x[i].real();
      in_[i][1] = x[i].imag();
    }
    run(out);
  }

 private:
  void run(std::complex<T>* out) {
    Tr::exec(plan_);
    for (std::int64_t i = 0; i < n(); ++i) out[i] = {out_[i][0], out_[i][1]};
  }

  int h_, w_;
  typename Tr::complex* in_;
  typename Tr::complex* out_;
  typename Tr::plan plan_;
};

// Plans are cheap to build but reused heavily during training; cache per grid
// size. Single-threaded use only.
template <typename T>
Fft2D<T>& fft2d_for(int h, int w) {
  static std::map<std::pair<int, int>, std::unique_ptr<Fft2D<T>>> cache;
  auto key = std::make_pair(h, w);
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, std::make_unique<Fft2D<T>>(h, w)).first;
  return *it->second;
}

}  // namespace memscan
