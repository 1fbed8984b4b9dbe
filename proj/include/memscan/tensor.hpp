#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace memscan {

// Invalid configuration (shapes, hyperparameters, file contents). CLI exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or divergent computation. CLI exit code 2.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or malformed files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major shape, rank <= 4.
// Conventions: feature maps are {C,H,W}, sequences {L,D}, matrices {R,C},
// vectors {N}, scalars {1}.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    if (dims.size() > 4) throw ConfigError("Shape: rank > 4");
    for (int d : dims) {
      if (d < 0) throw ConfigError("Shape: negative dimension");
      dim_[ndim_++] = d;
    }
  }

  int ndim() const { return ndim_; }
  int operator[](int i) const { return dim_[i]; }
  int& operator[](int i) { return dim_[i]; }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int i = 0; i < ndim_; ++i) n *= dim_[i];
    return ndim_ == 0 ? 0 : n;
  }

  bool operator==(const Shape& o) const {
    if (ndim_ != o.ndim_) return false;
    for (int i = 0; i < ndim_; ++i)
      if (dim_[i] != o.dim_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '{';
    for (int i = 0; i < ndim_; ++i) os << (i ? "," : "") << dim_[i];
    os << '}';
    return os.str();
  }

 private:
  std::array<int, 4> dim_{1, 1, 1, 1};
  int ndim_ = 0;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s) : shape_(s), data_(static_cast<size_t>(s.numel()), T(0)) {}
  Tensor(Shape s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.numel())
      throw ConfigError("Tensor: data size " + std::to_string(data_.size()) +
                        " does not match shape " + shape_.str());
  }

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, T v) {
    Tensor t(s);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  T operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Row-major indexed access; rank is the caller's responsibility.
  T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  T at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  T& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  T at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T abs_max() const {
    T m = 0;
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(where) + ": shape mismatch " + a.shape().str() + " vs " +
                      b.shape().str());
}

}  // namespace memscan
