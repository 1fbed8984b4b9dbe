#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "memscan/tensor.hpp"

namespace memscan {

// Seeded generator with explicit draw helpers so results do not depend on
// library-specific distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: n must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return r % n;
  }

  bool coin() { return (eng_() & 1u) != 0; }

  double normal() {
    // Box-Muller, cached second value.
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  template <typename T>
  Tensor<T> uniform_tensor(Shape s, double lo, double hi) {
    Tensor<T> t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    return t;
  }

  template <typename T>
  Tensor<T> normal_tensor(Shape s, double stddev = 1.0) {
    Tensor<T> t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal() * stddev);
    return t;
  }

  // Engine state round-trips through text for checkpointing.
  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw IoError("Rng: malformed engine state");
    has_spare_ = false;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0;
};

}  // namespace memscan
