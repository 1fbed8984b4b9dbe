#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "memscan/rng.hpp"
#include "memscan/tensor.hpp"

namespace memscan {

struct GradCheckOptions {
  double h = 1e-5;          // central-difference step
  double rel_floor = 1e-6;  // denominator floor so zero-vs-zero stays zero
  double tol = 1e-4;        // pass threshold on max relative error
  // When > 0, check at most this many randomly chosen entries per tensor
  // instead of every entry.
  int max_entries_per_tensor = 0;
  std::uint64_t seed = 0x5eed;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_diff = 0.0;
  std::int64_t checked = 0;
  bool pass = true;
};

// Compares analytic gradients against central finite differences.
//
// `params` are the tensors the objective reads; `analytic[i]` is the already
// computed gradient for `params[i]`. `eval` recomputes the scalar objective
// from the current contents of the param tensors; entries are perturbed in
// place and restored.
template <typename Eval>
GradCheckReport grad_check(const std::vector<Tensor<double>*>& params,
                           const std::vector<Tensor<double>>& analytic, Eval&& eval,
                           const GradCheckOptions& opt = {}) {
  if (params.size() != analytic.size())
    throw ConfigError("grad_check: params/analytic size mismatch");
  GradCheckReport rep;
  Rng rng(opt.seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = *params[pi];
    if (!(p.shape() == analytic[pi].shape()))
      throw ConfigError("grad_check: gradient shape mismatch for param " + std::to_string(pi));
    std::vector<std::int64_t> idx;
    std::int64_t n = p.numel();
    if (opt.max_entries_per_tensor > 0 && n > opt.max_entries_per_tensor) {
      for (int j = 0; j < opt.max_entries_per_tensor; ++j)
        idx.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
    } else {
      idx.resize(static_cast<size_t>(n));
      for (std::int64_t j = 0; j < n; ++j) idx[static_cast<size_t>(j)] = j;
    }
    for (std::int64_t j : idx) {
      double keep = p[j];
      p[j] = keep + opt.h;
      double up = eval();
      p[j] = keep - opt.h;
      double dn = eval();
      p[j] = keep;
      double fd = (up - dn) / (2.0 * opt.h);
      double an = analytic[pi][j];
      double diff = std::abs(an - fd);
      double rel = diff / std::max({std::abs(an), std::abs(fd), opt.rel_floor});
      rep.max_abs_diff = std::max(rep.max_abs_diff, diff);
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  rep.pass = rep.max_rel_err <= opt.tol;
  return rep;
}

}  // namespace memscan
