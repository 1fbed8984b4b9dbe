#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "memscan/tensor.hpp"

namespace memscan {

// Half-cosine decay from lr_init to lr_final; the endpoints are returned
// exactly at step 0 and step == total. Steps outside [0, total] are rejected.
inline double cosine_lr(std::int64_t step, std::int64_t total, double lr_init, double lr_final) {
  if (total < 1) throw ConfigError("cosine_lr: total must be >= 1");
  if (step < 0 || step > total)
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total) + "]");
  if (step == 0) return lr_init;
  if (step == total) return lr_final;
  double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second-moment buffers, one pair per parameter in registration order.
template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m, v;

  bool empty() const { return m.empty() && v.empty(); }
};

template <typename T>
void adam_init(AdamState<T>& st, const std::vector<Tensor<T>*>& params) {
  st.step = 0;
  st.m.clear();
  st.v.clear();
  for (const Tensor<T>* p : params) {
    st.m.emplace_back(p->shape());
    st.v.emplace_back(p->shape());
  }
}

// One bias-corrected update over the whole parameter list. Entries whose mask
// is false (frozen parameters) are skipped entirely: values and moments stay
// untouched, keeping state aligned with the full list. A non-finite gradient
// aborts with the offending parameter's name when names are supplied.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads,
               const std::vector<std::uint8_t>& mask, AdamState<T>& st, const AdamConfig& cfg,
               double lr, const std::vector<std::string>* names = nullptr) {
  if (params.size() != grads.size() || params.size() != mask.size() ||
      params.size() != st.m.size() || params.size() != st.v.size())
    throw ConfigError("adam_step: parameter/gradient/state list sizes disagree");
  if (names != nullptr && names->size() != params.size())
    throw ConfigError("adam_step: name list size disagrees");
  st.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    check_same_shape(p, g, "adam_step gradient");
    check_same_shape(p, st.m[i], "adam_step moment");
    if (!g.all_finite())
      throw NumericError("adam_step: non-finite gradient for parameter " +
                         (names != nullptr ? (*names)[i] : "#" + std::to_string(i)));
    T* pd = p.data();
    const T* gd = g.data();
    T* md = st.m[i].data();
    T* vd = st.v[i].data();
    for (std::int64_t n = 0; n < p.numel(); ++n) {
      double gg = static_cast<double>(gd[n]);
      double mm = cfg.beta1 * static_cast<double>(md[n]) + (1.0 - cfg.beta1) * gg;
      double vv = cfg.beta2 * static_cast<double>(vd[n]) + (1.0 - cfg.beta2) * gg * gg;
      md[n] = static_cast<T>(mm);
      vd[n] = static_cast<T>(vv);
      double update = lr * (mm / bc1) / (std::sqrt(vv / bc2) + cfg.eps);
      pd[n] = static_cast<T>(static_cast<double>(pd[n]) - update);
    }
  }
}

}  // namespace memscan
