#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mmm/autodiff.hpp"

namespace mmm {

// Linear warmup to `peak`, then cosine decay to zero at `total`. Units are
// whatever the caller counts in (tokens for the main loop, steps for the
// tokenizers).
inline double warmup_cosine_lr(double peak, std::int64_t t, std::int64_t warmup,
                               std::int64_t total) {
  if (t <= 0) return 0.0;
  if (warmup > 0 && t < warmup) return peak * static_cast<double>(t) / static_cast<double>(warmup);
  if (t >= total) return 0.0;
  double frac = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(M_PI * frac));
}

// Adam with decoupled weight decay. With lr = 0 parameters never move,
// whatever the decay setting.
template <class T>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;

  std::vector<ad::Mat<T>> m, v;
  std::int64_t t = 0;

  void init(const ad::ParamStore<T>& params) {
    m = params.zeros_like();
    v = params.zeros_like();
    t = 0;
  }

  void step(ad::ParamStore<T>& params, const std::vector<ad::Mat<T>>& grads, double lr,
            const std::vector<bool>* frozen = nullptr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
      if (!params.entries[i].trainable) continue;
      if (frozen && (*frozen)[i]) continue;
      auto& p = params.entries[i].value;
      const auto& g = grads[i];
      m[i] = (m[i] * T(beta1) + g * T(1.0 - beta1)).eval();
      v[i] = (v[i] * T(beta2)).eval();
      v[i].array() += g.array().square() * T(1.0 - beta2);
      ad::Mat<T> mhat = m[i] / T(bc1);
      ad::Mat<T> vhat = v[i] / T(bc2);
      p.array() -= T(lr) * (mhat.array() / (vhat.array().sqrt() + T(eps)) +
                            T(weight_decay) * p.array());
    }
  }
};

}  // namespace mmm
