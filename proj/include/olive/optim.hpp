#pragma once

#include <cmath>
#include <vector>

#include "olive/tensor.hpp"

namespace olive {

/// Cosine decay from `base` to `base * floor` over `total` steps, after a
/// linear warmup of `warmup` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total, std::size_t warmup = 0, double floor = 0.0) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

/// Gradient descent with heavy-ball momentum and global-norm clipping.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9, double clip_norm = 1.0) : momentum_(momentum), clip_(clip_norm) {}

  /// Updates `params[i] -= lr * v[i]` where v accumulates clipped grads.
  /// Entries with an empty gradient are skipped. Returns the pre-clip norm.
  double step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (auto* p : params) velocity_.emplace_back(p->shape());
    }
    double sq = 0.0;
    for (const auto* g : grads)
      if (g && !g->empty())
        for (float v : g->values()) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    const double factor = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor* g = grads[i];
      if (!g || g->empty()) continue;
      auto& vel = velocity_[i];
      auto& p = *params[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        vel[j] = static_cast<float>(momentum_ * vel[j] + factor * (*g)[j]);
        p[j] = static_cast<float>(p[j] - lr * vel[j]);
      }
    }
    return norm;
  }

  void reset() { velocity_.clear(); }

 private:
  double momentum_;
  double clip_;
  std::vector<Tensor> velocity_;
};

}  // namespace olive
