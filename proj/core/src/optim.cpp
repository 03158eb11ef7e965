#include "lbba/optim.hpp"

#include <cmath>
#include <numbers>

#include "lbba/errors.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

SgdMomentum::SgdMomentum(std::vector<Tensor> params, real momentum, real weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
}

void SgdMomentum::step(real lr) {
  if (!(lr > 0.0f)) throw ConfigError("learning rate must be positive");
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto w = p.data();
    auto& v = velocity_[k];
    if (!p.has_grad()) {
      // No gradient reached this tensor; only decay applies.
      for (size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + weight_decay_ * w[i];
        w[i] -= lr * v[i];
      }
      continue;
    }
    auto g = p.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i] + weight_decay_ * w[i];
      w[i] -= lr * v[i];
    }
  }
  zero_grad();
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

real linear_lr(int epoch, int epochs, real start, real end) {
  if (epochs <= 1) return start;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return static_cast<real>(start + (static_cast<double>(end) - start) * t);
}

real cosine_lr(int epoch, int epochs, real base) {
  if (epochs <= 0) return base;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs);
  return static_cast<real>(0.5 * base * (1.0 + std::cos(std::numbers::pi * t)));
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
