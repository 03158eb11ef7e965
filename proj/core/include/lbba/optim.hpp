#pragma once

#include <vector>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- m*v + g + wd*w ;  w <- w - lr*v ;  g <- 0
class SgdMomentum {
public:
  SgdMomentum(std::vector<Tensor> params, real momentum, real weight_decay);

  /// Throws ConfigError when lr <= 0.
  void step(real lr);
  void zero_grad();

private:
  std::vector<Tensor> params_;
  std::vector<std::vector<real>> velocity_;
  real momentum_;
  real weight_decay_;
};

/// lr(e) = start + (end - start) * e / (epochs - 1); exact at both ends.
real linear_lr(int epoch, int epochs, real start, real end);

/// Half-cosine decay from `base` at epoch 0 towards 0 after the last epoch.
real cosine_lr(int epoch, int epochs, real base);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
