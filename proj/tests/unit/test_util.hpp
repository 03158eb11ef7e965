#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "lbba/tensor.hpp"

namespace lbba::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, real lo = -1, real hi = 1) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<real> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
  }
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace lbba::testing
