#pragma once

#include <cstdint>
#include <functional>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

using ScalarFn = std::function<Tensor(const Tensor&)>;

enum class CoordinateSampling {
  /// Uniform without replacement (seeded).
  uniform,
  /// The coordinates with the largest analytic gradient magnitude.
  largest_gradient,
};

struct FiniteDifferenceOptions {
  int max_coordinates = 64;
  CoordinateSampling sampling = CoordinateSampling::uniform;
  uint64_t seed = 0;
};

/**
 * Compares the reverse-mode gradient of `f` at `x` against central
 * differences with step `h`.
 *
 * Returns the maximum over checked coordinates of
 * |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). At most
 * `max_coordinates` coordinates are checked. Returns +inf if `f` produces a
 * non-finite value anywhere.
 */
double finite_difference_check(const ScalarFn& f, const Tensor& x, real h,
                               const FiniteDifferenceOptions& opt = {});

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
