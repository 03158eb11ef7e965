#include "lbba/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace lbba {
inline namespace LBBA_PRECISION_NS {

double finite_difference_check(const ScalarFn& f, const Tensor& x, real h,
                               const FiniteDifferenceOptions& opt) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tensor loss = f(probe);
  if (!std::isfinite(loss.item())) return kInf;
  backward(loss);
  std::vector<real> analytic(probe.grad().begin(), probe.grad().end());
  if (analytic.empty()) analytic.assign(static_cast<size_t>(x.numel()), 0.0f);

  const auto n = static_cast<size_t>(x.numel());
  std::vector<size_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  const auto limit = static_cast<size_t>(std::max(opt.max_coordinates, 1));
  if (n > limit) {
    if (opt.sampling == CoordinateSampling::largest_gradient) {
      std::stable_sort(coords.begin(), coords.end(), [&](size_t a, size_t b) {
        return std::abs(analytic[a]) > std::abs(analytic[b]);
      });
    } else {
      std::mt19937_64 rng(opt.seed);
      std::shuffle(coords.begin(), coords.end(), rng);
    }
    coords.resize(limit);
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (size_t i : coords) {
    Tensor plus = x.clone();
    Tensor minus = x.clone();
    const real base = x.data()[i];
    plus.data()[i] = base + h;
    minus.data()[i] = base - h;
    // Use the representable step actually taken.
    const double step = static_cast<double>(plus.data()[i]) - minus.data()[i];
    const double fp = f(plus).item();
    const double fm = f(minus).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) return kInf;
    const double numeric = (fp - fm) / step;
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
