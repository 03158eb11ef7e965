#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

struct GradcheckSuiteOptions {
  uint64_t seed = 0;
  /// Random shapes/seeds per primitive.
  int cases_per_primitive = 100;
  /// Central-difference step for primitives and for the network check.
  double h_primitive = 1e-6;
  double h_network = 1e-6;
  /// Coordinates sampled per tensor in the network check.
  int network_coordinates = 48;
  int network_height = 32;
  int network_width = 32;
  bool include_network = true;
};

struct GradcheckRow {
  std::string name;
  int cases = 0;
  double max_relative_error = 0.0;
  double seconds = 0.0;
};

/// Runs the finite-difference check over every differentiable primitive and
/// over a full simplified-resnet18 forward with cross entropy on a 4-image
/// batch (eval mode w.r.t. the input, train mode w.r.t. stem and fc weights).
std::vector<GradcheckRow> run_gradcheck_suite(
    const GradcheckSuiteOptions& opt = {},
    const std::function<void(const GradcheckRow&)>& on_row = {});

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
