#pragma once

#include <cstdint>
#include <ostream>

namespace lbba::cli {

struct GradcheckOptions {
  uint64_t seed = 0;
  int cases = 100;
  bool network = true;
  double tolerance = 1e-3;
};

/// Runs the finite-difference suite in double precision, printing one row
/// per primitive. Returns 0 iff every max relative error is below tolerance.
int run_gradcheck(const GradcheckOptions& opt, std::ostream& out);

}  // namespace lbba::cli
