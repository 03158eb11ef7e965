#include "gradcheck_cmd.hpp"

#include <algorithm>
#include <cstdio>

#include "lbba/gradcheck_suite.hpp"

namespace lbba::cli {

int run_gradcheck(const GradcheckOptions& opt, std::ostream& out) {
  GradcheckSuiteOptions suite;
  suite.seed = opt.seed;
  suite.cases_per_primitive = opt.cases;
  suite.include_network = opt.network;
  double worst = 0.0;
  int failed = 0;
  auto on_row = [&](const GradcheckRow& r) {
    const bool ok = r.max_relative_error < opt.tolerance;
    failed += ok ? 0 : 1;
    worst = std::max(worst, r.max_relative_error);
    char line[200];
    std::snprintf(line, sizeof line, "%-28s cases %4d  max rel err %.3e  %6.2fs  %s\n", r.name.c_str(), r.cases,
                  r.max_relative_error, r.seconds, ok ? "ok" : "FAIL");
    out << line << std::flush;
  };
  run_gradcheck_suite(suite, on_row);
  char summary[120];
  std::snprintf(summary, sizeof summary, "worst %.3e, tolerance %.1e, %d failing\n", worst, opt.tolerance, failed);
  out << summary;
  return failed == 0 ? 0 : 1;
}

}  // namespace lbba::cli
