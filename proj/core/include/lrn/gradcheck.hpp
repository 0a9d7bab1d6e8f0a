#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lrn {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  int instances_per_op = 20;
  double tolerance = 1e-6;       // per-op finite differences
  double e2e_tolerance = 1e-4;   // end-to-end directional derivative
  // Test hook: name of an op whose analytic gradient gets deliberately
  // corrupted so the check must fail.
  std::string perturb_op;
};

struct OpCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  int instances = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<OpCheckResult> ops;
  bool all_pass = false;
};

// Re-runs every differentiable kernel at double width on random instances
// and compares the analytic backward against central finite differences
// (step 1e-4, relative error denominator max(|a|,|fd|,1e-8)). Finishes
// with a directional end-to-end check of the summed stage losses on a tiny
// model. The finite-difference side only ever calls forward code.
GradCheckReport run_gradcheck(const GradCheckOptions& opts = {});

std::string format_report(const GradCheckReport& report);

}  // namespace lrn
