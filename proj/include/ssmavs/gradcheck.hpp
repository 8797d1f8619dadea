#pragma once

#include <functional>

#include "ssmavs/rng.hpp"
#include "ssmavs/tape.hpp"

namespace ssmavs {

struct FdIssue {
  std::string param;
  i64 coord = 0;
  double analytic = 0.0;
  double fd = 0.0;
  double rel_err = 0.0;
};

struct FdReport {
  i64 coords_checked = 0;
  double max_rel_err = 0.0;
  std::vector<FdIssue> failures;
  bool ok() const { return failures.empty(); }
  std::string summary() const;
};

// Central-difference verification of parameter gradients.
//
// Protocol: the caller first populates analytic gradients (zero_grad, build
// a tape from the store's current values, backward). fd_check_params then
// perturbs each sampled coordinate by ±step, calls loss_fn (which must
// rebuild the computation from current parameter values and return the
// scalar loss), restores the value, and compares (f⁺−f⁻)/(2·step) against
// the recorded analytic gradient.
//
// A coordinate fails when the relative error |a−fd|/max(|a|,|fd|) exceeds
// tol AND |a−fd| exceeds abs_floor; coordinates where both estimates sit
// below abs_floor carry no signal at the step size and count as agreement.
// Run in f64: the default floor leaves two orders of magnitude above the
// cancellation noise of a 1e-5 step.
FdReport fd_check_params(ParamStore& ps,
                         const std::vector<std::string>& names,
                         const std::function<double()>& loss_fn,
                         i64 coords_per_param, Rng& rng,
                         double step = 1e-5, double tol = 1e-4,
                         double abs_floor = 1e-7);

}  // namespace ssmavs
