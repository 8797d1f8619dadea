#include "ssmavs/gradcheck.hpp"

#include <cmath>

namespace ssmavs {

std::string FdReport::summary() const {
  std::string s = "checked " + std::to_string(coords_checked) +
                  " coordinates, max rel err " +
                  std::to_string(max_rel_err) + ", " +
                  std::to_string(failures.size()) + " failures";
  for (size_t i = 0; i < failures.size() && i < 5; ++i) {
    const FdIssue& f = failures[i];
    s += "\n  " + f.param + "[" + std::to_string(f.coord) +
         "] analytic=" + std::to_string(f.analytic) +
         " fd=" + std::to_string(f.fd) +
         " rel=" + std::to_string(f.rel_err);
  }
  return s;
}

FdReport fd_check_params(ParamStore& ps,
                         const std::vector<std::string>& names,
                         const std::function<double()>& loss_fn,
                         i64 coords_per_param, Rng& rng, double step,
                         double tol, double abs_floor) {
  FdReport report;
  for (const std::string& name : names) {
    Parameter& p = ps.at(name);
    const i64 n = p.value.numel();
    check(n > 0, "fd_check: parameter " + name + " is empty");
    for (i64 c = 0; c < coords_per_param; ++c) {
      const i64 coord = n == 1 ? 0 : rng.below(n);
      const double v0 = p.value.scalar_at(coord);
      p.value.set_scalar(coord, v0 + step);
      const double f_plus = loss_fn();
      p.value.set_scalar(coord, v0 - step);
      const double f_minus = loss_fn();
      p.value.set_scalar(coord, v0);

      const double fd = (f_plus - f_minus) / (2.0 * step);
      const double analytic = p.grad.scalar_at(coord);
      const double denom = std::max(std::abs(analytic), std::abs(fd));
      const double diff = std::abs(analytic - fd);
      double rel = denom > 0.0 ? diff / denom : 0.0;
      if (std::max(std::abs(analytic), std::abs(fd)) < abs_floor) rel = 0.0;
      ++report.coords_checked;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      if (rel > tol && diff > abs_floor) {
        report.failures.push_back({name, coord, analytic, fd, rel});
      }
    }
  }
  return report;
}

}  // namespace ssmavs
