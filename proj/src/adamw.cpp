#include "ssmavs/adamw.hpp"

#include <cmath>

#include "ssmavs/common.hpp"

namespace ssmavs {

AdamW::AdamW(ParamStore& ps, AdamWConfig cfg) : ps_(ps), cfg_(cfg) {
  check(cfg_.lr > 0 && cfg_.eps > 0, "adamw: lr and eps must be positive");
  check(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 &&
            cfg_.beta2 < 1,
        "adamw: betas must lie in [0,1)");
  ps_.for_each([&](const Parameter& p) {
    m_.emplace_back(static_cast<size_t>(p.value.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.value.numel()), 0.0);
  });
}

void AdamW::step() {
  t_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  size_t slot = 0;
  ps_.for_each([&](Parameter& p) {
    check(p.grad.defined() && p.grad.numel() == p.value.numel(),
          "adamw: missing gradient for " + p.name);
    std::vector<double>& m = m_[slot];
    std::vector<double>& v = v_[slot];
    slot += 1;
    for (i64 i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad.scalar_at(i);
      m[static_cast<size_t>(i)] =
          cfg_.beta1 * m[static_cast<size_t>(i)] + (1.0 - cfg_.beta1) * g;
      v[static_cast<size_t>(i)] = cfg_.beta2 * v[static_cast<size_t>(i)] +
                                  (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[static_cast<size_t>(i)] / bc1;
      const double vhat = v[static_cast<size_t>(i)] / bc2;
      const double w = p.value.scalar_at(i);
      p.value.set_scalar(
          i, w - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                            cfg_.weight_decay * w));
    }
  });
}

}  // namespace ssmavs
