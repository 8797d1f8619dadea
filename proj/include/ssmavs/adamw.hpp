#pragma once

#include <vector>

#include "ssmavs/tape.hpp"

namespace ssmavs {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moments are kept in f64 regardless of
/// parameter dtype; updates run single-threaded in the store's sorted
/// parameter order, so training is bit-reproducible.
class AdamW {
 public:
  explicit AdamW(ParamStore& ps, AdamWConfig cfg = {});
  /// One update from the gradients currently in the store. Does not zero
  /// them.
  void step();
  i64 steps_done() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParamStore& ps_;
  AdamWConfig cfg_;
  i64 t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace ssmavs
