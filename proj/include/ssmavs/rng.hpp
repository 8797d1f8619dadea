#pragma once

#include "ssmavs/tensor.hpp"

namespace ssmavs {

// splitmix64 counter generator (Steele, Lea, Flood 2014). Chosen because the
// whole stream is three shifts and two multiplies per draw with no platform-
// dependent state, so seeded streams are reproducible everywhere.
class Rng {
 public:
  explicit Rng(u64 seed) : state_(seed) {}

  u64 next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    u64 z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second deviate of each pair is cached.
  double normal();

  // Uniform integer in [0, n) via the high half of a 128-bit product.
  i64 below(i64 n);

  // Derives the seed for an independent named stream. Training, data
  // generation, and evaluation each draw from their own substream so adding
  // draws to one cannot shift another.
  Rng fork(u64 stream) const;

  Tensor uniform_tensor(Shape shape, double lo, double hi, Dtype dt);
  Tensor normal_tensor(Shape shape, double mean, double stddev, Dtype dt);

 private:
  u64 state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ssmavs
