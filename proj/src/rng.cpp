#include "ssmavs/rng.hpp"

#include <cmath>

namespace ssmavs {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

i64 Rng::below(i64 n) {
  check(n > 0, "rng: below(n) needs n > 0");
  const unsigned __int128 wide =
      static_cast<unsigned __int128>(next_u64()) *
      static_cast<unsigned __int128>(n);
  return static_cast<i64>(wide >> 64);
}

Rng Rng::fork(u64 stream) const {
  Rng base(state_ ^ (0xA0761D6478BD642Full * (stream + 1)));
  return Rng(base.next_u64());
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi, Dtype dt) {
  Tensor t = Tensor::empty(std::move(shape), dt);
  for (i64 i = 0; i < t.numel(); ++i) t.set_scalar(i, uniform(lo, hi));
  return t;
}

Tensor Rng::normal_tensor(Shape shape, double mean, double stddev, Dtype dt) {
  Tensor t = Tensor::empty(std::move(shape), dt);
  for (i64 i = 0; i < t.numel(); ++i) {
    t.set_scalar(i, mean + stddev * normal());
  }
  return t;
}

}  // namespace ssmavs
