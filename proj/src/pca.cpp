#include "ssmavs/pca.hpp"

#include <cmath>
#include <vector>

#include "ssmavs/common.hpp"

namespace ssmavs {

Tensor principal_component(const Tensor& rows) {
  check(rows.rank() == 2, "pca: expected a [P,C] matrix");
  const i64 p = rows.shape()[0];
  const i64 c = rows.shape()[1];
  check(p >= 1 && c >= 1, "pca: empty matrix");

  std::vector<double> mean(c, 0.0);
  for (i64 i = 0; i < p; ++i) {
    for (i64 j = 0; j < c; ++j) mean[j] += rows.scalar_at(i * c + j);
  }
  for (i64 j = 0; j < c; ++j) mean[j] /= static_cast<double>(p);

  std::vector<double> cov(c * c, 0.0);
  for (i64 i = 0; i < p; ++i) {
    for (i64 a = 0; a < c; ++a) {
      const double da = rows.scalar_at(i * c + a) - mean[a];
      for (i64 b = a; b < c; ++b) {
        cov[a * c + b] += da * (rows.scalar_at(i * c + b) - mean[b]);
      }
    }
  }
  double trace = 0;
  for (i64 a = 0; a < c; ++a) {
    for (i64 b = a; b < c; ++b) {
      cov[a * c + b] /= static_cast<double>(p);
      cov[b * c + a] = cov[a * c + b];
    }
    trace += cov[a * c + a];
  }

  Tensor out = Tensor::zeros({c}, Dtype::F64);
  if (trace < 1e-12) return out;

  std::vector<double> v(c, 1.0 / std::sqrt(static_cast<double>(c)));
  std::vector<double> next(c);
  for (int it = 0; it < 100; ++it) {
    double norm = 0;
    for (i64 a = 0; a < c; ++a) {
      double s = 0;
      for (i64 b = 0; b < c; ++b) s += cov[a * c + b] * v[b];
      next[a] = s;
      norm += s * s;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-300) break;
    double delta = 0;
    for (i64 a = 0; a < c; ++a) {
      next[a] /= norm;
      delta = std::max(delta, std::abs(next[a] - v[a]));
    }
    v = next;
    if (delta < 1e-8) break;
  }

  i64 peak = 0;
  for (i64 a = 1; a < c; ++a) {
    if (std::abs(v[a]) > std::abs(v[peak])) peak = a;
  }
  const double sign = v[peak] < 0 ? -1.0 : 1.0;
  for (i64 a = 0; a < c; ++a) out.set_scalar(a, sign * v[a]);
  return out;
}

Tensor pca_project(const Tensor& rows, const Tensor& component) {
  check(rows.rank() == 2 && component.rank() == 1 &&
            rows.shape()[1] == component.shape()[0],
        "pca: projection shapes must be [P,C] and [C]");
  const i64 p = rows.shape()[0];
  const i64 c = rows.shape()[1];
  Tensor out = Tensor::zeros({p}, Dtype::F64);
  for (i64 i = 0; i < p; ++i) {
    double s = 0;
    for (i64 j = 0; j < c; ++j) {
      s += rows.scalar_at(i * c + j) * component.scalar_at(j);
    }
    out.set_scalar(i, s);
  }
  return out;
}

}  // namespace ssmavs
