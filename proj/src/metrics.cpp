#include "ssmavs/metrics.hpp"

#include "ssmavs/common.hpp"

namespace ssmavs {

void MetricAccumulator::add_clip(const Tensor& probs, const Tensor& targets,
                                 const Tensor& validity) {
  check(probs.rank() == 4, "metrics: probabilities must be [T,H,W,K]");
  check(probs.shape() == targets.shape(),
        "metrics: prediction/target shape mismatch");
  const Shape& s = probs.shape();
  check(validity.shape() == Shape{s[0]}, "metrics: validity must be [T]");
  const i64 pixels = s[1] * s[2], K = s[3];
  for (i64 t = 0; t < s[0]; ++t) {
    if (validity.scalar_at(t) <= 0.5) continue;
    i64 inter = 0, pred = 0, tgt = 0;
    for (i64 i = 0; i < pixels; ++i) {
      const i64 base = (t * pixels + i) * K;
      bool p = false, g = false;
      for (i64 k = 0; k < K; ++k) {
        p = p || probs.scalar_at(base + k) > 0.5;
        g = g || targets.scalar_at(base + k) > 0.5;
      }
      inter += p && g ? 1 : 0;
      pred += p ? 1 : 0;
      tgt += g ? 1 : 0;
    }
    const i64 uni = pred + tgt - inter;
    iou_sum += uni == 0 ? 1.0
                        : static_cast<double>(inter) /
                              static_cast<double>(uni);
    frames += 1;
    tp += inter;
    fp += pred - inter;
    fn += tgt - inter;
    if (tgt == 0) {
      silent_frames += 1;
      if (pred == 0) silent_empty += 1;
    }
  }
}

double MetricAccumulator::m_j() const {
  return frames == 0 ? 0.0 : iou_sum / static_cast<double>(frames);
}

double MetricAccumulator::m_f(double beta2) const {
  if (tp + fp + fn == 0) return 1.0;
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return (1.0 + beta2) * p * r / (beta2 * p + r);
}

double MetricAccumulator::silent_empty_rate() const {
  return silent_frames == 0
             ? 1.0
             : static_cast<double>(silent_empty) /
                   static_cast<double>(silent_frames);
}

}  // namespace ssmavs
