#pragma once

#include "ssmavs/tensor.hpp"

namespace ssmavs {

/// Segmentation metric accumulator. Per-frame IoU is averaged for M_J;
/// M_F pools pixel counts across every accumulated frame. Foreground is
/// "any class probability above 0.5" (targets: any class set), so the
/// binary case reduces to the plain mask metric.
struct MetricAccumulator {
  double iou_sum = 0;
  i64 frames = 0;
  i64 tp = 0, fp = 0, fn = 0;
  i64 silent_frames = 0;
  i64 silent_empty = 0;

  /// probs, targets: [T,H,W,K]; validity: [T]. Frames with validity 0 are
  /// skipped entirely.
  void add_clip(const Tensor& probs, const Tensor& targets,
                const Tensor& validity);

  /// Mean per-frame IoU; a frame where prediction and target are both
  /// empty counts as 1.
  double m_j() const;
  /// (1+b2)*P*R / (b2*P + R) from the pooled counts; no positives anywhere
  /// is a perfect 1, a zero intersection with positives present is 0.
  double m_f(double beta2 = 1.0) const;
  /// Fraction of target-empty frames predicted empty (1 when none seen).
  double silent_empty_rate() const;
};

}  // namespace ssmavs
