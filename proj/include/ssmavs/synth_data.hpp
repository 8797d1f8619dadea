#pragma once

#include <string>
#include <vector>

#include "ssmavs/tensor.hpp"

namespace ssmavs {

inline constexpr i64 kCanvas = 64;
inline constexpr i64 kDescriptorDim = 64;
inline constexpr int kShapeClasses = 3;

enum class Task { S4, Ms3, Semantic };

Task task_from_string(const std::string& name);
std::string task_name(Task task);

/// One synthetic clip: video [T,64,64,3] in [0,1], per-frame audio
/// descriptors [T,64], and masks [T,64,64] holding class ids with 0 as
/// background.
struct ClipSample {
  Tensor video;
  Tensor audio;
  Tensor masks;
  Task task = Task::S4;
};

/// Deterministic in (task, seed, index); distinct indices are independent
/// streams, so generation parallelizes across indices.
/// force_frames pins the clip length instead of drawing it from {5, 10}.
ClipSample generate_clip(Task task, u64 seed, i64 index, i64 force_frames = 0);

std::vector<ClipSample> generate(Task task, u64 seed, i64 count,
                                 i64 force_frames = 0);

ClipSample hflip_sample(const ClipSample& s);

/// Crops the window [y0, y0+crop_h) x [x0, x0+crop_w) and scales it back to
/// the full canvas with one nearest-neighbor index map shared by video and
/// masks, so shape pixels and mask pixels move together exactly.
ClipSample resize_crop_sample(const ClipSample& s, i64 y0, i64 x0, i64 crop_h,
                              i64 crop_w);

/// Seeded flip + resize-crop with the crop window always inside the canvas.
ClipSample augment(const ClipSample& s, u64 seed);

/// Class ids whose descriptor slot exceeds 0.5 at the given frame, sorted.
std::vector<int> decode_audio_classes(const Tensor& audio, i64 frame);

/// Class ids present in the mask at the given frame, sorted.
std::vector<int> mask_classes(const Tensor& masks, i64 frame);

}  // namespace ssmavs
