#include "ssmavs/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ssmavs/common.hpp"
#include "ssmavs/rng.hpp"

namespace ssmavs {
namespace {

struct ShapeSpec {
  int kind = 0;  // 0 rectangle, 1 circle, 2 triangle; class id is kind + 1
  double size = 0;
  double y_start = 0, x_start = 0;
  double y_end = 0, x_end = 0;
  double brightness = 1.0;
  i64 tex_phase = 0;
};

struct Scene {
  i64 frames = 0;
  std::vector<ShapeSpec> shapes;
  std::vector<std::vector<int>> sounding;  // per frame, indices into shapes
};

constexpr double kNoiseSigma = 0.1;
// Keeps every noise-only slot strictly below the 0.5 decode threshold and
// every active slot strictly above it, so schedule recovery is exact.
constexpr double kNoiseClip = 0.45;
constexpr double kSilentSegmentProb = 0.12;

double clipped_noise(Rng& rng) {
  return std::clamp(rng.normal() * kNoiseSigma, -kNoiseClip, kNoiseClip);
}

void shape_center(const ShapeSpec& s, i64 frame, i64 frames, double& cy,
                  double& cx) {
  const double a =
      frames > 1 ? static_cast<double>(frame) / static_cast<double>(frames - 1)
                 : 0.0;
  cy = s.y_start + a * (s.y_end - s.y_start);
  cx = s.x_start + a * (s.x_end - s.x_start);
}

bool inside_shape(const ShapeSpec& s, double cy, double cx, i64 y, i64 x) {
  const double py = static_cast<double>(y) + 0.5;
  const double px = static_cast<double>(x) + 0.5;
  const double half = s.size / 2.0;
  switch (s.kind) {
    case 0:
      return std::abs(py - cy) <= half && std::abs(px - cx) <= half;
    case 1:
      return (py - cy) * (py - cy) + (px - cx) * (px - cx) <= half * half;
    default: {
      const double down = py - (cy - half);
      if (down < 0 || down > s.size) return false;
      return std::abs(px - cx) <= half * (down / s.size);
    }
  }
}

bool boxes_clash(const ShapeSpec& a, const ShapeSpec& b, i64 frames) {
  for (i64 f = 0; f < frames; ++f) {
    double ay, ax, by, bx;
    shape_center(a, f, frames, ay, ax);
    shape_center(b, f, frames, by, bx);
    const double gap = (a.size + b.size) / 2.0 + 1.0;
    if (std::abs(ay - by) < gap && std::abs(ax - bx) < gap) return true;
  }
  return false;
}

ShapeSpec draw_shape(Rng& rng, int kind, double size) {
  ShapeSpec s;
  s.kind = kind;
  s.size = size;
  const double lo = size / 2.0 + 1.0;
  const double hi = static_cast<double>(kCanvas) - size / 2.0 - 1.0;
  s.y_start = rng.uniform(lo, hi);
  s.x_start = rng.uniform(lo, hi);
  s.y_end = rng.uniform(lo, hi);
  s.x_end = rng.uniform(lo, hi);
  s.brightness = rng.uniform(0.7, 1.0);
  s.tex_phase = rng.below(4);
  return s;
}

void place_shapes(Scene& scene, Rng& rng, const std::vector<int>& kinds) {
  for (int kind : kinds) {
    double size = rng.uniform(12.0, 22.0);
    for (int attempt = 0;; ++attempt) {
      ShapeSpec cand = draw_shape(rng, kind, size);
      bool ok = true;
      for (const ShapeSpec& prev : scene.shapes) {
        ok = ok && !boxes_clash(cand, prev, scene.frames);
      }
      if (ok) {
        scene.shapes.push_back(cand);
        break;
      }
      if (attempt > 0 && attempt % 50 == 0) size = std::max(8.0, size - 2.0);
    }
  }
}

std::vector<int> nonempty_subset(Rng& rng, i64 n) {
  std::vector<int> out;
  while (out.empty()) {
    for (i64 i = 0; i < n; ++i) {
      if (rng.uniform() < 0.5) out.push_back(static_cast<int>(i));
    }
  }
  return out;
}

Scene make_scene(Task task, Rng& rng, i64 force_frames) {
  Scene scene;
  scene.frames = force_frames > 0 ? force_frames
                                  : (rng.uniform() < 0.5 ? 5 : 10);
  std::vector<int> kinds;
  const i64 n = 1 + rng.below(3);
  if (task == Task::Semantic) {
    std::vector<int> pool = {0, 1, 2};
    for (i64 i = 0; i < n; ++i) {
      const i64 pick = rng.below(static_cast<i64>(pool.size()));
      kinds.push_back(pool[pick]);
      pool.erase(pool.begin() + pick);
    }
  } else {
    for (i64 i = 0; i < n; ++i) kinds.push_back(static_cast<int>(rng.below(3)));
  }
  place_shapes(scene, rng, kinds);

  scene.sounding.assign(scene.frames, {});
  if (task == Task::S4) {
    const int hero = static_cast<int>(rng.below(
        static_cast<i64>(scene.shapes.size())));
    for (auto& frame : scene.sounding) frame = {hero};
    return scene;
  }
  const i64 segments = 1 + rng.below(3);
  std::vector<i64> cuts = {0, scene.frames};
  for (i64 s = 1; s < segments; ++s) {
    cuts.push_back(1 + rng.below(scene.frames - 1));
  }
  std::sort(cuts.begin(), cuts.end());
  for (size_t s = 0; s + 1 < cuts.size(); ++s) {
    std::vector<int> members;
    if (rng.uniform() >= kSilentSegmentProb) {
      members =
          nonempty_subset(rng, static_cast<i64>(scene.shapes.size()));
    }
    for (i64 f = cuts[s]; f < cuts[s + 1]; ++f) scene.sounding[f] = members;
  }
  return scene;
}

void shape_color(int class_id, double out[3]) {
  switch (class_id) {
    case 1:
      out[0] = 0.85, out[1] = 0.25, out[2] = 0.20;
      break;
    case 2:
      out[0] = 0.20, out[1] = 0.80, out[2] = 0.30;
      break;
    default:
      out[0] = 0.25, out[1] = 0.35, out[2] = 0.90;
      break;
  }
}

}  // namespace

Task task_from_string(const std::string& name) {
  if (name == "s4") return Task::S4;
  if (name == "ms3") return Task::Ms3;
  if (name == "semantic") return Task::Semantic;
  fail("unknown task '" + name + "', expected s4, ms3, or semantic");
}

std::string task_name(Task task) {
  switch (task) {
    case Task::S4:
      return "s4";
    case Task::Ms3:
      return "ms3";
    default:
      return "semantic";
  }
}

ClipSample generate_clip(Task task, u64 seed, i64 index, i64 force_frames) {
  check(force_frames == 0 || force_frames == 5 || force_frames == 10,
        "generate_clip: frame count must be 5 or 10");
  Rng rng = Rng(seed).fork(static_cast<u64>(index));
  Scene scene = make_scene(task, rng, force_frames);
  const i64 T = scene.frames;

  ClipSample out;
  out.task = task;
  out.video = Tensor::zeros({T, kCanvas, kCanvas, 3}, Dtype::F32);
  out.audio = Tensor::zeros({T, kDescriptorDim}, Dtype::F32);
  out.masks = Tensor::zeros({T, kCanvas, kCanvas}, Dtype::F32);

  Tensor bg_noise =
      rng.uniform_tensor({kCanvas, kCanvas, 3}, -0.03, 0.03, Dtype::F32);
  float* video = out.video.mut<float>();
  float* masks = out.masks.mut<float>();
  const float* noise = bg_noise.data<float>();

  for (i64 f = 0; f < T; ++f) {
    std::vector<double> cys(scene.shapes.size()), cxs(scene.shapes.size());
    for (size_t i = 0; i < scene.shapes.size(); ++i) {
      shape_center(scene.shapes[i], f, T, cys[i], cxs[i]);
    }
    std::vector<char> loud(scene.shapes.size(), 0);
    for (int idx : scene.sounding[f]) loud[idx] = 1;
    for (i64 y = 0; y < kCanvas; ++y) {
      for (i64 x = 0; x < kCanvas; ++x) {
        const i64 p = (f * kCanvas + y) * kCanvas + x;
        double rgb[3] = {
            0.25 + 0.10 * static_cast<double>(y) / kCanvas,
            0.28 + 0.05 * static_cast<double>(x) / kCanvas,
            0.32 - 0.06 * static_cast<double>(y) / kCanvas};
        for (i64 c = 0; c < 3; ++c) rgb[c] += noise[(y * kCanvas + x) * 3 + c];
        for (size_t i = 0; i < scene.shapes.size(); ++i) {
          const ShapeSpec& s = scene.shapes[i];
          if (!inside_shape(s, cys[i], cxs[i], y, x)) continue;
          double base[3];
          shape_color(s.kind + 1, base);
          const double tex =
              ((y + x + s.tex_phase) % 4 < 2 ? 0.04 : -0.04);
          for (i64 c = 0; c < 3; ++c) rgb[c] = base[c] * s.brightness + tex;
          if (loud[i]) masks[p] = static_cast<float>(s.kind + 1);
        }
        for (i64 c = 0; c < 3; ++c) {
          video[p * 3 + c] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
        }
      }
    }
  }

  float* audio = out.audio.mut<float>();
  for (i64 f = 0; f < T; ++f) {
    std::set<int> classes;
    for (int idx : scene.sounding[f]) {
      classes.insert(scene.shapes[idx].kind + 1);
    }
    for (i64 d = 0; d < kDescriptorDim; ++d) {
      const bool hot = d < kShapeClasses && classes.count(static_cast<int>(d) + 1);
      audio[f * kDescriptorDim + d] =
          static_cast<float>((hot ? 1.0 : 0.0) + clipped_noise(rng));
    }
  }
  return out;
}

std::vector<ClipSample> generate(Task task, u64 seed, i64 count,
                                 i64 force_frames) {
  std::vector<ClipSample> out;
  out.reserve(static_cast<size_t>(count));
  for (i64 i = 0; i < count; ++i) {
    out.push_back(generate_clip(task, seed, i, force_frames));
  }
  return out;
}

ClipSample hflip_sample(const ClipSample& s) {
  const i64 T = s.video.shape()[0];
  ClipSample out;
  out.task = s.task;
  out.audio = s.audio.clone();
  out.video = Tensor::zeros(s.video.shape(), s.video.dtype());
  out.masks = Tensor::zeros(s.masks.shape(), s.masks.dtype());
  const float* vi = s.video.data<float>();
  const float* mi = s.masks.data<float>();
  float* vo = out.video.mut<float>();
  float* mo = out.masks.mut<float>();
  for (i64 f = 0; f < T; ++f) {
    for (i64 y = 0; y < kCanvas; ++y) {
      for (i64 x = 0; x < kCanvas; ++x) {
        const i64 dst = (f * kCanvas + y) * kCanvas + x;
        const i64 src = (f * kCanvas + y) * kCanvas + (kCanvas - 1 - x);
        mo[dst] = mi[src];
        for (i64 c = 0; c < 3; ++c) vo[dst * 3 + c] = vi[src * 3 + c];
      }
    }
  }
  return out;
}

ClipSample resize_crop_sample(const ClipSample& s, i64 y0, i64 x0, i64 crop_h,
                              i64 crop_w) {
  check(crop_h >= 1 && crop_w >= 1 && y0 >= 0 && x0 >= 0 &&
            y0 + crop_h <= kCanvas && x0 + crop_w <= kCanvas,
        "resize_crop: window must lie inside the canvas");
  const i64 T = s.video.shape()[0];
  ClipSample out;
  out.task = s.task;
  out.audio = s.audio.clone();
  out.video = Tensor::zeros(s.video.shape(), s.video.dtype());
  out.masks = Tensor::zeros(s.masks.shape(), s.masks.dtype());
  const float* vi = s.video.data<float>();
  const float* mi = s.masks.data<float>();
  float* vo = out.video.mut<float>();
  float* mo = out.masks.mut<float>();
  for (i64 f = 0; f < T; ++f) {
    for (i64 y = 0; y < kCanvas; ++y) {
      const i64 sy = y0 + ((2 * y + 1) * crop_h) / (2 * kCanvas);
      for (i64 x = 0; x < kCanvas; ++x) {
        const i64 sx = x0 + ((2 * x + 1) * crop_w) / (2 * kCanvas);
        const i64 dst = (f * kCanvas + y) * kCanvas + x;
        const i64 src = (f * kCanvas + sy) * kCanvas + sx;
        mo[dst] = mi[src];
        for (i64 c = 0; c < 3; ++c) vo[dst * 3 + c] = vi[src * 3 + c];
      }
    }
  }
  return out;
}

ClipSample augment(const ClipSample& s, u64 seed) {
  Rng rng(seed);
  ClipSample out = rng.uniform() < 0.5 ? hflip_sample(s) : s;
  const i64 crop = 45 + rng.below(kCanvas - 45 + 1);
  const i64 y0 = rng.below(kCanvas - crop + 1);
  const i64 x0 = rng.below(kCanvas - crop + 1);
  return resize_crop_sample(out, y0, x0, crop, crop);
}

std::vector<int> decode_audio_classes(const Tensor& audio, i64 frame) {
  std::vector<int> out;
  for (int c = 0; c < kShapeClasses; ++c) {
    if (audio.scalar_at(frame * audio.shape()[1] + c) > 0.5) {
      out.push_back(c + 1);
    }
  }
  return out;
}

std::vector<int> mask_classes(const Tensor& masks, i64 frame) {
  std::set<int> seen;
  const i64 px = masks.shape()[1] * masks.shape()[2];
  for (i64 i = 0; i < px; ++i) {
    const double v = masks.scalar_at(frame * px + i);
    if (v > 0) seen.insert(static_cast<int>(v));
  }
  return std::vector<int>(seen.begin(), seen.end());
}

}  // namespace ssmavs
