#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ssmavs/model.hpp"
#include "ssmavs/synth_data.hpp"
#include "ssmavs/tensor.hpp"

namespace ssmavs {

/// One run's full recipe. Strict JSON: the seven core keys are required,
/// the tuning keys are optional, unknown keys are rejected.
struct RunConfig {
  std::string model_config;  // path to the model config JSON
  std::string task = "s4";
  u64 seed = 0;
  i64 steps = 0;
  i64 batch_size = 2;
  double learning_rate = 2e-5;
  std::string output_dir;

  int direction_count = 0;  // 0 keeps the model config's count
  std::vector<i64> bench_lengths = {256, 512, 1024, 2048, 4096, 8192, 16384};
  i64 bench_reps = 3;
  i64 eval_every = 50;
  i64 heldout_clips = 8;
  i64 frames = 5;  // 0 draws each clip's length from {5,10}
  bool augment = false;
  double stop_at_mj = 0.0;  // stop once held-out M_J reaches this; 0 disables

  void validate() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_json_file(const std::string& path);
  std::string to_json() const;
};

struct EvalOutcome {
  double m_j = 0;
  double m_f = 0;
  i64 frames = 0;
  double silent_empty = 1.0;
  double mean_loss = 0;
};

struct TrainOutcome {
  i64 steps_run = 0;
  double final_loss = 0;
  EvalOutcome final_eval;
};

/// [T,h,w] class-id masks to training targets: [T,h,w,1] foreground
/// indicators, or [T,h,w,3] one-hot class planes when semantic.
Tensor targets_from_masks(const Tensor& masks, bool semantic);

/// The held-out clips for a run, drawn from the run seed's dedicated
/// substream so they never move when training consumes more randomness.
std::vector<ClipSample> heldout_set(const RunConfig& rc);

EvalOutcome evaluate_model(ParamStore& ps, const ModelConfig& mc,
                           const std::vector<ClipSample>& clips,
                           int direction_override = 0, double beta2 = 1.0);

/// Initializes parameters into the empty store and runs the training loop,
/// streaming `step,loss,M_J,M_F` rows to metrics_csv when it is non-null.
/// Held-out metrics refresh every eval_every steps and at the final step.
TrainOutcome train_model(ParamStore& ps, const ModelConfig& mc,
                         const RunConfig& rc, std::ostream* metrics_csv);

/// Binary PPM (P6, maxval 255) round trip for [h,w,3] images in [0,1].
void write_ppm(const std::string& path, const Tensor& rgb);
Tensor read_ppm(const std::string& path);

/// Nearest-upsamples a [h,w] grayscale map in [0,1] to the frame's extent
/// and blends it channelwise as 0.7*feature + 0.3*image.
Tensor overlay_feature(const Tensor& frame_rgb, const Tensor& gray);

/// Entry point behind the ssmavs binary; returns the process exit code.
int cli_main(int argc, const char* const* argv);

}  // namespace ssmavs
