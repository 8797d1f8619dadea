#pragma once

#include <string>
#include <vector>

#include "ssmavs/blocks.hpp"

namespace ssmavs {

// Width of one synthetic audio descriptor row.
inline constexpr i64 kAudioDim = 64;
inline constexpr double kDiceEps = 1e-6;

struct ModelConfig {
  i64 C = 32;
  i64 N = 16;
  i64 encoder_layers = 2;
  i64 decoder_layers = 2;
  int direction_count = 8;
  i64 N_class = 1;
  i64 T_max = 10;
  i64 input_h = 64;
  i64 input_w = 64;

  void validate() const;
  std::vector<ScaleShape> pyramid_shapes() const;  // strides 4,8,16,32

  /// Strict JSON object with exactly these nine integer keys; unknown or
  /// missing keys are errors.
  static ModelConfig from_json(const std::string& text);
  static ModelConfig from_json_file(const std::string& path);
};

/// Creates every parameter of the model under the fixed naming scheme
/// (stem.*, mte.layer{l}.*, mad.layer{l}.*, cip.scale{1..4}.*, head.*).
/// Temporal blocks always carry kMaxDirections scan sets, so one seed
/// yields identical weights for every direction_count and one checkpoint
/// serves any of them.
void init_model_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng,
                       Dtype dt = Dtype::F32);

/// Zero-pads axis 0 of x out to t_max frames.
Tensor pad_frames(const Tensor& x, i64 t_max);
/// [t_max] tensor with ones for the first T frames.
Tensor frame_validity(i64 T, i64 t_max, Dtype dt);

namespace ops {

struct AudioTrack {
  Var features;     // [T_max,1,C]
  Tensor validity;  // [T_max]
};

struct ModelOutput {
  Var logits;        // [T_max,h1,w1,N_class]
  Var inter_mask;    // [T_max,h1,w1,1]
  Var mask_feature;  // [T_max,h1,w1,C]
  Var audio_out;     // [T_max,1,C]
  Tensor validity;   // [T_max]
  // Stem scale 1 plus the encoded scales 2..4 as they enter context fusion.
  std::vector<Var> pre_cip;
};

/// Non-overlapping patch embeddings: 4x4x3 -> C, then three 2x2 merges.
/// clip: [T,h,w,3] with h,w divisible by 32. Returns scales 1..4.
std::vector<Var> visual_stem(Tape& t, ParamStore& ps, const ModelConfig& cfg,
                             const Tensor& clip);

/// Pads the descriptors to T_max with zero rows, then one linear layer.
AudioTrack audio_stem(Tape& t, ParamStore& ps, const Tensor& audio,
                      i64 t_max);

struct HeadOut {
  Var logits;      // [T,h1,w1,N_class]
  Var inter_mask;  // [T,h1,w1,1]
};

/// Audio-conditioned mask head: inter_mask[t,y,x] = <feature, query[t]>,
/// then a per-pixel MLP on concat(feature, inter_mask) and a class
/// projection. mask_feature: [T,h1,w1,C]; audio_query: [T,C].
HeadOut segmentation_head(Tape& t, ParamStore& ps, const ModelConfig& cfg,
                          Var mask_feature, Var audio_query);

/// Full forward pass. clip: [T,input_h,input_w,3]; audio: [T,kAudioDim];
/// both are zero-padded to T_max internally. direction_override > 0 runs
/// the temporal blocks with that many directions instead of the config's.
ModelOutput model_forward(Tape& t, ParamStore& ps, const ModelConfig& cfg,
                          const Tensor& clip, const Tensor& audio,
                          ScanImpl impl = ScanImpl::Sequential,
                          int direction_override = 0);

/// Training loss on logits bilinearly upsampled x4 to input resolution.
/// Binary (semantic=false, N_class=1): per-frame dice on probabilities.
/// Semantic: per-class binary cross-entropy. targets: [T_max,h,w,N_class]
/// in {0,1}; validity: [T_max]; padded frames contribute nothing and the
/// mean runs over valid frames only.
Var segmentation_loss(Tape& t, Var logits, const Tensor& targets,
                      const Tensor& validity, bool semantic);

}  // namespace ops
}  // namespace ssmavs
