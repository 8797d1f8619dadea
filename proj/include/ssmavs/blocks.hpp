#pragma once

#include <string>
#include <vector>

#include "ssmavs/scan_layout.hpp"
#include "ssmavs/ssm.hpp"

namespace ssmavs {

// Inner channel width of every block is kExpand * C.
inline constexpr i64 kExpand = 2;
inline constexpr int kPlanarDirections = 4;
inline constexpr int kMaxDirections = 12;

/// Creates one scan-block parameter set under `prefix`: input norm
/// (.norm_gamma/.norm_beta), expansion linear (.w_in/.b_in), a depthwise
/// conv kernel (.conv, 3x3 for conv_rank 2 or 3x3x3 for conv_rank 3), one
/// selective-scan set per direction (.dir{k}.ssm) and the output gate
/// (.gate). One set serves every scale the block touches.
void init_scan_block_params(ParamStore& ps, const std::string& prefix, i64 c,
                            i64 n, int directions, int conv_rank, Rng& rng,
                            Dtype dt = Dtype::F32);

/// Creates one cross-modal fusion parameter set under `prefix`: the visual
/// in-path (.v_norm_gamma/.v_norm_beta/.v_w/.v_b/.v_conv), the audio
/// in-path (.a_norm_gamma/.a_norm_beta/.a_w/.a_b/.a_conv), four scan sets
/// (.dir{k}.ssm) and the output gate (.gate).
void init_fusion_params(ParamStore& ps, const std::string& prefix, i64 c,
                        i64 n, Rng& rng, Dtype dt = Dtype::F32);

/// Temporal scan block plus audio-to-vision fusion under `prefix`
/// (.tm and .a2v).
void init_cfb_params(ParamStore& ps, const std::string& prefix, i64 c, i64 n,
                     int directions, Rng& rng, Dtype dt = Dtype::F32);

namespace ops {

struct ScanBlockVars {
  Var norm_gamma, norm_beta;  // [C]
  Var w_in, b_in;             // [C,Di], [Di]
  Var conv;                   // [3,3,Di] or [3,3,3,Di]
  std::vector<SsmVars> dirs;
  GateVars gate;
};
ScanBlockVars bind_scan_block(Tape& t, ParamStore& ps,
                              const std::string& prefix, int directions);

struct FusionVars {
  Var v_norm_gamma, v_norm_beta;  // [C]
  Var v_w, v_b;                   // [C,Di], [Di]
  Var v_conv;                     // [3,3,Di]
  Var a_norm_gamma, a_norm_beta;  // [C]
  Var a_w, a_b;                   // [C,Di], [Di]
  Var a_conv;                     // [3,Di]
  std::vector<SsmVars> dirs;      // 4
  GateVars gate;
};
FusionVars bind_fusion(Tape& t, ParamStore& ps, const std::string& prefix);

struct CfbVars {
  ScanBlockVars tm;
  FusionVars a2v;
};
CfbVars bind_cfb(Tape& t, ParamStore& ps, const std::string& prefix,
                 int directions);

/// Per-frame cross-scale block: norm -> expand -> depthwise 2D conv ->
/// SiLU -> 4-direction planar scan over the concatenated scales (state
/// reset per frame) -> merge -> gate + residual. scales[i]: [T,h_i,w_i,C];
/// the single parameter set is applied to every scale.
std::vector<Var> vss_block(Tape& t, const std::vector<Var>& scales,
                           const std::vector<ScaleShape>& shapes, i64 T,
                           const ScanBlockVars& p,
                           ScanImpl impl = ScanImpl::Sequential);

/// Whole-clip cross-scale block: depthwise 3D conv in the in-path and
/// direction_count volumetric scan orders (no state reset).
std::vector<Var> temporal_mamba_block(Tape& t, const std::vector<Var>& scales,
                                      const std::vector<ScaleShape>& shapes,
                                      i64 T, const ScanBlockVars& p,
                                      int direction_count,
                                      ScanImpl impl = ScanImpl::Sequential);

/// Per-frame vision-to-audio fusion. The frame's audio token rides last in
/// each frame segment of the four planar orders; only the audio slots
/// survive the merge, gated against the incoming audio. visual: [T,h,w,C],
/// audio: [T,C] -> updated audio [T,C].
Var v2a_frame_level(Tape& t, Var visual, ScaleShape shape, i64 T, Var audio,
                    const FusionVars& p, ScanImpl impl = ScanImpl::Sequential);

/// Whole-clip vision-to-audio fusion over [THW+, TWH+] and their full
/// reversals, audio appended; audio slots merged, gated, residual.
Var v2a_temporal_level(Tape& t, Var visual, ScaleShape shape, i64 T,
                       Var audio, const FusionVars& p,
                       ScanImpl impl = ScanImpl::Sequential);

/// Audio-to-vision scan: audio tokens lead every sequence so each visual
/// position accumulates audio state; the visual portion survives the
/// merge. Returns updated visual [T,h,w,C].
Var a2v_scan(Tape& t, Var visual, ScaleShape shape, i64 T, Var audio,
             const FusionVars& p, ScanImpl impl = ScanImpl::Sequential);

/// Single-scale temporal scan block followed by a2v_scan.
Var context_fusion_block(Tape& t, Var visual, ScaleShape shape, i64 T,
                         Var audio, const CfbVars& p, int direction_count,
                         ScanImpl impl = ScanImpl::Sequential);

}  // namespace ops
}  // namespace ssmavs
