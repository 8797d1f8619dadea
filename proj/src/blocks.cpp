#include "ssmavs/blocks.hpp"

#include <cmath>
#include <memory>
#include <utility>

#include "ssmavs/common.hpp"

namespace ssmavs {
namespace {

Tensor small_uniform(Rng& rng, Shape shape, i64 fan_in, Dtype dt) {
  double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor(std::move(shape), -s, s, dt);
}

std::string dir_prefix(const std::string& prefix, int k) {
  return prefix + ".dir" + std::to_string(k) + ".ssm";
}

}  // namespace

void init_scan_block_params(ParamStore& ps, const std::string& prefix, i64 c,
                            i64 n, int directions, int conv_rank, Rng& rng,
                            Dtype dt) {
  check(c >= 1 && n >= 1, "init_scan_block_params: c and n must be positive");
  check(conv_rank == 2 || conv_rank == 3,
        "init_scan_block_params: conv_rank must be 2 or 3");
  check(directions >= 1 && directions <= kMaxDirections,
        "init_scan_block_params: unsupported direction count");
  const i64 di = kExpand * c;
  ps.add(prefix + ".norm_gamma", Tensor::full({c}, 1.0, dt));
  ps.add(prefix + ".norm_beta", Tensor::zeros({c}, dt));
  ps.add(prefix + ".w_in", small_uniform(rng, {c, di}, c, dt));
  ps.add(prefix + ".b_in", Tensor::zeros({di}, dt));
  if (conv_rank == 2) {
    ps.add(prefix + ".conv", small_uniform(rng, {3, 3, di}, 9, dt));
  } else {
    ps.add(prefix + ".conv", small_uniform(rng, {3, 3, 3, di}, 27, dt));
  }
  for (int k = 0; k < directions; ++k) {
    init_ssm_params(ps, dir_prefix(prefix, k), di, n, rng, dt);
  }
  ops::init_gate_params(ps, prefix + ".gate", di, c, rng, dt);
}

void init_fusion_params(ParamStore& ps, const std::string& prefix, i64 c,
                        i64 n, Rng& rng, Dtype dt) {
  check(c >= 1 && n >= 1, "init_fusion_params: c and n must be positive");
  const i64 di = kExpand * c;
  ps.add(prefix + ".v_norm_gamma", Tensor::full({c}, 1.0, dt));
  ps.add(prefix + ".v_norm_beta", Tensor::zeros({c}, dt));
  ps.add(prefix + ".v_w", small_uniform(rng, {c, di}, c, dt));
  ps.add(prefix + ".v_b", Tensor::zeros({di}, dt));
  ps.add(prefix + ".v_conv", small_uniform(rng, {3, 3, di}, 9, dt));
  ps.add(prefix + ".a_norm_gamma", Tensor::full({c}, 1.0, dt));
  ps.add(prefix + ".a_norm_beta", Tensor::zeros({c}, dt));
  ps.add(prefix + ".a_w", small_uniform(rng, {c, di}, c, dt));
  ps.add(prefix + ".a_b", Tensor::zeros({di}, dt));
  ps.add(prefix + ".a_conv", small_uniform(rng, {3, di}, 3, dt));
  for (int k = 0; k < kPlanarDirections; ++k) {
    init_ssm_params(ps, dir_prefix(prefix, k), di, n, rng, dt);
  }
  ops::init_gate_params(ps, prefix + ".gate", di, c, rng, dt);
}

void init_cfb_params(ParamStore& ps, const std::string& prefix, i64 c, i64 n,
                     int directions, Rng& rng, Dtype dt) {
  init_scan_block_params(ps, prefix + ".tm", c, n, directions, 3, rng, dt);
  init_fusion_params(ps, prefix + ".a2v", c, n, rng, dt);
}

namespace ops {
namespace {

std::shared_ptr<const std::vector<i64>> share(const std::vector<i64>& v) {
  return std::make_shared<const std::vector<i64>>(v);
}

void check_scale_shape(const Tape& t, Var x, ScaleShape s, i64 T, i64 c,
                       const char* who) {
  const Shape& got = t.val(x).shape();
  check(got == Shape{T, s.h, s.w, c}, std::string(who) + ": scale tensor "
                                          "shape does not match its extents");
}

// Concatenates per-scale row blocks into the canonical source stack.
Var stack_scales(Tape& t, const std::vector<Var>& rows) {
  Var out = rows[0];
  for (size_t i = 1; i < rows.size(); ++i) out = concat_rows(t, out, rows[i]);
  return out;
}

// Shared body of vss_block / temporal_mamba_block once the layout and the
// conv operator are fixed.
std::vector<Var> scan_block_forward(Tape& t, const std::vector<Var>& scales,
                                    const std::vector<ScaleShape>& shapes,
                                    i64 T, const ScanBlockVars& p,
                                    const LayoutSpec& spec, int directions,
                                    ScanImpl impl, const char* who) {
  check(!scales.empty() && scales.size() == shapes.size(),
        std::string(who) + ": scale list empty or mismatched");
  check(static_cast<int>(p.dirs.size()) >= directions,
        std::string(who) + ": fewer scan parameter sets than directions");
  const i64 c = t.val(p.norm_gamma).shape()[0];
  const i64 di = t.val(p.w_in).shape()[1];
  const bool planar = t.val(p.conv).rank() == 3;

  std::vector<Var> inner(scales.size());
  std::vector<Var> pre(scales.size());
  for (size_t i = 0; i < scales.size(); ++i) {
    check_scale_shape(t, scales[i], shapes[i], T, c, who);
    Var z = layer_norm(t, scales[i], p.norm_gamma, p.norm_beta);
    z = linear(t, z, p.w_in, p.b_in);
    z = planar ? depthwise_conv2d(t, z, p.conv)
               : depthwise_conv3d(t, z, p.conv);
    z = silu(t, z);
    const i64 rows = T * shapes[i].h * shapes[i].w;
    inner[i] = reshape(t, z, {rows, di});
    pre[i] = reshape(t, scales[i], {rows, c});
  }
  Var u_stack = stack_scales(t, inner);

  Var merged;
  for (int k = 0; k < directions; ++k) {
    const SeqSpec& sq = spec.seqs[static_cast<size_t>(k)];
    Var u = gather_rows(t, u_stack, share(sq.perm));
    Var y = selective_scan(t, u, p.dirs[static_cast<size_t>(k)], impl,
                           spec.seg_len);
    Var v = gather_rows(t, y, share(sq.visual_inv));
    merged = k == 0 ? v : add(t, merged, v);
  }

  Var gated = gate_output(t, merged, stack_scales(t, pre), p.gate);
  std::vector<Var> out(scales.size());
  i64 base = 0;
  for (size_t i = 0; i < scales.size(); ++i) {
    const i64 rows = T * shapes[i].h * shapes[i].w;
    out[i] = reshape(t, slice_rows(t, gated, base, rows),
                     {T, shapes[i].h, shapes[i].w, c});
    base += rows;
  }
  return out;
}

// Visual and audio in-paths of the fusion blocks (no SiLU): returns the
// flattened visual rows [V,Di] and the audio rows [T,Di].
std::pair<Var, Var> fusion_inpaths(Tape& t, Var visual, ScaleShape shape,
                                   i64 T, Var audio, const FusionVars& p,
                                   const char* who) {
  const i64 c = t.val(p.v_norm_gamma).shape()[0];
  const i64 di = t.val(p.v_w).shape()[1];
  check_scale_shape(t, visual, shape, T, c, who);
  check(t.val(audio).shape() == Shape{T, c},
        std::string(who) + ": audio must be [T,C] with matching T");
  Var v = layer_norm(t, visual, p.v_norm_gamma, p.v_norm_beta);
  v = linear(t, v, p.v_w, p.v_b);
  v = depthwise_conv2d(t, v, p.v_conv);
  v = reshape(t, v, {T * shape.h * shape.w, di});
  Var a = layer_norm(t, audio, p.a_norm_gamma, p.a_norm_beta);
  a = linear(t, a, p.a_w, p.a_b);
  a = causal_conv1d(t, a, p.a_conv);
  return {v, a};
}

// Scans the [visual rows; audio rows] stack along every sequence of `spec`
// and sums the gathered slots given by `pick` over directions.
Var fused_scan_merge(Tape& t, Var stack, const LayoutSpec& spec,
                     const FusionVars& p, bool pick_audio, ScanImpl impl) {
  Var merged;
  for (size_t k = 0; k < spec.seqs.size(); ++k) {
    const SeqSpec& sq = spec.seqs[k];
    Var u = gather_rows(t, stack, share(sq.perm));
    Var y = selective_scan(t, u, p.dirs[k], impl, spec.seg_len);
    Var part =
        gather_rows(t, y, share(pick_audio ? sq.audio_pos : sq.visual_inv));
    merged = k == 0 ? part : add(t, merged, part);
  }
  return merged;
}

}  // namespace

ScanBlockVars bind_scan_block(Tape& t, ParamStore& ps,
                              const std::string& prefix, int directions) {
  ScanBlockVars v;
  v.norm_gamma = t.param(ps.at(prefix + ".norm_gamma"));
  v.norm_beta = t.param(ps.at(prefix + ".norm_beta"));
  v.w_in = t.param(ps.at(prefix + ".w_in"));
  v.b_in = t.param(ps.at(prefix + ".b_in"));
  v.conv = t.param(ps.at(prefix + ".conv"));
  v.dirs.reserve(static_cast<size_t>(directions));
  for (int k = 0; k < directions; ++k) {
    v.dirs.push_back(bind_ssm(t, ps, dir_prefix(prefix, k)));
  }
  v.gate = bind_gate(t, ps, prefix + ".gate");
  return v;
}

FusionVars bind_fusion(Tape& t, ParamStore& ps, const std::string& prefix) {
  FusionVars v;
  v.v_norm_gamma = t.param(ps.at(prefix + ".v_norm_gamma"));
  v.v_norm_beta = t.param(ps.at(prefix + ".v_norm_beta"));
  v.v_w = t.param(ps.at(prefix + ".v_w"));
  v.v_b = t.param(ps.at(prefix + ".v_b"));
  v.v_conv = t.param(ps.at(prefix + ".v_conv"));
  v.a_norm_gamma = t.param(ps.at(prefix + ".a_norm_gamma"));
  v.a_norm_beta = t.param(ps.at(prefix + ".a_norm_beta"));
  v.a_w = t.param(ps.at(prefix + ".a_w"));
  v.a_b = t.param(ps.at(prefix + ".a_b"));
  v.a_conv = t.param(ps.at(prefix + ".a_conv"));
  v.dirs.reserve(kPlanarDirections);
  for (int k = 0; k < kPlanarDirections; ++k) {
    v.dirs.push_back(bind_ssm(t, ps, dir_prefix(prefix, k)));
  }
  v.gate = bind_gate(t, ps, prefix + ".gate");
  return v;
}

CfbVars bind_cfb(Tape& t, ParamStore& ps, const std::string& prefix,
                 int directions) {
  CfbVars v;
  v.tm = bind_scan_block(t, ps, prefix + ".tm", directions);
  v.a2v = bind_fusion(t, ps, prefix + ".a2v");
  return v;
}

std::vector<Var> vss_block(Tape& t, const std::vector<Var>& scales,
                           const std::vector<ScaleShape>& shapes, i64 T,
                           const ScanBlockVars& p, ScanImpl impl) {
  check(t.val(p.conv).rank() == 3, "vss_block: expected a 2D conv kernel");
  LayoutSpec spec = layout_ss2d(shapes, T, false);
  return scan_block_forward(t, scales, shapes, T, p, spec, kPlanarDirections,
                            impl, "vss_block");
}

std::vector<Var> temporal_mamba_block(Tape& t, const std::vector<Var>& scales,
                                      const std::vector<ScaleShape>& shapes,
                                      i64 T, const ScanBlockVars& p,
                                      int direction_count, ScanImpl impl) {
  check(t.val(p.conv).rank() == 4,
        "temporal_mamba_block: expected a 3D conv kernel");
  LayoutSpec spec = layout_3d(shapes, T, direction_count);
  return scan_block_forward(t, scales, shapes, T, p, spec, direction_count,
                            impl, "temporal_mamba_block");
}

Var v2a_frame_level(Tape& t, Var visual, ScaleShape shape, i64 T, Var audio,
                    const FusionVars& p, ScanImpl impl) {
  auto [v, a] = fusion_inpaths(t, visual, shape, T, audio, p,
                               "v2a_frame_level");
  LayoutSpec spec = layout_ss2d({shape}, T, true);
  Var merged =
      fused_scan_merge(t, concat_rows(t, v, a), spec, p, true, impl);
  return gate_output(t, merged, audio, p.gate);
}

Var v2a_temporal_level(Tape& t, Var visual, ScaleShape shape, i64 T,
                       Var audio, const FusionVars& p, ScanImpl impl) {
  auto [v, a] = fusion_inpaths(t, visual, shape, T, audio, p,
                               "v2a_temporal_level");
  LayoutSpec spec = layout_temporal_audio(shape, T, false);
  Var merged =
      fused_scan_merge(t, concat_rows(t, v, a), spec, p, true, impl);
  return gate_output(t, merged, audio, p.gate);
}

Var a2v_scan(Tape& t, Var visual, ScaleShape shape, i64 T, Var audio,
             const FusionVars& p, ScanImpl impl) {
  auto [v, a] = fusion_inpaths(t, visual, shape, T, audio, p, "a2v_scan");
  LayoutSpec spec = layout_temporal_audio(shape, T, true);
  Var merged =
      fused_scan_merge(t, concat_rows(t, v, a), spec, p, false, impl);
  const i64 c = t.val(p.v_norm_gamma).shape()[0];
  Var pre = reshape(t, visual, {T * shape.h * shape.w, c});
  Var gated = gate_output(t, merged, pre, p.gate);
  return reshape(t, gated, {T, shape.h, shape.w, c});
}

Var context_fusion_block(Tape& t, Var visual, ScaleShape shape, i64 T,
                         Var audio, const CfbVars& p, int direction_count,
                         ScanImpl impl) {
  Var tm_out = temporal_mamba_block(t, {visual}, {shape}, T, p.tm,
                                    direction_count, impl)[0];
  return a2v_scan(t, tm_out, shape, T, audio, p.a2v, impl);
}

}  // namespace ops
}  // namespace ssmavs
