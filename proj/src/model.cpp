#include "ssmavs/model.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ssmavs/common.hpp"

namespace ssmavs {
namespace {

bool valid_direction_count(int dc) {
  return dc >= 2 && dc <= kMaxDirections && dc % 2 == 0;
}

void add_linear(ParamStore& ps, const std::string& name, i64 in, i64 out,
                Rng& rng, Dtype dt) {
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  ps.add(name + ".w", rng.uniform_tensor({in, out}, -s, s, dt));
  ps.add(name + ".b", Tensor::zeros({out}, dt));
}

}  // namespace

void ModelConfig::validate() const {
  check(C >= 1 && N >= 1, "model config: C and N must be positive");
  check(encoder_layers >= 1 && decoder_layers >= 1,
        "model config: layer counts must be at least 1");
  check(valid_direction_count(direction_count),
        "model config: direction_count must be one of {2,4,6,8,10,12}");
  check(N_class >= 1, "model config: N_class must be positive");
  check(T_max >= 1, "model config: T_max must be positive");
  check(input_h >= 32 && input_w >= 32 && input_h % 32 == 0 &&
            input_w % 32 == 0,
        "model config: input extents must be divisible by 32");
}

std::vector<ScaleShape> ModelConfig::pyramid_shapes() const {
  std::vector<ScaleShape> out;
  for (i64 stride = 4; stride <= 32; stride *= 2) {
    out.push_back({input_h / stride, input_w / stride});
  }
  return out;
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(std::string("model config: parse error: ") + e.what());
  }
  check(j.is_object(), "model config: top level must be an object");
  static const std::set<std::string> known = {
      "C",       "N",     "encoder_layers", "decoder_layers",
      "direction_count", "N_class", "T_max", "input_h", "input_w"};
  for (const auto& item : j.items()) {
    check(known.count(item.key()) > 0,
          "model config: unknown key \"" + item.key() + "\"");
  }
  ModelConfig cfg;
  auto read = [&](const char* key, auto& field) {
    check(j.contains(key),
          std::string("model config: missing key \"") + key + "\"");
    check(j.at(key).is_number_integer(),
          std::string("model config: key \"") + key + "\" must be an integer");
    field = j.at(key).get<i64>();
  };
  read("C", cfg.C);
  read("N", cfg.N);
  read("encoder_layers", cfg.encoder_layers);
  read("decoder_layers", cfg.decoder_layers);
  i64 dc = 0;
  read("direction_count", dc);
  cfg.direction_count = static_cast<int>(dc);
  read("N_class", cfg.N_class);
  read("T_max", cfg.T_max);
  read("input_h", cfg.input_h);
  read("input_w", cfg.input_w);
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "model config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void init_model_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng,
                       Dtype dt) {
  cfg.validate();
  const i64 c = cfg.C;
  add_linear(ps, "stem.patch", 4 * 4 * 3, c, rng, dt);
  add_linear(ps, "stem.merge2", 4 * c, c, rng, dt);
  add_linear(ps, "stem.merge3", 4 * c, c, rng, dt);
  add_linear(ps, "stem.merge4", 4 * c, c, rng, dt);
  add_linear(ps, "stem.audio", kAudioDim, c, rng, dt);
  for (i64 l = 0; l < cfg.encoder_layers; ++l) {
    const std::string base = "mte.layer" + std::to_string(l);
    init_scan_block_params(ps, base + ".vss", c, cfg.N, kPlanarDirections, 2,
                           rng, dt);
    init_scan_block_params(ps, base + ".tm", c, cfg.N, kMaxDirections, 3, rng,
                           dt);
  }
  for (i64 l = 0; l < cfg.decoder_layers; ++l) {
    const std::string base = "mad.layer" + std::to_string(l);
    init_fusion_params(ps, base + ".frame", c, cfg.N, rng, dt);
    init_fusion_params(ps, base + ".temporal", c, cfg.N, rng, dt);
  }
  for (int i = 1; i <= 4; ++i) {
    init_cfb_params(ps, "cip.scale" + std::to_string(i), c, cfg.N,
                    kMaxDirections, rng, dt);
  }
  add_linear(ps, "head.mlp1", c + 1, c, rng, dt);
  add_linear(ps, "head.mlp2", c, c, rng, dt);
  add_linear(ps, "head.fc", c, cfg.N_class, rng, dt);
}

Tensor pad_frames(const Tensor& x, i64 t_max) {
  check(x.rank() >= 1, "pad_frames: rank must be at least 1");
  const i64 T = x.shape()[0];
  check(T >= 1 && T <= t_max, "pad_frames: frame count exceeds t_max");
  if (T == t_max) return x;
  Shape out_shape = x.shape();
  out_shape[0] = t_max;
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  for (i64 i = 0; i < x.numel(); ++i) out.set_scalar(i, x.scalar_at(i));
  return out;
}

Tensor frame_validity(i64 T, i64 t_max, Dtype dt) {
  check(T >= 1 && T <= t_max, "frame_validity: frame count exceeds t_max");
  Tensor v = Tensor::zeros({t_max}, dt);
  for (i64 t = 0; t < T; ++t) v.set_scalar(t, 1.0);
  return v;
}

namespace ops {
namespace {

// [T,h,w,ch] -> [T,h/p,w/p,p*p*ch] over non-overlapping p x p patches.
Var extract_patches(Tape& t, Var x, i64 T, i64 h, i64 w, i64 p, i64 ch) {
  Var r = reshape(t, x, {T, h / p, p, w / p, p, ch});
  r = permute(t, r, {0, 1, 3, 2, 4, 5});
  return reshape(t, r, {T, h / p, w / p, p * p * ch});
}

Var bound_linear(Tape& t, ParamStore& ps, const std::string& name, Var x) {
  return linear(t, x, t.param(ps.at(name + ".w")),
                t.param(ps.at(name + ".b")));
}

}  // namespace

std::vector<Var> visual_stem(Tape& t, ParamStore& ps, const ModelConfig& cfg,
                             const Tensor& clip) {
  const Shape& s = clip.shape();
  check(clip.rank() == 4 && s[3] == 3, "visual_stem: clip must be [T,h,w,3]");
  check(s[1] >= 32 && s[2] >= 32 && s[1] % 32 == 0 && s[2] % 32 == 0,
        "visual_stem: extents must be divisible by 32");
  const i64 T = s[0];
  Var x = t.constant(clip);
  std::vector<Var> out;
  out.push_back(bound_linear(t, ps, "stem.patch",
                             extract_patches(t, x, T, s[1], s[2], 4, 3)));
  i64 h = s[1] / 4, w = s[2] / 4;
  for (int i = 2; i <= 4; ++i) {
    Var m = extract_patches(t, out.back(), T, h, w, 2, cfg.C);
    out.push_back(bound_linear(t, ps, "stem.merge" + std::to_string(i), m));
    h /= 2;
    w /= 2;
  }
  return out;
}

AudioTrack audio_stem(Tape& t, ParamStore& ps, const Tensor& audio,
                      i64 t_max) {
  check(audio.rank() == 2 && audio.shape()[1] == kAudioDim,
        "audio_stem: descriptors must be [T," + std::to_string(kAudioDim) +
            "]");
  const i64 T = audio.shape()[0];
  check(T >= 1 && T <= t_max, "audio_stem: clip length exceeds T_max");
  const i64 c = ps.at("stem.audio.w").value.shape()[1];
  Var f = bound_linear(t, ps, "stem.audio",
                       t.constant(pad_frames(audio, t_max)));
  return {reshape(t, f, {t_max, 1, c}),
          frame_validity(T, t_max, audio.dtype())};
}

HeadOut segmentation_head(Tape& t, ParamStore& ps, const ModelConfig& cfg,
                          Var mask_feature, Var audio_query) {
  const Shape& fs = t.val(mask_feature).shape();
  check(fs.size() == 4 && fs[3] == cfg.C,
        "segmentation_head: mask feature must be [T,h,w,C]");
  check(t.val(audio_query).shape() == Shape{fs[0], cfg.C},
        "segmentation_head: audio query must be [T,C]");
  Var im = frame_dot(t, mask_feature, audio_query);
  const i64 pixels = fs[0] * fs[1] * fs[2];
  Var cat = concat_cols(t, reshape(t, mask_feature, {pixels, cfg.C}),
                        reshape(t, im, {pixels, 1}));
  Var h = silu(t, bound_linear(t, ps, "head.mlp1", cat));
  h = silu(t, bound_linear(t, ps, "head.mlp2", h));
  Var logits = bound_linear(t, ps, "head.fc", h);
  return {reshape(t, logits, {fs[0], fs[1], fs[2], cfg.N_class}), im};
}

ModelOutput model_forward(Tape& t, ParamStore& ps, const ModelConfig& cfg,
                          const Tensor& clip, const Tensor& audio,
                          ScanImpl impl, int direction_override) {
  cfg.validate();
  const int dc =
      direction_override > 0 ? direction_override : cfg.direction_count;
  check(valid_direction_count(dc),
        "model_forward: direction override must be one of {2,4,6,8,10,12}");
  const Shape& s = clip.shape();
  check(clip.rank() == 4 && s[1] == cfg.input_h && s[2] == cfg.input_w &&
            s[3] == 3,
        "model_forward: clip must be [T,input_h,input_w,3]");
  const i64 T = s[0];
  check(T >= 1 && T <= cfg.T_max, "model_forward: clip length exceeds T_max");
  check(audio.rank() == 2 && audio.shape()[0] == T &&
            audio.shape()[1] == kAudioDim,
        "model_forward: audio must be [T," + std::to_string(kAudioDim) + "]");

  const std::vector<ScaleShape> shapes = cfg.pyramid_shapes();
  const std::vector<ScaleShape> enc_shapes(shapes.begin() + 1, shapes.end());
  std::vector<Var> pyr =
      visual_stem(t, ps, cfg, pad_frames(clip, cfg.T_max));
  AudioTrack track = audio_stem(t, ps, audio, cfg.T_max);
  Var fa = reshape(t, track.features, {cfg.T_max, cfg.C});

  std::vector<Var> enc(pyr.begin() + 1, pyr.end());
  for (i64 l = 0; l < cfg.encoder_layers; ++l) {
    const std::string base = "mte.layer" + std::to_string(l);
    ScanBlockVars pv =
        bind_scan_block(t, ps, base + ".vss", kPlanarDirections);
    enc = vss_block(t, enc, enc_shapes, cfg.T_max, pv, impl);
    ScanBlockVars pt = bind_scan_block(t, ps, base + ".tm", dc);
    enc = temporal_mamba_block(t, enc, enc_shapes, cfg.T_max, pt, dc, impl);
  }

  Var a = fa;
  for (i64 l = 0; l < cfg.decoder_layers; ++l) {
    const std::string base = "mad.layer" + std::to_string(l);
    FusionVars pf = bind_fusion(t, ps, base + ".frame");
    FusionVars pt = bind_fusion(t, ps, base + ".temporal");
    for (size_t i = 0; i < enc.size(); ++i) {
      a = v2a_frame_level(t, enc[i], enc_shapes[i], cfg.T_max, a, pf, impl);
      a = v2a_temporal_level(t, enc[i], enc_shapes[i], cfg.T_max, a, pt,
                             impl);
    }
  }

  Var r;
  for (int scale = 4; scale >= 2; --scale) {
    CfbVars pc = bind_cfb(t, ps, "cip.scale" + std::to_string(scale), dc);
    Var g = context_fusion_block(t, enc[static_cast<size_t>(scale - 2)],
                                 shapes[static_cast<size_t>(scale - 1)],
                                 cfg.T_max, fa, pc, dc, impl);
    r = scale == 4 ? g : add(t, g, bilinear_up2(t, r));
  }
  CfbVars p1 = bind_cfb(t, ps, "cip.scale1", dc);
  Var g1 =
      context_fusion_block(t, pyr[0], shapes[0], cfg.T_max, fa, p1, dc, impl);
  Var mask_feature = add(t, g1, bilinear_up2(t, r));

  HeadOut head = segmentation_head(t, ps, cfg, mask_feature, a);
  std::vector<Var> pre_cip = {pyr[0]};
  pre_cip.insert(pre_cip.end(), enc.begin(), enc.end());
  return {head.logits,    head.inter_mask, mask_feature,
          reshape(t, a, {cfg.T_max, 1, cfg.C}), track.validity,
          std::move(pre_cip)};
}

Var segmentation_loss(Tape& t, Var logits, const Tensor& targets,
                      const Tensor& validity, bool semantic) {
  const Shape& ls = t.val(logits).shape();
  check(ls.size() == 4, "segmentation_loss: logits must be [T,h,w,K]");
  const i64 T = ls[0], K = ls[3];
  const i64 H = 4 * ls[1], W = 4 * ls[2];
  check(targets.shape() == Shape{T, H, W, K},
        "segmentation_loss: targets must match upsampled logits");
  check(validity.shape() == Shape{T},
        "segmentation_loss: validity must be [T]");
  i64 valid = 0;
  for (i64 i = 0; i < T; ++i) valid += validity.scalar_at(i) > 0.5 ? 1 : 0;
  check(valid >= 1, "segmentation_loss: no valid frames");
  const Dtype dt = t.val(logits).dtype();
  const Tensor vmask = validity.astype(dt);
  const Tensor tgt = targets.astype(dt);

  if (semantic) {
    Var z = bilinear_up2(t, bilinear_up2(t, logits));
    Var per_frame = reduce_trailing(t, bce_with_logits(t, z, tgt), 1);
    Var total = sum_all(t, mul_const(t, per_frame, vmask));
    return scale(t, total, 1.0 / static_cast<double>(valid * H * W * K));
  }

  check(K == 1, "segmentation_loss: dice path requires N_class == 1");
  Var p = bilinear_up2(t, bilinear_up2(t, sigmoid(t, logits)));
  Var s_pg = reduce_trailing(t, mul_const(t, p, tgt), 1);
  Var s_p = reduce_trailing(t, p, 1);
  Tensor s_g = Tensor::zeros({T}, dt);
  for (i64 f = 0; f < T; ++f) {
    double acc = 0;
    for (i64 i = 0; i < H * W; ++i) acc += tgt.scalar_at(f * H * W + i);
    s_g.set_scalar(f, acc);
  }
  Var num = add_scalar(t, scale(t, s_pg, 2.0), kDiceEps);
  Var den = add_scalar(t, add(t, s_p, t.constant(s_g)), kDiceEps);
  Var dice = sub(t, t.constant(Tensor::full({T}, 1.0, dt)),
                 div(t, num, den));
  return scale(t, sum_all(t, mul_const(t, dice, vmask)),
               1.0 / static_cast<double>(valid));
}

}  // namespace ops
}  // namespace ssmavs
