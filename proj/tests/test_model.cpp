#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ssmavs/adamw.hpp"
#include "ssmavs/gradcheck.hpp"
#include "ssmavs/metrics.hpp"
#include "ssmavs/model.hpp"
#include "ssmavs/ops.hpp"
#include "ssmavs/rng.hpp"

using namespace ssmavs;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.C = 4;
  cfg.N = 2;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  cfg.direction_count = 2;
  cfg.N_class = 1;
  cfg.T_max = 2;
  cfg.input_h = 32;
  cfg.input_w = 32;
  return cfg;
}

double eval_loss(ParamStore& ps,
                 const std::function<Var(Tape&, ParamStore&)>& build) {
  Tape t(Dtype::F64);
  Var loss = build(t, ps);
  return t.val(loss).item();
}

FdReport check_grads(ParamStore& ps, const std::vector<std::string>& names,
                     const std::function<Var(Tape&, ParamStore&)>& build,
                     u64 seed = 7, i64 coords = 4) {
  ps.zero_grad();
  Tape t(Dtype::F64);
  Var loss = build(t, ps);
  t.backward(loss);
  Rng rng(seed);
  return fd_check_params(
      ps, names, [&] { return eval_loss(ps, build); }, coords, rng);
}

bool all_finite(const Tensor& x) {
  for (i64 i = 0; i < x.numel(); ++i) {
    if (!std::isfinite(x.scalar_at(i))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("visual stem produces the strided pyramid") {
  ModelConfig cfg = tiny_config();
  cfg.C = 8;
  cfg.input_h = 64;
  cfg.input_w = 64;
  ParamStore ps;
  Rng rng(3);
  init_model_params(ps, cfg, rng);
  const i64 T = 2;

  SUBCASE("extents and constant-input uniformity") {
    Tensor clip = Tensor::full({T, 64, 64, 3}, 0.4, Dtype::F32);
    Tape t(Dtype::F32);
    std::vector<Var> pyr = ops::visual_stem(t, ps, cfg, clip);
    REQUIRE(pyr.size() == 4);
    const std::vector<ScaleShape> want = {{16, 16}, {8, 8}, {4, 4}, {2, 2}};
    for (size_t i = 0; i < 4; ++i) {
      const Tensor& f = t.val(pyr[i]);
      CHECK(f.shape() == Shape{T, want[i].h, want[i].w, cfg.C});
      const i64 px = want[i].h * want[i].w;
      for (i64 fr = 0; fr < T; ++fr) {
        for (i64 p = 1; p < px; ++p) {
          for (i64 c = 0; c < cfg.C; ++c) {
            CHECK(f.scalar_at((fr * px + p) * cfg.C + c) ==
                  f.scalar_at(fr * px * cfg.C + c));
          }
        }
      }
    }
  }

  SUBCASE("indivisible extents are rejected") {
    Tape t(Dtype::F32);
    Tensor bad = Tensor::zeros({T, 60, 64, 3}, Dtype::F32);
    CHECK_THROWS(ops::visual_stem(t, ps, cfg, bad));
  }

  SUBCASE("gradients reach the stem weights") {
    ParamStore ps64;
    Rng r2(4);
    init_model_params(ps64, cfg, r2, Dtype::F64);
    ps64.zero_grad();
    Tape t(Dtype::F64);
    Rng data(5);
    Tensor clip = data.uniform_tensor({T, 64, 64, 3}, 0, 1, Dtype::F64);
    std::vector<Var> pyr = ops::visual_stem(t, ps64, cfg, clip);
    Var loss = ops::sum_all(t, pyr[3]);
    for (size_t i = 0; i < 3; ++i) {
      loss = ops::add(t, loss, ops::sum_all(t, pyr[i]));
    }
    t.backward(loss);
    for (const char* name : {"stem.patch.w", "stem.merge2.w", "stem.merge3.w",
                             "stem.merge4.w"}) {
      double mag = 0;
      const Tensor& g = ps64.at(name).grad;
      for (i64 i = 0; i < g.numel(); ++i) {
        mag = std::max(mag, std::abs(g.scalar_at(i)));
      }
      CHECK(mag > 0);
    }
  }
}

TEST_CASE("audio stem pads with masked bias frames") {
  ModelConfig cfg = tiny_config();
  ParamStore ps;
  Rng rng(9);
  init_model_params(ps, cfg, rng);
  Parameter& bias = ps.at("stem.audio.b");
  bias.value = Rng(10).normal_tensor({cfg.C}, 0, 1, Dtype::F32);

  Tape t(Dtype::F32);
  Rng data(11);
  Tensor five = data.normal_tensor({5, kAudioDim}, 0, 1, Dtype::F32);
  ops::AudioTrack track = ops::audio_stem(t, ps, five, 10);
  CHECK(t.val(track.features).shape() == Shape{10, 1, cfg.C});
  for (i64 f = 0; f < 10; ++f) {
    CHECK(track.validity.scalar_at(f) == (f < 5 ? 1.0 : 0.0));
  }
  const Tensor& feats = t.val(track.features);
  for (i64 f = 5; f < 10; ++f) {
    for (i64 c = 0; c < cfg.C; ++c) {
      CHECK(feats.scalar_at(f * cfg.C + c) ==
            doctest::Approx(bias.value.scalar_at(c)).epsilon(1e-6));
    }
  }

  ops::AudioTrack full =
      ops::audio_stem(t, ps, data.normal_tensor({10, kAudioDim}, 0, 1,
                                                Dtype::F32), 10);
  for (i64 f = 0; f < 10; ++f) CHECK(full.validity.scalar_at(f) == 1.0);

  Tensor zero = Tensor::zeros({1, kAudioDim}, Dtype::F32);
  ops::AudioTrack z = ops::audio_stem(t, ps, zero, 2);
  for (i64 c = 0; c < cfg.C; ++c) {
    CHECK(t.val(z.features).scalar_at(c) == bias.value.scalar_at(c));
  }

  CHECK_THROWS(ops::audio_stem(
      t, ps, data.normal_tensor({11, kAudioDim}, 0, 1, Dtype::F32), 10));
}

TEST_CASE("model config JSON is strict") {
  const std::string good = R"({"C": 32, "N": 16, "encoder_layers": 2,
    "decoder_layers": 2, "direction_count": 8, "N_class": 1,
    "T_max": 10, "input_h": 64, "input_w": 64})";
  ModelConfig cfg = ModelConfig::from_json(good);
  CHECK(cfg.C == 32);
  CHECK(cfg.N == 16);
  CHECK(cfg.direction_count == 8);
  CHECK(cfg.T_max == 10);
  CHECK(cfg.pyramid_shapes() ==
        std::vector<ScaleShape>{{16, 16}, {8, 8}, {4, 4}, {2, 2}});

  CHECK_THROWS(ModelConfig::from_json(R"({"C": 32})"));
  CHECK_THROWS(ModelConfig::from_json(
      R"({"C": 32, "N": 16, "encoder_layers": 2, "decoder_layers": 2,
          "direction_count": 8, "N_class": 1, "T_max": 10,
          "input_h": 64, "input_w": 64, "extra": 1})"));
  CHECK_THROWS(ModelConfig::from_json(
      R"({"C": 32.5, "N": 16, "encoder_layers": 2, "decoder_layers": 2,
          "direction_count": 8, "N_class": 1, "T_max": 10,
          "input_h": 64, "input_w": 64})"));
  CHECK_THROWS(ModelConfig::from_json(
      R"({"C": 32, "N": 16, "encoder_layers": 2, "decoder_layers": 2,
          "direction_count": 5, "N_class": 1, "T_max": 10,
          "input_h": 64, "input_w": 64})"));
  CHECK_THROWS(ModelConfig::from_json(
      R"({"C": 32, "N": 16, "encoder_layers": 0, "decoder_layers": 2,
          "direction_count": 8, "N_class": 1, "T_max": 10,
          "input_h": 64, "input_w": 64})"));
  CHECK_THROWS(ModelConfig::from_json(
      R"({"C": 32, "N": 16, "encoder_layers": 2, "decoder_layers": 2,
          "direction_count": 8, "N_class": 1, "T_max": 10,
          "input_h": 60, "input_w": 64})"));
  CHECK_THROWS(ModelConfig::from_json("not json"));
}

TEST_CASE("end-to-end forward yields finite scale-1 outputs") {
  ModelConfig cfg;  // paper-shaped toy defaults
  ParamStore ps;
  Rng rng(21);
  init_model_params(ps, cfg, rng);
  Rng data(22);
  Tensor clip = data.uniform_tensor({5, 64, 64, 3}, 0, 1, Dtype::F32);
  Tensor audio = data.normal_tensor({5, kAudioDim}, 0, 1, Dtype::F32);

  Tape t(Dtype::F32);
  ops::ModelOutput out = ops::model_forward(t, ps, cfg, clip, audio);
  CHECK(t.val(out.logits).shape() == Shape{10, 16, 16, 1});
  CHECK(t.val(out.inter_mask).shape() == Shape{10, 16, 16, 1});
  CHECK(t.val(out.mask_feature).shape() == Shape{10, 16, 16, 32});
  CHECK(t.val(out.audio_out).shape() == Shape{10, 1, 32});
  CHECK(all_finite(t.val(out.logits)));
  CHECK(all_finite(t.val(out.inter_mask)));
  for (i64 f = 0; f < 10; ++f) {
    CHECK(out.validity.scalar_at(f) == (f < 5 ? 1.0 : 0.0));
  }
}

TEST_CASE("zeroed inner paths reduce the model to its residual skeleton") {
  ModelConfig cfg = tiny_config();
  cfg.C = 8;
  ParamStore ps;
  Rng rng(31);
  init_model_params(ps, cfg, rng);
  std::vector<std::string> gates;
  ps.for_each([&](const Parameter& p) {
    if (p.name.ends_with(".gate.w_out")) gates.push_back(p.name);
  });
  CHECK(gates.size() ==
        static_cast<size_t>(2 * cfg.encoder_layers + 2 * cfg.decoder_layers +
                            2 * 4));
  for (const std::string& name : gates) {
    Parameter& p = ps.at(name);
    p.value = Tensor::zeros(p.value.shape(), p.value.dtype());
  }

  Rng data(32);
  Tensor clip = data.uniform_tensor({2, 32, 32, 3}, 0, 1, Dtype::F32);
  Tensor audio = data.normal_tensor({2, kAudioDim}, 0, 1, Dtype::F32);

  Tape t(Dtype::F32);
  ops::ModelOutput out = ops::model_forward(t, ps, cfg, clip, audio);

  std::vector<Var> pyr =
      ops::visual_stem(t, ps, cfg, pad_frames(clip, cfg.T_max));
  ops::AudioTrack track = ops::audio_stem(t, ps, audio, cfg.T_max);
  Var fa = ops::reshape(t, track.features, {cfg.T_max, cfg.C});
  Var r = pyr[3];
  r = ops::add(t, pyr[2], ops::bilinear_up2(t, r));
  r = ops::add(t, pyr[1], ops::bilinear_up2(t, r));
  Var feat = ops::add(t, pyr[0], ops::bilinear_up2(t, r));
  ops::HeadOut head = ops::segmentation_head(t, ps, cfg, feat, fa);

  CHECK(t.val(out.audio_out).bitwise_equal(t.val(track.features)));
  CHECK(t.val(out.mask_feature).bitwise_equal(t.val(feat)));
  CHECK(t.val(out.logits).bitwise_equal(t.val(head.logits)));
}

TEST_CASE("direction counts share weights yet separate the outputs") {
  ModelConfig cfg = tiny_config();
  ParamStore ps;
  Rng rng(41);
  init_model_params(ps, cfg, rng);
  Rng data(42);
  Tensor clip = data.uniform_tensor({2, 32, 32, 3}, 0, 1, Dtype::F32);
  Tensor audio = data.normal_tensor({2, kAudioDim}, 0, 1, Dtype::F32);

  std::vector<Tensor> logits;
  for (int dc : {2, 4, 6, 8}) {
    Tape t(Dtype::F32);
    ops::ModelOutput out =
        ops::model_forward(t, ps, cfg, clip, audio, ScanImpl::Sequential, dc);
    logits.push_back(t.val(out.logits));
  }
  for (size_t i = 0; i < logits.size(); ++i) {
    for (size_t j = i + 1; j < logits.size(); ++j) {
      CHECK_FALSE(logits[i].bitwise_equal(logits[j]));
    }
  }
}

TEST_CASE("audio query reacts to visual content of any frame") {
  ModelConfig cfg = tiny_config();
  ParamStore ps;
  Rng rng(43);
  init_model_params(ps, cfg, rng);
  Rng data(44);
  Tensor clip = data.uniform_tensor({2, 32, 32, 3}, 0, 1, Dtype::F32);
  Tensor audio = data.normal_tensor({2, kAudioDim}, 0, 1, Dtype::F32);

  Tape t0(Dtype::F32);
  Tensor base =
      t0.val(ops::model_forward(t0, ps, cfg, clip, audio).audio_out);

  const i64 frame_elems = 32 * 32 * 3;
  for (i64 f = 0; f < 2; ++f) {
    Tensor bumped = clip.clone();
    bumped.set_scalar(f * frame_elems + 7,
                      clip.scalar_at(f * frame_elems + 7) + 0.5);
    Tape t(Dtype::F32);
    Tensor got = t.val(ops::model_forward(t, ps, cfg, bumped, audio).audio_out);
    const i64 other = (1 - f) * cfg.C;
    bool changed = false;
    for (i64 c = 0; c < cfg.C; ++c) {
      changed = changed || got.scalar_at(other + c) != base.scalar_at(other + c);
    }
    CHECK(changed);
  }
}

TEST_CASE("segmentation head matches the per-pixel dot-product oracle") {
  ModelConfig cfg = tiny_config();
  cfg.C = 5;
  cfg.N_class = 3;
  ParamStore ps;
  Rng rng(51);
  init_model_params(ps, cfg, rng, Dtype::F64);
  const i64 T = 2, h = 3, w = 4;
  Rng data(52);
  Tensor feat = data.normal_tensor({T, h, w, cfg.C}, 0, 1, Dtype::F64);
  Tensor query = data.normal_tensor({T, cfg.C}, 0, 1, Dtype::F64);

  Tape t(Dtype::F64);
  ops::HeadOut out = ops::segmentation_head(t, ps, cfg, t.constant(feat),
                                            t.constant(query));
  CHECK(t.val(out.logits).shape() == Shape{T, h, w, 3});
  const Tensor& im = t.val(out.inter_mask);
  for (i64 f = 0; f < T; ++f) {
    for (i64 p = 0; p < h * w; ++p) {
      double want = 0;
      for (i64 c = 0; c < cfg.C; ++c) {
        want += feat.scalar_at((f * h * w + p) * cfg.C + c) *
                query.scalar_at(f * cfg.C + c);
      }
      CHECK(im.scalar_at(f * h * w + p) ==
            doctest::Approx(want).epsilon(1e-12));
    }
  }

  ops::HeadOut zq = ops::segmentation_head(
      t, ps, cfg, t.constant(feat),
      t.constant(Tensor::zeros({T, cfg.C}, Dtype::F64)));
  for (i64 i = 0; i < T * h * w; ++i) {
    CHECK(t.val(zq.inter_mask).scalar_at(i) == 0.0);
  }

  Tensor unit_q = Tensor::zeros({T, cfg.C}, Dtype::F64);
  unit_q.set_scalar(0, 1.0);
  Tensor ortho = Tensor::zeros({T, h, w, cfg.C}, Dtype::F64);
  ortho.set_scalar(1, 2.5);
  ops::HeadOut oq = ops::segmentation_head(t, ps, cfg, t.constant(ortho),
                                           t.constant(unit_q));
  CHECK(t.val(oq.inter_mask).scalar_at(0) == 0.0);
}

TEST_CASE("upsampling follows the half-pixel interpolation formula") {
  Rng rng(55);
  Tensor x = rng.normal_tensor({1, 2, 2, 1}, 0, 1, Dtype::F64);
  Tape t(Dtype::F64);
  Tensor up = t.val(ops::bilinear_up2(t, t.constant(x)));
  REQUIRE(up.shape() == Shape{1, 4, 4, 1});
  auto coeff = [](i64 i, double& w0, i64& lo) {
    const double src = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
    double f = std::floor(src);
    lo = static_cast<i64>(f);
    double frac = src - f;
    if (lo < 0) {
      lo = 0;
      frac = 0;
    }
    if (lo > 0) {
      lo = 0;
      frac = 1;
    }
    w0 = 1 - frac;
  };
  for (i64 y = 0; y < 4; ++y) {
    for (i64 xx = 0; xx < 4; ++xx) {
      double wy, wx;
      i64 y0, x0;
      coeff(y, wy, y0);
      coeff(xx, wx, x0);
      auto at = [&](i64 yy, i64 xc) { return x.scalar_at(yy * 2 + xc); };
      const double want =
          wy * (wx * at(y0, x0) + (1 - wx) * at(y0, x0 + 1 > 1 ? 1 : x0 + 1)) +
          (1 - wy) *
              (wx * at(y0 + 1 > 1 ? 1 : y0 + 1, x0) +
               (1 - wx) * at(y0 + 1 > 1 ? 1 : y0 + 1, x0 + 1 > 1 ? 1 : x0 + 1));
      CHECK(up.scalar_at(y * 4 + xx) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  Tensor c = Tensor::full({1, 2, 2, 1}, 0.7, Dtype::F64);
  Tensor cu = t.val(ops::bilinear_up2(t, t.constant(c)));
  for (i64 i = 0; i < cu.numel(); ++i) {
    CHECK(cu.scalar_at(i) == doctest::Approx(0.7).epsilon(1e-12));
  }
}

TEST_CASE("losses match their analytic values") {
  const i64 T = 2, h1 = 2, w1 = 2, H = 8, W = 8;

  SUBCASE("dice on perfect and inverted predictions") {
    Tape t(Dtype::F32);
    Var hot = t.constant(Tensor::full({T, h1, w1, 1}, 20.0, Dtype::F32));
    Tensor ones = Tensor::full({T, H, W, 1}, 1.0, Dtype::F32);
    Tensor zeros = Tensor::zeros({T, H, W, 1}, Dtype::F32);
    Tensor valid = Tensor::full({T}, 1.0, Dtype::F32);
    CHECK(t.val(ops::segmentation_loss(t, hot, ones, valid, false)).item() ==
          doctest::Approx(0.0).epsilon(1e-3));
    CHECK(t.val(ops::segmentation_loss(t, hot, zeros, valid, false)).item() ==
          doctest::Approx(1.0).epsilon(1e-3));
    Var cold = t.constant(Tensor::full({T, h1, w1, 1}, -40.0, Dtype::F32));
    CHECK(t.val(ops::segmentation_loss(t, cold, zeros, valid, false))
              .item() == doctest::Approx(0.0).epsilon(1e-3));
  }

  SUBCASE("padded frames are excluded") {
    Tape t(Dtype::F32);
    Tensor logits = Tensor::full({T, h1, w1, 1}, 20.0, Dtype::F32);
    for (i64 i = h1 * w1; i < 2 * h1 * w1; ++i) logits.set_scalar(i, -20.0);
    Tensor ones = Tensor::full({T, H, W, 1}, 1.0, Dtype::F32);
    Tensor valid = Tensor::zeros({T}, Dtype::F32);
    valid.set_scalar(0, 1.0);
    CHECK(t.val(ops::segmentation_loss(t, t.constant(logits), ones, valid,
                                       false))
              .item() == doctest::Approx(0.0).epsilon(1e-3));
  }

  SUBCASE("per-class cross-entropy at zero logits") {
    Tape t(Dtype::F32);
    Var z = t.constant(Tensor::zeros({T, h1, w1, 3}, Dtype::F32));
    Tensor ones = Tensor::full({T, H, W, 3}, 1.0, Dtype::F32);
    Tensor valid = Tensor::full({T}, 1.0, Dtype::F32);
    CHECK(t.val(ops::segmentation_loss(t, z, ones, valid, true)).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  SUBCASE("shape and class-count errors") {
    Tape t(Dtype::F32);
    Var z = t.constant(Tensor::zeros({T, h1, w1, 3}, Dtype::F32));
    Tensor bad = Tensor::zeros({T, H, W, 1}, Dtype::F32);
    Tensor valid = Tensor::full({T}, 1.0, Dtype::F32);
    CHECK_THROWS(ops::segmentation_loss(t, z, bad, valid, true));
    Tensor tgt3 = Tensor::zeros({T, H, W, 3}, Dtype::F32);
    CHECK_THROWS(ops::segmentation_loss(t, z, tgt3, valid, false));
    Tensor no_valid = Tensor::zeros({T}, Dtype::F32);
    CHECK_THROWS(ops::segmentation_loss(t, z, tgt3, no_valid, true));
  }
}

TEST_CASE("metric counts follow the stated conventions") {
  auto mask = [](std::vector<double> vals, Shape s) {
    Tensor t = Tensor::zeros(s, Dtype::F32);
    for (size_t i = 0; i < vals.size(); ++i) t.set_scalar(i, vals[i]);
    return t;
  };
  const Tensor valid1 = Tensor::full({1}, 1.0, Dtype::F32);

  SUBCASE("perfect and disjoint") {
    MetricAccumulator perfect;
    Tensor m = mask({1, 1, 0, 0}, {1, 2, 2, 1});
    perfect.add_clip(m, m, valid1);
    CHECK(perfect.m_j() == 1.0);
    CHECK(perfect.m_f() == 1.0);

    MetricAccumulator disjoint;
    disjoint.add_clip(mask({1, 0, 0, 0}, {1, 2, 2, 1}),
                      mask({0, 1, 0, 0}, {1, 2, 2, 1}), valid1);
    CHECK(disjoint.m_j() == 0.0);
    CHECK(disjoint.m_f() == 0.0);
  }

  SUBCASE("half coverage without false positives") {
    MetricAccumulator acc;
    acc.add_clip(mask({1, 1, 0, 0}, {1, 2, 2, 1}),
                 mask({1, 1, 1, 1}, {1, 2, 2, 1}), valid1);
    CHECK(acc.m_j() == doctest::Approx(0.5));
    CHECK(acc.m_f() == doctest::Approx(2.0 / 3.0));
    CHECK(acc.m_f(0.3) == doctest::Approx(0.8125));
  }

  SUBCASE("empty-vs-empty frames and silent rate") {
    MetricAccumulator acc;
    Tensor probs = mask({1, 1, 0, 0, 0, 0, 0, 0}, {2, 2, 2, 1});
    Tensor tgt = mask({1, 1, 0, 0, 0, 0, 0, 0}, {2, 2, 2, 1});
    acc.add_clip(probs, tgt, Tensor::full({2}, 1.0, Dtype::F32));
    CHECK(acc.m_j() == 1.0);
    CHECK(acc.silent_frames == 1);
    CHECK(acc.silent_empty_rate() == 1.0);

    MetricAccumulator noisy;
    noisy.add_clip(mask({0, 0, 0, 0, 1, 0, 0, 0}, {2, 2, 2, 1}),
                   Tensor::zeros({2, 2, 2, 1}, Dtype::F32),
                   Tensor::full({2}, 1.0, Dtype::F32));
    CHECK(noisy.silent_empty_rate() == doctest::Approx(0.5));
    MetricAccumulator fresh;
    CHECK(fresh.silent_empty_rate() == 1.0);
  }

  SUBCASE("validity skips frames and classes form a union") {
    MetricAccumulator acc;
    Tensor probs = mask({0.9, 0.1, 0, 0, 1, 1, 1, 1}, {2, 2, 2, 1});
    Tensor tgt = mask({1, 0, 0, 0, 0, 0, 0, 0}, {2, 2, 2, 1});
    Tensor valid = mask({1, 0}, {2});
    acc.add_clip(probs, tgt, valid);
    CHECK(acc.frames == 1);
    CHECK(acc.m_j() == 1.0);

    MetricAccumulator uni;
    uni.add_clip(mask({0, 0.9, 0, 0, 0, 0, 0, 0}, {1, 2, 2, 2}),
                 mask({1, 0, 0, 0, 0, 0, 0, 0}, {1, 2, 2, 2}), valid1);
    CHECK(uni.m_j() == 1.0);
  }
}

TEST_CASE("full-model gradients match finite differences") {
  ModelConfig cfg = tiny_config();
  ParamStore ps;
  Rng rng(61);
  init_model_params(ps, cfg, rng, Dtype::F64);
  Rng data(62);
  const Tensor clip = data.uniform_tensor({2, 32, 32, 3}, 0, 1, Dtype::F64);
  const Tensor audio = data.normal_tensor({2, kAudioDim}, 0, 1, Dtype::F64);
  Tensor targets = Tensor::zeros({2, 32, 32, 1}, Dtype::F64);
  for (i64 i = 0; i < targets.numel(); ++i) {
    targets.set_scalar(i, data.uniform() < 0.3 ? 1.0 : 0.0);
  }
  const Tensor valid = Tensor::full({2}, 1.0, Dtype::F64);

  auto build = [&](Tape& t, ParamStore& s) {
    ops::ModelOutput out = ops::model_forward(t, s, cfg, clip, audio);
    return ops::segmentation_loss(t, out.logits, targets, valid, false);
  };
  FdReport rep = check_grads(
      ps,
      {"stem.patch.w", "stem.audio.w", "stem.merge2.w",
       "mte.layer0.vss.w_in", "mte.layer0.vss.dir0.ssm.A_log",
       "mte.layer0.tm.dir1.ssm.W_dt", "mad.layer0.frame.a_w",
       "mad.layer0.frame.dir0.ssm.W_B", "mad.layer0.temporal.v_conv",
       "cip.scale1.tm.dir0.ssm.A_log", "cip.scale2.a2v.dir2.ssm.W_C",
       "cip.scale3.tm.w_in", "cip.scale4.a2v.gate.w_out", "head.mlp1.w",
       "head.fc.w"},
      build);
  INFO(rep.summary());
  CHECK(rep.coords_checked >= 50);
  CHECK(rep.ok());
}

TEST_CASE("encoder depth changes the output under fixed weights") {
  ModelConfig two = tiny_config();
  two.encoder_layers = 2;
  ParamStore ps;
  Rng rng(71);
  init_model_params(ps, two, rng);
  Rng data(72);
  Tensor clip = data.uniform_tensor({2, 32, 32, 3}, 0, 1, Dtype::F32);
  Tensor audio = data.normal_tensor({2, kAudioDim}, 0, 1, Dtype::F32);

  Tape ta(Dtype::F32);
  Tensor deep = ta.val(ops::model_forward(ta, ps, two, clip, audio).logits);
  ModelConfig one = two;
  one.encoder_layers = 1;
  Tape tb(Dtype::F32);
  Tensor shallow =
      tb.val(ops::model_forward(tb, ps, one, clip, audio).logits);
  CHECK_FALSE(deep.bitwise_equal(shallow));
}

TEST_CASE("optimizer steps are deterministic and reduce a quadratic") {
  ParamStore ps;
  Rng rng(81);
  ps.add("w", rng.normal_tensor({8}, 0, 1, Dtype::F32));
  const Tensor target = Rng(82).normal_tensor({8}, 0, 1, Dtype::F32);
  AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;

  auto run = [&](ParamStore& store) {
    AdamW opt(store, cfg);
    double last = 0;
    for (int s = 0; s < 200; ++s) {
      store.zero_grad();
      Tape t(Dtype::F32);
      Var diff = ops::sub(t, t.param(store.at("w")), t.constant(target));
      Var loss = ops::sum_all(t, ops::mul(t, diff, diff));
      last = t.val(loss).item();
      t.backward(loss);
      opt.step();
    }
    return last;
  };
  double first = run(ps);
  CHECK(first < 1e-3);

  ParamStore ps2;
  Rng rng2(81);
  ps2.add("w", rng2.normal_tensor({8}, 0, 1, Dtype::F32));
  double second = run(ps2);
  CHECK(first == second);
  CHECK(ps.at("w").value.bitwise_equal(ps2.at("w").value));
}
