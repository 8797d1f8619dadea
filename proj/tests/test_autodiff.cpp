#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "ssmavs/checkpoint.hpp"
#include "ssmavs/gradcheck.hpp"
#include "ssmavs/ops.hpp"
#include "ssmavs/rng.hpp"
#include "ssmavs/tape.hpp"

using namespace ssmavs;

namespace {

using Builder = std::function<Var(Tape&, ParamStore&)>;

double eval_loss(ParamStore& ps, const Builder& build) {
  Tape t(Dtype::F64);
  Var loss = build(t, ps);
  return t.val(loss).item();
}

// Backpropagates once from the store's current values, then verifies the
// named parameters against central finite differences.
FdReport check_grads(ParamStore& ps, const std::vector<std::string>& names,
                     const Builder& build, u64 seed = 99,
                     i64 coords_per_param = 10) {
  ps.zero_grad();
  Tape t(Dtype::F64);
  Var loss = build(t, ps);
  t.backward(loss);
  Rng rng(seed);
  return fd_check_params(
      ps, names, [&] { return eval_loss(ps, build); }, coords_per_param,
      rng);
}

// Scalarizes an op output with fixed random weights so every output
// coordinate influences the loss.
Var weighted_sum(Tape& t, Var x, const Tensor& weights) {
  return ops::sum_all(t, ops::mul_const(t, x, weights));
}

}  // namespace

TEST_CASE("linear examples") {
  Tape t(Dtype::F32);
  Var x = t.input(Tensor::from_f32({2, 2}, {1, 2, 3, 4}));
  Var eye = t.input(Tensor::from_f32({2, 2}, {1, 0, 0, 1}));
  Var zb = t.input(Tensor::from_f32({2}, {0, 0}));
  CHECK(t.val(ops::linear(t, x, eye, zb)).bitwise_equal(t.val(x)));

  Var v = t.input(Tensor::from_f32({2}, {1, 2}));
  Var w = t.input(Tensor::from_f32({2, 1}, {1, 1}));
  Var b = t.input(Tensor::from_f32({1}, {0.5f}));
  CHECK(t.val(ops::linear(t, v, w, b)).scalar_at(0) ==
        doctest::Approx(3.5).epsilon(1e-7));

  Var bad = t.input(Tensor::from_f32({3}, {1, 2, 3}));
  CHECK_THROWS_AS(ops::linear(t, bad, w, b), Error);
}

TEST_CASE("linear matches naive matmul oracle") {
  Rng rng(5);
  Tensor x = rng.normal_tensor({3, 4, 6}, 0, 1, Dtype::F64);
  Tensor w = rng.normal_tensor({6, 5}, 0, 1, Dtype::F64);
  Tensor b = rng.normal_tensor({5}, 0, 1, Dtype::F64);
  Tape t(Dtype::F64);
  Tensor y = t.val(ops::linear(t, t.input(x), t.input(w), t.input(b)));
  REQUIRE(y.shape() == Shape{3, 4, 5});
  for (i64 r = 0; r < 12; ++r) {
    for (i64 o = 0; o < 5; ++o) {
      double acc = b.scalar_at(o);
      for (i64 i = 0; i < 6; ++i) {
        acc += x.scalar_at(r * 6 + i) * w.scalar_at(i * 5 + o);
      }
      CHECK(y.scalar_at(r * 5 + o) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm examples and oracle") {
  Tape t(Dtype::F64);
  Var gamma = t.input(Tensor::from_f64({4}, {1, 1, 1, 1}));
  Var beta = t.input(Tensor::from_f64({4}, {0, 0, 0, 0}));

  Var konst = t.input(Tensor::full({2, 4}, 3.25, Dtype::F64));
  Tensor yk = t.val(ops::layer_norm(t, konst, gamma, beta));
  for (i64 i = 0; i < 8; ++i) CHECK(yk.scalar_at(i) == 0.0);

  Var two = t.input(Tensor::from_f64({1, 2}, {1, -1}));
  Var g2 = t.input(Tensor::from_f64({2}, {1, 1}));
  Var b2 = t.input(Tensor::from_f64({2}, {0, 0}));
  Tensor y2 = t.val(ops::layer_norm(t, two, g2, b2, 1e-12));
  CHECK(y2.scalar_at(0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y2.scalar_at(1) == doctest::Approx(-1.0).epsilon(1e-6));

  Rng rng(8);
  Tensor x = rng.normal_tensor({5, 7}, 1.5, 2.0, Dtype::F64);
  Tensor gam = rng.normal_tensor({7}, 0, 1, Dtype::F64);
  Tensor bet = rng.normal_tensor({7}, 0, 1, Dtype::F64);
  const double eps = 1e-5;
  Tensor y = t.val(ops::layer_norm(t, t.input(x), t.input(gam),
                                   t.input(bet), eps));
  for (i64 r = 0; r < 5; ++r) {
    double mean = 0;
    for (i64 j = 0; j < 7; ++j) mean += x.scalar_at(r * 7 + j);
    mean /= 7;
    double var = 0;
    for (i64 j = 0; j < 7; ++j) {
      const double d = x.scalar_at(r * 7 + j) - mean;
      var += d * d;
    }
    var /= 7;
    for (i64 j = 0; j < 7; ++j) {
      const double want = gam.scalar_at(j) *
                              ((x.scalar_at(r * 7 + j) - mean) /
                               std::sqrt(var + eps)) +
                          bet.scalar_at(j);
      CHECK(y.scalar_at(r * 7 + j) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  Var empty = t.input(Tensor::zeros({3, 0}, Dtype::F64));
  Var g0 = t.input(Tensor::zeros({0}, Dtype::F64));
  CHECK_THROWS_AS(ops::layer_norm(t, empty, g0, g0), Error);
}

TEST_CASE("silu examples") {
  Tape t(Dtype::F64);
  Var x = t.input(Tensor::from_f64({3}, {0.0, -20.0, 30.0}));
  Tensor y = t.val(ops::silu(t, x));
  CHECK(y.scalar_at(0) == 0.0);
  CHECK(std::abs(y.scalar_at(1)) < 1e-7);
  CHECK(y.scalar_at(2) == doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("silu gradient at zero is one half") {
  ParamStore ps;
  ps.add("x", Tensor::from_f64({1}, {0.0}));
  Builder build = [](Tape& t, ParamStore& s) {
    return ops::sum_all(t, ops::silu(t, t.param(s.at("x"))));
  };
  ps.zero_grad();
  Tape t(Dtype::F64);
  Var loss = build(t, ps);
  t.backward(loss);
  CHECK(ps.at("x").grad.scalar_at(0) == doctest::Approx(0.5).epsilon(1e-12));

  FdReport rep = check_grads(ps, {"x"}, build, 42, 4);
  CHECK(rep.ok());
}

TEST_CASE("causal_conv1d examples") {
  Tape t(Dtype::F64);
  Var x = t.input(Tensor::from_f64({4, 2}, {1, 10, 2, 20, 3, 30, 4, 40}));
  Var k1 = t.input(Tensor::from_f64({1, 2}, {1, 1}));
  CHECK(t.val(ops::causal_conv1d(t, x, k1)).bitwise_equal(t.val(x)));

  // K=2, kernel [a,b] per channel: y = [b*x0, a*x0 + b*x1, ...].
  const double a = 0.7, b = -1.3;
  Var v = t.input(Tensor::from_f64({2, 1}, {2.0, 5.0}));
  Var k2 = t.input(Tensor::from_f64({2, 1}, {a, b}));
  Tensor y = t.val(ops::causal_conv1d(t, v, k2));
  CHECK(y.scalar_at(0) == doctest::Approx(b * 2.0).epsilon(1e-12));
  CHECK(y.scalar_at(1) == doctest::Approx(a * 2.0 + b * 5.0).epsilon(1e-12));
}

TEST_CASE("causal_conv1d is causal bitwise") {
  Rng rng(13);
  Tensor x = rng.normal_tensor({8, 3}, 0, 1, Dtype::F32);
  Tensor k = rng.normal_tensor({3, 3}, 0, 1, Dtype::F32);
  Tape t1(Dtype::F32);
  Tensor y1 = t1.val(ops::causal_conv1d(t1, t1.input(x), t1.input(k)));

  Tensor x2 = x.clone();
  const i64 t_perturb = 5;
  for (i64 c = 0; c < 3; ++c) {
    x2.set_scalar(t_perturb * 3 + c, 99.0 + c);
  }
  Tape t2(Dtype::F32);
  Tensor y2 = t2.val(ops::causal_conv1d(t2, t2.input(x2), t2.input(k)));
  for (i64 tt = 0; tt < t_perturb; ++tt) {
    for (i64 c = 0; c < 3; ++c) {
      CHECK(y1.scalar_at(tt * 3 + c) == y2.scalar_at(tt * 3 + c));
    }
  }
  bool later_changed = false;
  for (i64 tt = t_perturb; tt < 8; ++tt) {
    for (i64 c = 0; c < 3; ++c) {
      if (y1.scalar_at(tt * 3 + c) != y2.scalar_at(tt * 3 + c)) {
        later_changed = true;
      }
    }
  }
  CHECK(later_changed);
}

TEST_CASE("depthwise conv2d and conv3d examples") {
  Tape t(Dtype::F64);
  Rng rng(21);
  Tensor x = rng.normal_tensor({2, 4, 5, 3}, 0, 1, Dtype::F64);

  Tensor delta2 = Tensor::zeros({3, 3, 3}, Dtype::F64);
  for (i64 c = 0; c < 3; ++c) delta2.set_scalar((1 * 3 + 1) * 3 + c, 1.0);
  CHECK(t.val(ops::depthwise_conv2d(t, t.input(x), t.input(delta2)))
            .bitwise_equal(x));

  Tensor delta3 = Tensor::zeros({3, 3, 3, 3}, Dtype::F64);
  for (i64 c = 0; c < 3; ++c) {
    delta3.set_scalar(((1 * 3 + 1) * 3 + 1) * 3 + c, 1.0);
  }
  CHECK(t.val(ops::depthwise_conv3d(t, t.input(x), t.input(delta3)))
            .bitwise_equal(x));

  Tensor konst = Tensor::full({1, 5, 5, 1}, 2.0, Dtype::F64);
  Tensor ones = Tensor::full({3, 3, 1}, 1.0, Dtype::F64);
  Tensor y = t.val(ops::depthwise_conv2d(t, t.input(konst), t.input(ones)));
  CHECK(y.scalar_at(1 * 5 + 1) == doctest::Approx(18.0));  // interior: 9c
  CHECK(y.scalar_at(2 * 5 + 2) == doctest::Approx(18.0));
  CHECK(y.scalar_at(0) == doctest::Approx(8.0));  // corner: 4 taps

  Tensor even = Tensor::zeros({2, 2, 3}, Dtype::F64);
  CHECK_THROWS_AS(ops::depthwise_conv2d(t, t.input(x), t.input(even)), Error);
}

TEST_CASE("depthwise conv2d matches brute-force oracle") {
  Rng rng(31);
  Tensor x = rng.normal_tensor({2, 5, 6, 2}, 0, 1, Dtype::F64);
  Tensor k = rng.normal_tensor({3, 5, 2}, 0, 1, Dtype::F64);
  Tensor b = rng.normal_tensor({2}, 0, 1, Dtype::F64);
  Tape t(Dtype::F64);
  Tensor y =
      t.val(ops::depthwise_conv2d(t, t.input(x), t.input(k), t.input(b)));
  auto xat = [&](i64 tt, i64 i, i64 j, i64 c) {
    if (i < 0 || i >= 5 || j < 0 || j >= 6) return 0.0;
    return x.scalar_at(((tt * 5 + i) * 6 + j) * 2 + c);
  };
  for (i64 tt = 0; tt < 2; ++tt) {
    for (i64 i = 0; i < 5; ++i) {
      for (i64 j = 0; j < 6; ++j) {
        for (i64 c = 0; c < 2; ++c) {
          double acc = b.scalar_at(c);
          for (i64 p = 0; p < 3; ++p) {
            for (i64 q = 0; q < 5; ++q) {
              acc += k.scalar_at((p * 5 + q) * 2 + c) *
                     xat(tt, i + p - 1, j + q - 2, c);
            }
          }
          CHECK(y.scalar_at(((tt * 5 + i) * 6 + j) * 2 + c) ==
                doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("backward basics") {
  ParamStore ps;
  Rng rng(17);
  ps.add("p", rng.normal_tensor({3, 4}, 0, 1, Dtype::F64));

  // loss = sum(p) -> gradient of ones
  ps.zero_grad();
  {
    Tape t(Dtype::F64);
    Var loss = ops::sum_all(t, t.param(ps.at("p")));
    t.backward(loss);
  }
  for (i64 i = 0; i < 12; ++i) CHECK(ps.at("p").grad.scalar_at(i) == 1.0);

  // loss = sum(p^2)/2 -> gradient equals p
  ps.zero_grad();
  {
    Tape t(Dtype::F64);
    Var p = t.param(ps.at("p"));
    Var loss = ops::scale(t, ops::sum_all(t, ops::mul(t, p, p)), 0.5);
    t.backward(loss);
  }
  for (i64 i = 0; i < 12; ++i) {
    CHECK(ps.at("p").grad.scalar_at(i) ==
          doctest::Approx(ps.at("p").value.scalar_at(i)).epsilon(1e-12));
  }

  // non-scalar loss rejected
  Tape t(Dtype::F64);
  Var p = t.param(ps.at("p"));
  CHECK_THROWS_AS(t.backward(p), Error);
}

TEST_CASE("two backward passes accumulate exactly 2x") {
  ParamStore ps;
  Rng rng(23);
  ps.add("p", rng.normal_tensor({4, 4}, 0, 1, Dtype::F32));
  ps.zero_grad();
  Tape t(Dtype::F32);
  Var p = t.param(ps.at("p"));
  Var loss = ops::sum_all(t, ops::silu(t, ops::mul(t, p, p)));
  t.backward(loss);
  Tensor once = ps.at("p").grad.clone();
  t.backward(loss);
  for (i64 i = 0; i < 16; ++i) {
    CHECK(ps.at("p").grad.scalar_at(i) == 2.0 * once.scalar_at(i));
  }
}

TEST_CASE("gradient of independent subgraphs is additive") {
  ParamStore ps;
  Rng rng(29);
  ps.add("a", rng.normal_tensor({3}, 0, 1, Dtype::F64));
  ps.add("b", rng.normal_tensor({3}, 0, 1, Dtype::F64));

  ps.zero_grad();
  {
    Tape t(Dtype::F64);
    Var a = t.param(ps.at("a"));
    Var loss = ops::sum_all(t, ops::mul(t, a, a));
    t.backward(loss);
  }
  Tensor ga = ps.at("a").grad.clone();

  ps.zero_grad();
  {
    Tape t(Dtype::F64);
    Var b = t.param(ps.at("b"));
    Var loss = ops::sum_all(t, ops::silu(t, b));
    t.backward(loss);
  }
  Tensor gb = ps.at("b").grad.clone();

  ps.zero_grad();
  {
    Tape t(Dtype::F64);
    Var a = t.param(ps.at("a"));
    Var b = t.param(ps.at("b"));
    Var loss = ops::add(t, ops::sum_all(t, ops::mul(t, a, a)),
                        ops::sum_all(t, ops::silu(t, b)));
    t.backward(loss);
  }
  for (i64 i = 0; i < 3; ++i) {
    CHECK(ps.at("a").grad.scalar_at(i) ==
          doctest::Approx(ga.scalar_at(i)).epsilon(1e-14));
    CHECK(ps.at("b").grad.scalar_at(i) ==
          doctest::Approx(gb.scalar_at(i)).epsilon(1e-14));
  }
}

TEST_CASE("finite differences validate every op") {
  Rng init(1234);
  Rng wrng(4321);

  auto run = [&](const std::string& label, ParamStore& ps,
                 const std::vector<std::string>& names,
                 const Builder& build) {
    FdReport rep = check_grads(ps, names, build);
    INFO(label << ": " << rep.summary());
    CHECK(rep.ok());
    CHECK(rep.coords_checked >= static_cast<i64>(names.size()) * 10);
  };

  SUBCASE("elementwise binary") {
    ParamStore ps;
    ps.add("a", init.normal_tensor({3, 4}, 0, 1, Dtype::F64));
    ps.add("b", init.uniform_tensor({3, 4}, 0.5, 1.5, Dtype::F64));
    Tensor w = wrng.normal_tensor({3, 4}, 0, 1, Dtype::F64);
    run("add", ps, {"a", "b"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::add(t, t.param(s.at("a")), t.param(s.at("b"))), w);
    });
    run("sub", ps, {"a", "b"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::sub(t, t.param(s.at("a")), t.param(s.at("b"))), w);
    });
    run("mul", ps, {"a", "b"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::mul(t, t.param(s.at("a")), t.param(s.at("b"))), w);
    });
    run("div", ps, {"a", "b"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::div(t, t.param(s.at("a")), t.param(s.at("b"))), w);
    });
  }

  SUBCASE("bias, scaling, masking") {
    ParamStore ps;
    ps.add("x", init.normal_tensor({2, 3, 4}, 0, 1, Dtype::F64));
    ps.add("b", init.normal_tensor({4}, 0, 1, Dtype::F64));
    Tensor w = wrng.normal_tensor({2, 3, 4}, 0, 1, Dtype::F64);
    Tensor mask = wrng.uniform_tensor({4}, -1, 1, Dtype::F64);
    run("add_bias", ps, {"x", "b"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::add_bias(t, t.param(s.at("x")), t.param(s.at("b"))), w);
    });
    run("mul_const+scale+add_scalar", ps, {"x"},
        [&](Tape& t, ParamStore& s) {
          Var y = ops::mul_const(t, t.param(s.at("x")), mask);
          y = ops::scale(t, y, -1.7);
          y = ops::add_scalar(t, y, 0.3);
          return weighted_sum(t, y, w);
        });
  }

  SUBCASE("linear and layer_norm") {
    ParamStore ps;
    ps.add("x", init.normal_tensor({3, 5}, 0, 1, Dtype::F64));
    ps.add("w", init.normal_tensor({5, 4}, 0, 0.7, Dtype::F64));
    ps.add("b", init.normal_tensor({4}, 0, 0.5, Dtype::F64));
    ps.add("gamma", init.uniform_tensor({4}, 0.5, 1.5, Dtype::F64));
    ps.add("beta", init.normal_tensor({4}, 0, 0.3, Dtype::F64));
    Tensor w = wrng.normal_tensor({3, 4}, 0, 1, Dtype::F64);
    run("linear+layer_norm", ps, {"x", "w", "b", "gamma", "beta"},
        [&](Tape& t, ParamStore& s) {
          Var y = ops::linear(t, t.param(s.at("x")), t.param(s.at("w")),
                              t.param(s.at("b")));
          y = ops::layer_norm(t, y, t.param(s.at("gamma")),
                              t.param(s.at("beta")));
          return weighted_sum(t, y, w);
        });
  }

  SUBCASE("activations") {
    ParamStore ps;
    ps.add("x", init.normal_tensor({4, 3}, 0, 2, Dtype::F64));
    Tensor w = wrng.normal_tensor({4, 3}, 0, 1, Dtype::F64);
    run("silu", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::silu(t, t.param(s.at("x"))), w);
    });
    run("sigmoid", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::sigmoid(t, t.param(s.at("x"))), w);
    });
    run("softplus", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::softplus(t, t.param(s.at("x"))), w);
    });
  }

  SUBCASE("convolutions") {
    ParamStore ps;
    ps.add("x1", init.normal_tensor({6, 3}, 0, 1, Dtype::F64));
    ps.add("k1", init.normal_tensor({3, 3}, 0, 1, Dtype::F64));
    ps.add("b1", init.normal_tensor({3}, 0, 1, Dtype::F64));
    Tensor w1 = wrng.normal_tensor({6, 3}, 0, 1, Dtype::F64);
    run("causal_conv1d", ps, {"x1", "k1", "b1"},
        [&](Tape& t, ParamStore& s) {
          return weighted_sum(
              t,
              ops::causal_conv1d(t, t.param(s.at("x1")),
                                 t.param(s.at("k1")), t.param(s.at("b1"))),
              w1);
        });

    ps.add("x2", init.normal_tensor({2, 4, 5, 2}, 0, 1, Dtype::F64));
    ps.add("k2", init.normal_tensor({3, 3, 2}, 0, 1, Dtype::F64));
    ps.add("b2", init.normal_tensor({2}, 0, 1, Dtype::F64));
    Tensor w2 = wrng.normal_tensor({2, 4, 5, 2}, 0, 1, Dtype::F64);
    run("depthwise_conv2d", ps, {"x2", "k2", "b2"},
        [&](Tape& t, ParamStore& s) {
          return weighted_sum(
              t,
              ops::depthwise_conv2d(t, t.param(s.at("x2")),
                                    t.param(s.at("k2")),
                                    t.param(s.at("b2"))),
              w2);
        });

    ps.add("x3", init.normal_tensor({3, 4, 4, 2}, 0, 1, Dtype::F64));
    ps.add("k3", init.normal_tensor({3, 3, 3, 2}, 0, 1, Dtype::F64));
    ps.add("b3", init.normal_tensor({2}, 0, 1, Dtype::F64));
    Tensor w3 = wrng.normal_tensor({3, 4, 4, 2}, 0, 1, Dtype::F64);
    run("depthwise_conv3d", ps, {"x3", "k3", "b3"},
        [&](Tape& t, ParamStore& s) {
          return weighted_sum(
              t,
              ops::depthwise_conv3d(t, t.param(s.at("x3")),
                                    t.param(s.at("k3")),
                                    t.param(s.at("b3"))),
              w3);
        });
  }

  SUBCASE("index and shape ops") {
    ParamStore ps;
    ps.add("x", init.normal_tensor({5, 3}, 0, 1, Dtype::F64));
    Tensor w = wrng.normal_tensor({5, 3}, 0, 1, Dtype::F64);
    run("reshape+permute+reverse", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      Var y = ops::reshape(t, t.param(s.at("x")), {3, 5});
      y = ops::permute(t, y, {1, 0});
      y = ops::reverse_axis(t, y, 0);
      return weighted_sum(t, y, w);
    });

    auto idx = std::make_shared<std::vector<i64>>(
        std::vector<i64>{4, 0, 2, 2, 1, 0});
    Tensor wg = wrng.normal_tensor({6, 3}, 0, 1, Dtype::F64);
    run("gather_rows with repeats", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::gather_rows(t, t.param(s.at("x")), idx),
                          wg);
    });

    Tensor ws = wrng.normal_tensor({2, 3}, 0, 1, Dtype::F64);
    run("slice_rows", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::slice_rows(t, t.param(s.at("x")), 1, 2),
                          ws);
    });

    ps.add("y", init.normal_tensor({2, 3}, 0, 1, Dtype::F64));
    Tensor wc = wrng.normal_tensor({7, 3}, 0, 1, Dtype::F64);
    run("concat_rows", ps, {"x", "y"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::concat_rows(t, t.param(s.at("x")), t.param(s.at("y"))),
          wc);
    });

    ps.add("z", init.normal_tensor({5, 2}, 0, 1, Dtype::F64));
    Tensor wcc = wrng.normal_tensor({5, 5}, 0, 1, Dtype::F64);
    run("concat_cols", ps, {"x", "z"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::concat_cols(t, t.param(s.at("x")), t.param(s.at("z"))),
          wcc);
    });
  }

  SUBCASE("reductions and composites") {
    ParamStore ps;
    ps.add("x", init.normal_tensor({2, 3, 4}, 0, 1, Dtype::F64));
    Tensor w = wrng.normal_tensor({2}, 0, 1, Dtype::F64);
    run("reduce_trailing", ps, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::reduce_trailing(t, t.param(s.at("x")), 1),
                          w);
    });

    ParamStore fd;
    fd.add("feat", init.normal_tensor({2, 3, 3, 4}, 0, 1, Dtype::F64));
    fd.add("q", init.normal_tensor({2, 4}, 0, 1, Dtype::F64));
    Tensor wf = wrng.normal_tensor({2, 3, 3, 1}, 0, 1, Dtype::F64);
    run("frame_dot", fd, {"feat", "q"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(
          t, ops::frame_dot(t, t.param(s.at("feat")), t.param(s.at("q"))),
          wf);
    });

    ParamStore up;
    up.add("x", init.normal_tensor({2, 3, 4, 2}, 0, 1, Dtype::F64));
    Tensor wu = wrng.normal_tensor({2, 6, 8, 2}, 0, 1, Dtype::F64);
    run("bilinear_up2", up, {"x"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::bilinear_up2(t, t.param(s.at("x"))), wu);
    });

    ParamStore bc;
    bc.add("z", init.normal_tensor({3, 4}, 0, 2, Dtype::F64));
    Tensor target = wrng.uniform_tensor({3, 4}, 0, 1, Dtype::F64);
    Tensor wb = wrng.normal_tensor({3, 4}, 0, 1, Dtype::F64);
    run("bce_with_logits", bc, {"z"}, [&](Tape& t, ParamStore& s) {
      return weighted_sum(t, ops::bce_with_logits(t, t.param(s.at("z")),
                                                  target),
                          wb);
    });
  }
}

TEST_CASE("bce at logit zero with target one equals ln 2") {
  Tape t(Dtype::F64);
  Var z = t.input(Tensor::from_f64({1}, {0.0}));
  Tensor target = Tensor::from_f64({1}, {1.0});
  Tensor y = t.val(ops::bce_with_logits(t, z, target));
  CHECK(y.scalar_at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("op outputs surface non-finite values") {
  Tape t(Dtype::F64);
  Var a = t.input(Tensor::from_f64({2}, {1.0, 1.0}));
  Var b = t.input(Tensor::from_f64({2}, {1.0, 0.0}));
  CHECK_THROWS_AS(ops::div(t, a, b), Error);
}

TEST_CASE("checkpoint round trip and validation") {
  const std::string dir = "./ckpt_test_dir";
  std::filesystem::remove_all(dir);

  ParamStore ps;
  Rng rng(55);
  ps.add("enc.layer0.w", rng.normal_tensor({4, 3}, 0, 1, Dtype::F32));
  ps.add("enc.layer0.b", rng.normal_tensor({3}, 0, 1, Dtype::F32));
  ps.add("head.w", rng.normal_tensor({3, 2}, 0, 1, Dtype::F32));
  save_checkpoint(ps, dir);

  Tensor w0 = ps.at("enc.layer0.w").value.clone();
  ps.at("enc.layer0.w").value = Tensor::zeros({4, 3}, Dtype::F32);
  load_checkpoint(ps, dir);
  CHECK(ps.at("enc.layer0.w").value.bitwise_equal(w0));

  // manifest is sorted by parameter name
  std::ifstream mf(dir + "/manifest.txt");
  std::string l1, l2, l3;
  std::getline(mf, l1);
  std::getline(mf, l2);
  std::getline(mf, l3);
  CHECK(l1 == "enc.layer0.b\tenc.layer0.b.nst");
  CHECK(l2 == "enc.layer0.w\tenc.layer0.w.nst");
  CHECK(l3 == "head.w\thead.w.nst");

  ParamStore extra;
  extra.add("enc.layer0.w", Tensor::zeros({4, 3}, Dtype::F32));
  extra.add("enc.layer0.b", Tensor::zeros({3}, Dtype::F32));
  extra.add("head.w", Tensor::zeros({3, 2}, Dtype::F32));
  extra.add("not.in.manifest", Tensor::zeros({1}, Dtype::F32));
  CHECK_THROWS_AS(load_checkpoint(extra, dir), Error);

  ParamStore wrong;
  wrong.add("enc.layer0.w", Tensor::zeros({4, 3}, Dtype::F32));
  wrong.add("enc.layer0.b", Tensor::zeros({9}, Dtype::F32));
  wrong.add("head.w", Tensor::zeros({3, 2}, Dtype::F32));
  CHECK_THROWS_AS(load_checkpoint(wrong, dir), Error);

  std::filesystem::remove_all(dir);
}
