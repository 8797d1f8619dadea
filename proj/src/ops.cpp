#include "ssmavs/ops.hpp"

#include <cmath>
#include <cstring>

namespace ssmavs::ops {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  check(a.shape() == b.shape(),
        std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()) + " differ");
}

// Extent product check for suffix broadcasting: small.shape must equal the
// trailing axes of big.shape.
void check_suffix(const Tensor& big, const Tensor& small, const char* what) {
  const auto& bs = big.shape();
  const auto& ss = small.shape();
  check(ss.size() <= bs.size() &&
            std::equal(ss.rbegin(), ss.rend(), bs.rbegin()),
        std::string(what) + ": " + shape_str(ss) +
            " is not a trailing suffix of " + shape_str(bs));
}

template <typename T, typename F>
Tensor ew_unary(const Tensor& x, F f) {
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  const T* px = x.data<T>();
  T* po = out.mut<T>();
  for (i64 i = 0; i < x.numel(); ++i) po[i] = f(px[i]);
  return out;
}

template <typename T, typename F>
Tensor ew_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  T* po = out.mut<T>();
  for (i64 i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  check_same_shape(va, vb, "add");
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_binary<T>(va, vb, [](T x, T y) { return x + y; });
  });
  out.ensure_finite("add");
  return t.emit(std::move(out), {a.idx, b.idx}, [a, b](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    tp.accum_grad(a.idx, g);
    tp.accum_grad(b.idx, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  check_same_shape(va, vb, "sub");
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_binary<T>(va, vb, [](T x, T y) { return x - y; });
  });
  out.ensure_finite("sub");
  return t.emit(std::move(out), {a.idx, b.idx}, [a, b](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    tp.accum_grad(a.idx, g);
    Tensor ng = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      return ew_unary<T>(g, [](T x) { return -x; });
    });
    tp.accum_grad(b.idx, ng);
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  check_same_shape(va, vb, "mul");
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_binary<T>(va, vb, [](T x, T y) { return x * y; });
  });
  out.ensure_finite("mul");
  return t.emit(std::move(out), {a.idx, b.idx},
                [a, b, va, vb](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    tp.accum_grad(a.idx, ew_binary<T>(g, vb, [](T x, T y) {
                                    return x * y;
                                  }));
                    tp.accum_grad(b.idx, ew_binary<T>(g, va, [](T x, T y) {
                                    return x * y;
                                  }));
                  });
                });
}

Var div(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  check_same_shape(va, vb, "div");
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_binary<T>(va, vb, [](T x, T y) { return x / y; });
  });
  out.ensure_finite("div");
  return t.emit(std::move(out), {a.idx, b.idx},
                [a, b, va, vb](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    const T* pg = g.data<T>();
                    const T* pa = va.data<T>();
                    const T* pb = vb.data<T>();
                    Tensor da = Tensor::empty(va.shape(), va.dtype());
                    Tensor db = Tensor::empty(vb.shape(), vb.dtype());
                    T* pda = da.mut<T>();
                    T* pdb = db.mut<T>();
                    for (i64 i = 0; i < g.numel(); ++i) {
                      pda[i] = pg[i] / pb[i];
                      pdb[i] = -pg[i] * pa[i] / (pb[i] * pb[i]);
                    }
                    tp.accum_grad(a.idx, da);
                    tp.accum_grad(b.idx, db);
                  });
                });
}

Var add_bias(Tape& t, Var x, Var b) {
  const Tensor& vx = t.val(x);
  const Tensor& vb = t.val(b);
  check_suffix(vx, vb, "add_bias");
  const i64 inner = vb.numel();
  Tensor out = Tensor::empty(vx.shape(), vx.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    const T* pb = vb.data<T>();
    T* po = out.mut<T>();
    for (i64 i = 0; i < vx.numel(); ++i) po[i] = px[i] + pb[i % inner];
  });
  out.ensure_finite("add_bias");
  return t.emit(std::move(out), {x.idx, b.idx},
                [x, b, inner, bshape = vb.shape()](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  tp.accum_grad(x.idx, g);
                  Tensor db = Tensor::zeros(bshape, g.dtype());
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    const T* pg = g.data<T>();
                    T* pd = db.mut<T>();
                    for (i64 i = 0; i < g.numel(); ++i) {
                      pd[i % inner] += pg[i];
                    }
                  });
                  tp.accum_grad(b.idx, db);
                });
}

Var mul_const(Tape& t, Var x, const Tensor& c) {
  const Tensor& vx = t.val(x);
  Tensor cc = c.dtype() == t.dtype() ? c : c.astype(t.dtype());
  check_suffix(vx, cc, "mul_const");
  const i64 inner = cc.numel();
  Tensor out = Tensor::empty(vx.shape(), vx.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    const T* pc = cc.data<T>();
    T* po = out.mut<T>();
    for (i64 i = 0; i < vx.numel(); ++i) po[i] = px[i] * pc[i % inner];
  });
  out.ensure_finite("mul_const");
  return t.emit(std::move(out), {x.idx}, [x, cc, inner](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    Tensor dx = Tensor::empty(g.shape(), g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* pg = g.data<T>();
      const T* pc = cc.data<T>();
      T* pd = dx.mut<T>();
      for (i64 i = 0; i < g.numel(); ++i) pd[i] = pg[i] * pc[i % inner];
    });
    tp.accum_grad(x.idx, dx);
  });
}

Var scale(Tape& t, Var x, double c) {
  const Tensor& vx = t.val(x);
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_unary<T>(vx, [c](T v) { return static_cast<T>(v * c); });
  });
  out.ensure_finite("scale");
  return t.emit(std::move(out), {x.idx}, [x, c](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    Tensor dx = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      return ew_unary<T>(g, [c](T v) { return static_cast<T>(v * c); });
    });
    tp.accum_grad(x.idx, dx);
  });
}

Var add_scalar(Tape& t, Var x, double c) {
  const Tensor& vx = t.val(x);
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_unary<T>(vx, [c](T v) { return static_cast<T>(v + c); });
  });
  out.ensure_finite("add_scalar");
  return t.emit(std::move(out), {x.idx}, [x](Tape& tp, i64 self) {
    tp.accum_grad(x.idx, tp.grad_of(self));
  });
}

Var linear(Tape& t, Var x, Var w, Var b) {
  const Tensor& vx = t.val(x);
  const Tensor& vw = t.val(w);
  check(vx.rank() >= 1, "linear: input must have a trailing feature axis");
  check(vw.rank() == 2, "linear: weight must be [Din,Dout]");
  const i64 din = vx.dim(vx.rank() - 1);
  check(vw.dim(0) == din, "linear: input features " + std::to_string(din) +
                              " vs weight rows " + std::to_string(vw.dim(0)));
  const i64 dout = vw.dim(1);
  const i64 rows = din > 0 ? vx.numel() / din : 0;
  Shape out_shape = vx.shape();
  out_shape.back() = dout;

  const Tensor* vb = nullptr;
  if (b.defined()) {
    vb = &t.val(b);
    check(vb->rank() == 1 && vb->dim(0) == dout,
          "linear: bias must be [Dout]");
  }

  Tensor out = Tensor::empty(out_shape, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* __restrict px = vx.data<T>();
    const T* __restrict pw = vw.data<T>();
    const T* pb = vb != nullptr ? vb->data<T>() : nullptr;
    T* __restrict po = out.mut<T>();
    for (i64 r = 0; r < rows; ++r) {
      T* __restrict orow = po + r * dout;
      if (pb != nullptr) {
        std::memcpy(orow, pb, dout * sizeof(T));
      } else {
        std::memset(orow, 0, dout * sizeof(T));
      }
      const T* xrow = px + r * din;
      for (i64 i = 0; i < din; ++i) {
        const T xv = xrow[i];
        const T* __restrict wrow = pw + i * dout;
        for (i64 o = 0; o < dout; ++o) orow[o] += xv * wrow[o];
      }
    }
  });
  out.ensure_finite("linear");

  std::vector<i64> parents = {x.idx, w.idx};
  if (b.defined()) parents.push_back(b.idx);
  return t.emit(
      std::move(out), std::move(parents),
      [x, w, b, vx, vw, rows, din, dout](Tape& tp, i64 self) {
        const Tensor& g = tp.grad_of(self);
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          const T* px = vx.data<T>();
          const T* pw = vw.data<T>();

          Tensor dx = Tensor::zeros(vx.shape(), vx.dtype());
          T* __restrict pdx = dx.mut<T>();
          for (i64 r = 0; r < rows; ++r) {
            const T* __restrict grow = pg + r * dout;
            T* __restrict dxrow = pdx + r * din;
            for (i64 i = 0; i < din; ++i) {
              const T* __restrict wrow = pw + i * dout;
              // Lane-structured dot so the reduction vectorizes while the
              // summation order stays fixed.
              T part[8] = {0, 0, 0, 0, 0, 0, 0, 0};
              i64 o = 0;
              for (; o + 8 <= dout; o += 8) {
                for (int j = 0; j < 8; ++j) part[j] += grow[o + j] * wrow[o + j];
              }
              T acc = ((part[0] + part[1]) + (part[2] + part[3])) +
                      ((part[4] + part[5]) + (part[6] + part[7]));
              for (; o < dout; ++o) acc += grow[o] * wrow[o];
              dxrow[i] = acc;
            }
          }
          tp.accum_grad(x.idx, dx);

          Tensor dw = Tensor::zeros(vw.shape(), vw.dtype());
          T* __restrict pdw = dw.mut<T>();
          for (i64 r = 0; r < rows; ++r) {
            const T* xrow = px + r * din;
            const T* __restrict grow = pg + r * dout;
            for (i64 i = 0; i < din; ++i) {
              const T xv = xrow[i];
              T* __restrict dwrow = pdw + i * dout;
              for (i64 o = 0; o < dout; ++o) dwrow[o] += xv * grow[o];
            }
          }
          tp.accum_grad(w.idx, dw);

          if (b.defined()) {
            Tensor db = Tensor::zeros({dout}, g.dtype());
            T* pdb = db.mut<T>();
            for (i64 r = 0; r < rows; ++r) {
              const T* grow = pg + r * dout;
              for (i64 o = 0; o < dout; ++o) pdb[o] += grow[o];
            }
            tp.accum_grad(b.idx, db);
          }
        });
      });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor& vx = t.val(x);
  const Tensor& vg = t.val(gamma);
  const Tensor& vbt = t.val(beta);
  check(vx.rank() >= 1, "layer_norm: input needs a channel axis");
  const i64 c = vx.dim(vx.rank() - 1);
  check(c > 0, "layer_norm: channel axis is empty");
  check(vg.rank() == 1 && vg.dim(0) == c && vbt.rank() == 1 &&
            vbt.dim(0) == c,
        "layer_norm: gamma/beta must be [C]");
  const i64 rows = vx.numel() / c;

  Tensor xhat = Tensor::empty(vx.shape(), t.dtype());
  Tensor rstd = Tensor::empty({rows}, t.dtype());
  Tensor out = Tensor::empty(vx.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    const T* pg = vg.data<T>();
    const T* pb = vbt.data<T>();
    T* ph = xhat.mut<T>();
    T* pr = rstd.mut<T>();
    T* po = out.mut<T>();
    for (i64 r = 0; r < rows; ++r) {
      const T* row = px + r * c;
      T mean = 0;
      for (i64 j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<T>(c);
      T var = 0;
      for (i64 j = 0; j < c; ++j) {
        const T d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
      pr[r] = rs;
      T* hrow = ph + r * c;
      T* orow = po + r * c;
      for (i64 j = 0; j < c; ++j) {
        hrow[j] = (row[j] - mean) * rs;
        orow[j] = pg[j] * hrow[j] + pb[j];
      }
    }
  });
  out.ensure_finite("layer_norm");

  return t.emit(
      std::move(out), {x.idx, gamma.idx, beta.idx},
      [x, gamma, beta, vg, xhat, rstd, rows, c](Tape& tp, i64 self) {
        const Tensor& g = tp.grad_of(self);
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          const T* pgam = vg.data<T>();
          const T* ph = xhat.data<T>();
          const T* pr = rstd.data<T>();

          Tensor dx = Tensor::empty(g.shape(), g.dtype());
          Tensor dgam = Tensor::zeros({c}, g.dtype());
          Tensor dbet = Tensor::zeros({c}, g.dtype());
          T* pdx = dx.mut<T>();
          T* pdg = dgam.mut<T>();
          T* pdb = dbet.mut<T>();
          for (i64 r = 0; r < rows; ++r) {
            const T* grow = pg + r * c;
            const T* hrow = ph + r * c;
            T* dxrow = pdx + r * c;
            T sum_dh = 0, sum_dh_h = 0;
            for (i64 j = 0; j < c; ++j) {
              const T dh = grow[j] * pgam[j];
              sum_dh += dh;
              sum_dh_h += dh * hrow[j];
              pdg[j] += grow[j] * hrow[j];
              pdb[j] += grow[j];
            }
            const T inv_c = T(1) / static_cast<T>(c);
            for (i64 j = 0; j < c; ++j) {
              const T dh = grow[j] * pgam[j];
              dxrow[j] =
                  pr[r] * (dh - sum_dh * inv_c - hrow[j] * sum_dh_h * inv_c);
            }
          }
          tp.accum_grad(x.idx, dx);
          tp.accum_grad(gamma.idx, dgam);
          tp.accum_grad(beta.idx, dbet);
        });
      });
}

Var silu(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_unary<T>(vx, [](T v) { return v * sigmoid_scalar(v); });
  });
  out.ensure_finite("silu");
  return t.emit(std::move(out), {x.idx}, [x, vx](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    Tensor dx = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      return ew_binary<T>(g, vx, [](T gv, T v) {
        const T s = sigmoid_scalar(v);
        return gv * (s + v * s * (T(1) - s));
      });
    });
    tp.accum_grad(x.idx, dx);
  });
}

Var sigmoid(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_unary<T>(vx, [](T v) { return sigmoid_scalar(v); });
  });
  out.ensure_finite("sigmoid");
  Tensor saved = out;
  return t.emit(std::move(out), {x.idx}, [x, saved](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    Tensor dx = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      return ew_binary<T>(g, saved, [](T gv, T s) {
        return gv * s * (T(1) - s);
      });
    });
    tp.accum_grad(x.idx, dx);
  });
}

Var softplus(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_unary<T>(vx, [](T v) { return softplus_scalar(v); });
  });
  out.ensure_finite("softplus");
  return t.emit(std::move(out), {x.idx}, [x, vx](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    Tensor dx = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      return ew_binary<T>(g, vx, [](T gv, T v) {
        return gv * sigmoid_scalar(v);
      });
    });
    tp.accum_grad(x.idx, dx);
  });
}

Var causal_conv1d(Tape& t, Var x, Var k, Var bias) {
  const Tensor& vx = t.val(x);
  const Tensor& vk = t.val(k);
  check(vx.rank() == 2, "causal_conv1d: input must be [T,C]");
  check(vk.rank() == 2, "causal_conv1d: kernel must be [K,C]");
  const i64 tlen = vx.dim(0);
  const i64 c = vx.dim(1);
  const i64 kw = vk.dim(0);
  check(kw >= 1, "causal_conv1d: kernel width must be >= 1");
  check(vk.dim(1) == c, "causal_conv1d: kernel channels mismatch");
  const Tensor* vb = nullptr;
  if (bias.defined()) {
    vb = &t.val(bias);
    check(vb->rank() == 1 && vb->dim(0) == c,
          "causal_conv1d: bias must be [C]");
  }

  Tensor out = Tensor::empty(vx.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    const T* pk = vk.data<T>();
    const T* pb = vb != nullptr ? vb->data<T>() : nullptr;
    T* po = out.mut<T>();
    for (i64 tt = 0; tt < tlen; ++tt) {
      for (i64 j = 0; j < c; ++j) {
        T acc = pb != nullptr ? pb[j] : T(0);
        for (i64 w = 0; w < kw; ++w) {
          const i64 s = tt - (kw - 1) + w;
          if (s >= 0) acc += pk[w * c + j] * px[s * c + j];
        }
        po[tt * c + j] = acc;
      }
    }
  });
  out.ensure_finite("causal_conv1d");

  std::vector<i64> parents = {x.idx, k.idx};
  if (bias.defined()) parents.push_back(bias.idx);
  return t.emit(
      std::move(out), std::move(parents),
      [x, k, bias, vx, vk, tlen, c, kw](Tape& tp, i64 self) {
        const Tensor& g = tp.grad_of(self);
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          const T* px = vx.data<T>();
          const T* pk = vk.data<T>();
          Tensor dx = Tensor::zeros(vx.shape(), vx.dtype());
          Tensor dk = Tensor::zeros(vk.shape(), vk.dtype());
          T* pdx = dx.mut<T>();
          T* pdk = dk.mut<T>();
          for (i64 tt = 0; tt < tlen; ++tt) {
            for (i64 w = 0; w < kw; ++w) {
              const i64 s = tt - (kw - 1) + w;
              if (s < 0) continue;
              for (i64 j = 0; j < c; ++j) {
                const T gv = pg[tt * c + j];
                pdx[s * c + j] += gv * pk[w * c + j];
                pdk[w * c + j] += gv * px[s * c + j];
              }
            }
          }
          tp.accum_grad(x.idx, dx);
          tp.accum_grad(k.idx, dk);
          if (bias.defined()) {
            Tensor db = Tensor::zeros({c}, g.dtype());
            T* pdb = db.mut<T>();
            for (i64 tt = 0; tt < tlen; ++tt) {
              for (i64 j = 0; j < c; ++j) pdb[j] += pg[tt * c + j];
            }
            tp.accum_grad(bias.idx, db);
          }
        });
      });
}

Var depthwise_conv2d(Tape& t, Var x, Var k, Var bias) {
  const Tensor& vx = t.val(x);
  const Tensor& vk = t.val(k);
  check(vx.rank() == 4, "depthwise_conv2d: input must be [T,H,W,C]");
  check(vk.rank() == 3, "depthwise_conv2d: kernel must be [kh,kw,C]");
  const i64 tlen = vx.dim(0), h = vx.dim(1), w = vx.dim(2), c = vx.dim(3);
  const i64 kh = vk.dim(0), kw = vk.dim(1);
  check(kh % 2 == 1 && kw % 2 == 1,
        "depthwise_conv2d: kernel extents must be odd");
  check(vk.dim(2) == c, "depthwise_conv2d: kernel channels mismatch");
  const Tensor* vb = nullptr;
  if (bias.defined()) {
    vb = &t.val(bias);
    check(vb->rank() == 1 && vb->dim(0) == c,
          "depthwise_conv2d: bias must be [C]");
  }
  const i64 ph = kh / 2, pw = kw / 2;

  Tensor out = Tensor::empty(vx.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    const T* pk = vk.data<T>();
    const T* pb = vb != nullptr ? vb->data<T>() : nullptr;
    T* po = out.mut<T>();
    for (i64 tt = 0; tt < tlen; ++tt) {
      for (i64 i = 0; i < h; ++i) {
        for (i64 j = 0; j < w; ++j) {
          T* orow = po + ((tt * h + i) * w + j) * c;
          for (i64 ch = 0; ch < c; ++ch) {
            orow[ch] = pb != nullptr ? pb[ch] : T(0);
          }
          for (i64 p = 0; p < kh; ++p) {
            const i64 si = i + p - ph;
            if (si < 0 || si >= h) continue;
            for (i64 q = 0; q < kw; ++q) {
              const i64 sj = j + q - pw;
              if (sj < 0 || sj >= w) continue;
              const T* xrow = px + ((tt * h + si) * w + sj) * c;
              const T* krow = pk + (p * kw + q) * c;
              for (i64 ch = 0; ch < c; ++ch) orow[ch] += krow[ch] * xrow[ch];
            }
          }
        }
      }
    }
  });
  out.ensure_finite("depthwise_conv2d");

  std::vector<i64> parents = {x.idx, k.idx};
  if (bias.defined()) parents.push_back(bias.idx);
  return t.emit(
      std::move(out), std::move(parents),
      [x, k, bias, vx, vk, tlen, h, w, c, kh, kw, ph, pw](Tape& tp,
                                                          i64 self) {
        const Tensor& g = tp.grad_of(self);
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          const T* px = vx.data<T>();
          const T* pk = vk.data<T>();
          Tensor dx = Tensor::zeros(vx.shape(), vx.dtype());
          Tensor dk = Tensor::zeros(vk.shape(), vk.dtype());
          T* pdx = dx.mut<T>();
          T* pdk = dk.mut<T>();
          for (i64 tt = 0; tt < tlen; ++tt) {
            for (i64 i = 0; i < h; ++i) {
              for (i64 j = 0; j < w; ++j) {
                const T* grow = pg + ((tt * h + i) * w + j) * c;
                for (i64 p = 0; p < kh; ++p) {
                  const i64 si = i + p - ph;
                  if (si < 0 || si >= h) continue;
                  for (i64 q = 0; q < kw; ++q) {
                    const i64 sj = j + q - pw;
                    if (sj < 0 || sj >= w) continue;
                    T* dxrow = pdx + ((tt * h + si) * w + sj) * c;
                    T* dkrow = pdk + (p * kw + q) * c;
                    const T* xrow = px + ((tt * h + si) * w + sj) * c;
                    const T* krow = pk + (p * kw + q) * c;
                    for (i64 ch = 0; ch < c; ++ch) {
                      dxrow[ch] += grow[ch] * krow[ch];
                      dkrow[ch] += grow[ch] * xrow[ch];
                    }
                  }
                }
              }
            }
          }
          tp.accum_grad(x.idx, dx);
          tp.accum_grad(k.idx, dk);
          if (bias.defined()) {
            Tensor db = Tensor::zeros({c}, g.dtype());
            T* pdb = db.mut<T>();
            const i64 pixels = tlen * h * w;
            for (i64 r = 0; r < pixels; ++r) {
              for (i64 ch = 0; ch < c; ++ch) pdb[ch] += pg[r * c + ch];
            }
            tp.accum_grad(bias.idx, db);
          }
        });
      });
}

Var depthwise_conv3d(Tape& t, Var x, Var k, Var bias) {
  const Tensor& vx = t.val(x);
  const Tensor& vk = t.val(k);
  check(vx.rank() == 4, "depthwise_conv3d: input must be [T,H,W,C]");
  check(vk.rank() == 4, "depthwise_conv3d: kernel must be [kt,kh,kw,C]");
  const i64 tlen = vx.dim(0), h = vx.dim(1), w = vx.dim(2), c = vx.dim(3);
  const i64 kt = vk.dim(0), kh = vk.dim(1), kw = vk.dim(2);
  check(kt % 2 == 1 && kh % 2 == 1 && kw % 2 == 1,
        "depthwise_conv3d: kernel extents must be odd");
  check(vk.dim(3) == c, "depthwise_conv3d: kernel channels mismatch");
  const Tensor* vb = nullptr;
  if (bias.defined()) {
    vb = &t.val(bias);
    check(vb->rank() == 1 && vb->dim(0) == c,
          "depthwise_conv3d: bias must be [C]");
  }
  const i64 pt = kt / 2, ph = kh / 2, pw = kw / 2;

  Tensor out = Tensor::empty(vx.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    const T* pk = vk.data<T>();
    const T* pb = vb != nullptr ? vb->data<T>() : nullptr;
    T* po = out.mut<T>();
    for (i64 tt = 0; tt < tlen; ++tt) {
      for (i64 i = 0; i < h; ++i) {
        for (i64 j = 0; j < w; ++j) {
          T* orow = po + ((tt * h + i) * w + j) * c;
          for (i64 ch = 0; ch < c; ++ch) {
            orow[ch] = pb != nullptr ? pb[ch] : T(0);
          }
          for (i64 r = 0; r < kt; ++r) {
            const i64 st = tt + r - pt;
            if (st < 0 || st >= tlen) continue;
            for (i64 p = 0; p < kh; ++p) {
              const i64 si = i + p - ph;
              if (si < 0 || si >= h) continue;
              for (i64 q = 0; q < kw; ++q) {
                const i64 sj = j + q - pw;
                if (sj < 0 || sj >= w) continue;
                const T* xrow = px + ((st * h + si) * w + sj) * c;
                const T* krow = pk + ((r * kh + p) * kw + q) * c;
                for (i64 ch = 0; ch < c; ++ch) {
                  orow[ch] += krow[ch] * xrow[ch];
                }
              }
            }
          }
        }
      }
    }
  });
  out.ensure_finite("depthwise_conv3d");

  std::vector<i64> parents = {x.idx, k.idx};
  if (bias.defined()) parents.push_back(bias.idx);
  return t.emit(
      std::move(out), std::move(parents),
      [x, k, bias, vx, vk, tlen, h, w, c, kt, kh, kw, pt, ph,
       pw](Tape& tp, i64 self) {
        const Tensor& g = tp.grad_of(self);
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          const T* px = vx.data<T>();
          const T* pk = vk.data<T>();
          Tensor dx = Tensor::zeros(vx.shape(), vx.dtype());
          Tensor dk = Tensor::zeros(vk.shape(), vk.dtype());
          T* pdx = dx.mut<T>();
          T* pdk = dk.mut<T>();
          for (i64 tt = 0; tt < tlen; ++tt) {
            for (i64 i = 0; i < h; ++i) {
              for (i64 j = 0; j < w; ++j) {
                const T* grow = pg + ((tt * h + i) * w + j) * c;
                for (i64 r = 0; r < kt; ++r) {
                  const i64 st = tt + r - pt;
                  if (st < 0 || st >= tlen) continue;
                  for (i64 p = 0; p < kh; ++p) {
                    const i64 si = i + p - ph;
                    if (si < 0 || si >= h) continue;
                    for (i64 q = 0; q < kw; ++q) {
                      const i64 sj = j + q - pw;
                      if (sj < 0 || sj >= w) continue;
                      const i64 xoff = ((st * h + si) * w + sj) * c;
                      const i64 koff = ((r * kh + p) * kw + q) * c;
                      for (i64 ch = 0; ch < c; ++ch) {
                        pdx[xoff + ch] += grow[ch] * pk[koff + ch];
                        pdk[koff + ch] += grow[ch] * px[xoff + ch];
                      }
                    }
                  }
                }
              }
            }
          }
          tp.accum_grad(x.idx, dx);
          tp.accum_grad(k.idx, dk);
          if (bias.defined()) {
            Tensor db = Tensor::zeros({c}, g.dtype());
            T* pdb = db.mut<T>();
            const i64 pixels = tlen * h * w;
            for (i64 rr = 0; rr < pixels; ++rr) {
              for (i64 ch = 0; ch < c; ++ch) pdb[ch] += pg[rr * c + ch];
            }
            tp.accum_grad(bias.idx, db);
          }
        });
      });
}

Var reshape(Tape& t, Var x, Shape shape) {
  const Tensor& vx = t.val(x);
  Tensor out = ssmavs::reshape(vx, shape);
  Shape orig = vx.shape();
  return t.emit(std::move(out), {x.idx}, [x, orig](Tape& tp, i64 self) {
    tp.accum_grad(x.idx, ssmavs::reshape(tp.grad_of(self), orig));
  });
}

Var permute(Tape& t, Var x, std::vector<i64> axes) {
  const Tensor& vx = t.val(x);
  Tensor out = ssmavs::permute(vx, axes);
  std::vector<i64> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<i64>(i);
  return t.emit(std::move(out), {x.idx}, [x, inv](Tape& tp, i64 self) {
    tp.accum_grad(x.idx, ssmavs::permute(tp.grad_of(self), inv));
  });
}

Var reverse_axis(Tape& t, Var x, i64 axis) {
  const Tensor& vx = t.val(x);
  Tensor out = ssmavs::reverse_axis(vx, axis);
  return t.emit(std::move(out), {x.idx}, [x, axis](Tape& tp, i64 self) {
    tp.accum_grad(x.idx, ssmavs::reverse_axis(tp.grad_of(self), axis));
  });
}

Var gather_rows(Tape& t, Var x,
                std::shared_ptr<const std::vector<i64>> idx) {
  const Tensor& vx = t.val(x);
  check(vx.rank() == 2, "gather_rows: input must be [L,C]");
  check(idx != nullptr, "gather_rows: null index list");
  const i64 l = vx.dim(0);
  const i64 c = vx.dim(1);
  const i64 lo = static_cast<i64>(idx->size());
  for (i64 v : *idx) {
    check(v >= 0 && v < l, "gather_rows: index " + std::to_string(v) +
                               " out of range for " + std::to_string(l) +
                               " rows");
  }
  Tensor out = Tensor::empty({lo, c}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    T* po = out.mut<T>();
    for (i64 i = 0; i < lo; ++i) {
      std::memcpy(po + i * c, px + (*idx)[i] * c, c * sizeof(T));
    }
  });
  return t.emit(std::move(out), {x.idx},
                [x, idx, l, c](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  Tensor dx = Tensor::zeros({l, c}, g.dtype());
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    const T* pg = g.data<T>();
                    T* pd = dx.mut<T>();
                    for (size_t i = 0; i < idx->size(); ++i) {
                      T* drow = pd + (*idx)[i] * c;
                      const T* grow = pg + static_cast<i64>(i) * c;
                      for (i64 j = 0; j < c; ++j) drow[j] += grow[j];
                    }
                  });
                  tp.accum_grad(x.idx, dx);
                });
}

Var slice_rows(Tape& t, Var x, i64 begin, i64 len) {
  const Tensor& vx = t.val(x);
  check(vx.rank() == 2, "slice_rows: input must be [L,C]");
  const i64 l = vx.dim(0);
  const i64 c = vx.dim(1);
  check(begin >= 0 && len >= 0 && begin + len <= l,
        "slice_rows: range [" + std::to_string(begin) + "," +
            std::to_string(begin + len) + ") out of " + std::to_string(l));
  Tensor out = Tensor::empty({len, c}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(out.mut<T>(), vx.data<T>() + begin * c,
                len * c * sizeof(T));
  });
  return t.emit(std::move(out), {x.idx},
                [x, begin, len, l, c](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  Tensor dx = Tensor::zeros({l, c}, g.dtype());
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    std::memcpy(dx.mut<T>() + begin * c, g.data<T>(),
                                len * c * sizeof(T));
                  });
                  tp.accum_grad(x.idx, dx);
                });
}

Var concat_rows(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  check(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(1),
        "concat_rows: inputs must be [La,C] and [Lb,C]");
  const i64 la = va.dim(0), lb = vb.dim(0), c = va.dim(1);
  Tensor out = Tensor::empty({la + lb, c}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(out.mut<T>(), va.data<T>(), la * c * sizeof(T));
    std::memcpy(out.mut<T>() + la * c, vb.data<T>(), lb * c * sizeof(T));
  });
  return t.emit(std::move(out), {a.idx, b.idx},
                [a, b, la, lb, c](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    Tensor da = Tensor::empty({la, c}, g.dtype());
                    Tensor db = Tensor::empty({lb, c}, g.dtype());
                    std::memcpy(da.mut<T>(), g.data<T>(),
                                la * c * sizeof(T));
                    std::memcpy(db.mut<T>(), g.data<T>() + la * c,
                                lb * c * sizeof(T));
                    tp.accum_grad(a.idx, da);
                    tp.accum_grad(b.idx, db);
                  });
                });
}

Var concat_cols(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  check(va.rank() == 2 && vb.rank() == 2 && va.dim(0) == vb.dim(0),
        "concat_cols: inputs must be [L,Ca] and [L,Cb]");
  const i64 l = va.dim(0), ca = va.dim(1), cb = vb.dim(1);
  Tensor out = Tensor::empty({l, ca + cb}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = va.data<T>();
    const T* pb = vb.data<T>();
    T* po = out.mut<T>();
    for (i64 r = 0; r < l; ++r) {
      std::memcpy(po + r * (ca + cb), pa + r * ca, ca * sizeof(T));
      std::memcpy(po + r * (ca + cb) + ca, pb + r * cb, cb * sizeof(T));
    }
  });
  return t.emit(std::move(out), {a.idx, b.idx},
                [a, b, l, ca, cb](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    const T* pg = g.data<T>();
                    Tensor da = Tensor::empty({l, ca}, g.dtype());
                    Tensor db = Tensor::empty({l, cb}, g.dtype());
                    T* pda = da.mut<T>();
                    T* pdb = db.mut<T>();
                    for (i64 r = 0; r < l; ++r) {
                      std::memcpy(pda + r * ca, pg + r * (ca + cb),
                                  ca * sizeof(T));
                      std::memcpy(pdb + r * cb, pg + r * (ca + cb) + ca,
                                  cb * sizeof(T));
                    }
                    tp.accum_grad(a.idx, da);
                    tp.accum_grad(b.idx, db);
                  });
                });
}

Var sum_all(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  Tensor out = Tensor::empty({1}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    T acc = 0;
    for (i64 i = 0; i < vx.numel(); ++i) acc += px[i];
    out.mut<T>()[0] = acc;
  });
  out.ensure_finite("sum_all");
  Shape xshape = vx.shape();
  return t.emit(std::move(out), {x.idx}, [x, xshape](Tape& tp, i64 self) {
    const double gv = tp.grad_of(self).scalar_at(0);
    tp.accum_grad(x.idx, Tensor::full(xshape, gv, tp.dtype()));
  });
}

Var reduce_trailing(Tape& t, Var x, i64 keep_axes) {
  const Tensor& vx = t.val(x);
  check(keep_axes >= 0 && keep_axes <= vx.rank(),
        "reduce_trailing: keep_axes out of range");
  Shape out_shape(vx.shape().begin(), vx.shape().begin() + keep_axes);
  const i64 outer = shape_numel(out_shape);
  const i64 inner = outer > 0 ? vx.numel() / outer : 0;
  Tensor out = Tensor::empty(out_shape, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    T* po = out.mut<T>();
    for (i64 o = 0; o < outer; ++o) {
      T acc = 0;
      const T* row = px + o * inner;
      for (i64 i = 0; i < inner; ++i) acc += row[i];
      po[o] = acc;
    }
  });
  out.ensure_finite("reduce_trailing");
  Shape xshape = vx.shape();
  return t.emit(std::move(out), {x.idx},
                [x, xshape, outer, inner](Tape& tp, i64 self) {
                  const Tensor& g = tp.grad_of(self);
                  Tensor dx = Tensor::empty(xshape, g.dtype());
                  dispatch(g.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    const T* pg = g.data<T>();
                    T* pd = dx.mut<T>();
                    for (i64 o = 0; o < outer; ++o) {
                      T* row = pd + o * inner;
                      for (i64 i = 0; i < inner; ++i) row[i] = pg[o];
                    }
                  });
                  tp.accum_grad(x.idx, dx);
                });
}

Var frame_dot(Tape& t, Var feat, Var q) {
  const Tensor& vf = t.val(feat);
  const Tensor& vq = t.val(q);
  check(vf.rank() == 4, "frame_dot: features must be [T,H,W,C]");
  check(vq.rank() == 2, "frame_dot: query must be [T,C]");
  const i64 tlen = vf.dim(0), h = vf.dim(1), w = vf.dim(2), c = vf.dim(3);
  check(vq.dim(0) == tlen && vq.dim(1) == c,
        "frame_dot: query shape " + shape_str(vq.shape()) +
            " does not match features " + shape_str(vf.shape()));
  Tensor out = Tensor::empty({tlen, h, w, 1}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pf = vf.data<T>();
    const T* pq = vq.data<T>();
    T* po = out.mut<T>();
    for (i64 tt = 0; tt < tlen; ++tt) {
      const T* qrow = pq + tt * c;
      for (i64 p = 0; p < h * w; ++p) {
        const T* frow = pf + (tt * h * w + p) * c;
        T acc = 0;
        for (i64 ch = 0; ch < c; ++ch) acc += frow[ch] * qrow[ch];
        po[tt * h * w + p] = acc;
      }
    }
  });
  out.ensure_finite("frame_dot");
  return t.emit(
      std::move(out), {feat.idx, q.idx},
      [feat, q, vf, vq, tlen, h, w, c](Tape& tp, i64 self) {
        const Tensor& g = tp.grad_of(self);
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          const T* pf = vf.data<T>();
          const T* pq = vq.data<T>();
          Tensor df = Tensor::empty(vf.shape(), vf.dtype());
          Tensor dq = Tensor::zeros(vq.shape(), vq.dtype());
          T* pdf = df.mut<T>();
          T* pdq = dq.mut<T>();
          for (i64 tt = 0; tt < tlen; ++tt) {
            const T* qrow = pq + tt * c;
            T* dqrow = pdq + tt * c;
            for (i64 p = 0; p < h * w; ++p) {
              const T gv = pg[tt * h * w + p];
              const T* frow = pf + (tt * h * w + p) * c;
              T* dfrow = pdf + (tt * h * w + p) * c;
              for (i64 ch = 0; ch < c; ++ch) {
                dfrow[ch] = gv * qrow[ch];
                dqrow[ch] += gv * frow[ch];
              }
            }
          }
          tp.accum_grad(feat.idx, df);
          tp.accum_grad(q.idx, dq);
        });
      });
}

namespace {

// Two-tap sampling plan along one axis for 2x upsampling with half-pixel
// source centers and edge clamping.
struct UpTaps {
  std::vector<i64> i0, i1;
  std::vector<double> w1;
};

UpTaps up2_taps(i64 n) {
  UpTaps taps;
  taps.i0.resize(2 * n);
  taps.i1.resize(2 * n);
  taps.w1.resize(2 * n);
  for (i64 o = 0; o < 2 * n; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    double fl = std::floor(src);
    double w = src - fl;
    i64 a = static_cast<i64>(fl);
    i64 b = a + 1;
    if (a < 0) a = 0;
    if (b > n - 1) b = n - 1;
    if (a > n - 1) a = n - 1;
    taps.i0[o] = a;
    taps.i1[o] = b;
    taps.w1[o] = w;
  }
  return taps;
}

}  // namespace

Var bilinear_up2(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  check(vx.rank() == 4, "bilinear_up2: input must be [T,H,W,C]");
  const i64 tlen = vx.dim(0), h = vx.dim(1), w = vx.dim(2), c = vx.dim(3);
  const UpTaps th = up2_taps(h);
  const UpTaps tw = up2_taps(w);
  Tensor out = Tensor::empty({tlen, 2 * h, 2 * w, c}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = vx.data<T>();
    T* po = out.mut<T>();
    for (i64 tt = 0; tt < tlen; ++tt) {
      const T* frame = px + tt * h * w * c;
      for (i64 oi = 0; oi < 2 * h; ++oi) {
        const T wy = static_cast<T>(th.w1[oi]);
        const T* r0 = frame + th.i0[oi] * w * c;
        const T* r1 = frame + th.i1[oi] * w * c;
        for (i64 oj = 0; oj < 2 * w; ++oj) {
          const T wx = static_cast<T>(tw.w1[oj]);
          const T* p00 = r0 + tw.i0[oj] * c;
          const T* p01 = r0 + tw.i1[oj] * c;
          const T* p10 = r1 + tw.i0[oj] * c;
          const T* p11 = r1 + tw.i1[oj] * c;
          T* orow = po + ((tt * 2 * h + oi) * 2 * w + oj) * c;
          for (i64 ch = 0; ch < c; ++ch) {
            const T top = p00[ch] + wx * (p01[ch] - p00[ch]);
            const T bot = p10[ch] + wx * (p11[ch] - p10[ch]);
            orow[ch] = top + wy * (bot - top);
          }
        }
      }
    }
  });
  out.ensure_finite("bilinear_up2");
  return t.emit(
      std::move(out), {x.idx},
      [x, tlen, h, w, c, th, tw](Tape& tp, i64 self) {
        const Tensor& g = tp.grad_of(self);
        Tensor dx = Tensor::zeros({tlen, h, w, c}, g.dtype());
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* pg = g.data<T>();
          T* pd = dx.mut<T>();
          for (i64 tt = 0; tt < tlen; ++tt) {
            T* frame = pd + tt * h * w * c;
            for (i64 oi = 0; oi < 2 * h; ++oi) {
              const T wy = static_cast<T>(th.w1[oi]);
              for (i64 oj = 0; oj < 2 * w; ++oj) {
                const T wx = static_cast<T>(tw.w1[oj]);
                const T* grow = pg + ((tt * 2 * h + oi) * 2 * w + oj) * c;
                T* p00 = frame + (th.i0[oi] * w + tw.i0[oj]) * c;
                T* p01 = frame + (th.i0[oi] * w + tw.i1[oj]) * c;
                T* p10 = frame + (th.i1[oi] * w + tw.i0[oj]) * c;
                T* p11 = frame + (th.i1[oi] * w + tw.i1[oj]) * c;
                for (i64 ch = 0; ch < c; ++ch) {
                  const T gv = grow[ch];
                  p00[ch] += gv * (T(1) - wy) * (T(1) - wx);
                  p01[ch] += gv * (T(1) - wy) * wx;
                  p10[ch] += gv * wy * (T(1) - wx);
                  p11[ch] += gv * wy * wx;
                }
              }
            }
          }
        });
        tp.accum_grad(x.idx, dx);
      });
}

Var bce_with_logits(Tape& t, Var z, const Tensor& target) {
  const Tensor& vz = t.val(z);
  Tensor tt = target.dtype() == t.dtype() ? target : target.astype(t.dtype());
  check_same_shape(vz, tt, "bce_with_logits");
  Tensor out = dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return ew_binary<T>(vz, tt, [](T zv, T tv) {
      const T mx = zv > T(0) ? zv : T(0);
      return mx - zv * tv + std::log1p(std::exp(-std::abs(zv)));
    });
  });
  out.ensure_finite("bce_with_logits");
  return t.emit(std::move(out), {z.idx}, [z, vz, tt](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    Tensor dz = Tensor::empty(g.shape(), g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* pg = g.data<T>();
      const T* pz = vz.data<T>();
      const T* pt = tt.data<T>();
      T* pd = dz.mut<T>();
      for (i64 i = 0; i < g.numel(); ++i) {
        pd[i] = pg[i] * (sigmoid_scalar(pz[i]) - pt[i]);
      }
    });
    tp.accum_grad(z.idx, dz);
  });
}

}  // namespace ssmavs::ops
