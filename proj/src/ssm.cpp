#include "ssmavs/ssm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "ssmavs/threadpool.hpp"

namespace ssmavs {

namespace {

constexpr i64 kScanBlock = 64;     // parallel-scan block length
constexpr i64 kChannelChunk = 16;  // channels per worker chunk

// Dot reduction in a fixed lane-tree order: eight strided partials combined
// pairwise, then a sequential tail. The order depends only on n, so results
// are bitwise reproducible while the partial pass still vectorizes.
template <typename T>
T dot_tree(const T* __restrict a, i64 n) {
  T part[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  i64 i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) part[j] += a[i + j];
  }
  T acc = ((part[0] + part[1]) + (part[2] + part[3])) +
          ((part[4] + part[5]) + (part[6] + part[7]));
  for (; i < n; ++i) acc += a[i];
  return acc;
}

template <typename T>
T exp_e(T x);
template <>
float exp_e<float>(float x) {
  return fast_expf(x);
}
template <>
double exp_e<double>(double x) {
  return std::exp(x);
}

void check_scan_shapes(const ScanCoeffs& c, const Tensor& A,
                       const Tensor& D_skip) {
  check(c.u.rank() == 2 && c.delta.rank() == 2, "scan: u/delta must be [L,D]");
  check(c.B.rank() == 2 && c.C.rank() == 2, "scan: B/C must be [L,N]");
  check(A.rank() == 2, "scan: A must be [D,N]");
  check(D_skip.rank() == 1, "scan: D_skip must be [D]");
  const i64 L = c.u.dim(0), D = c.u.dim(1), N = c.B.dim(1);
  check(L >= 1, "scan: sequence length must be >= 1");
  check(c.delta.dim(0) == L && c.delta.dim(1) == D, "scan: delta shape");
  check(c.B.dim(0) == L && c.C.dim(0) == L && c.C.dim(1) == N,
        "scan: B/C shape");
  check(A.dim(0) == D && A.dim(1) == N, "scan: A shape");
  check(D_skip.dim(0) == D, "scan: D_skip shape");
  const Dtype dt = c.u.dtype();
  check(c.delta.dtype() == dt && c.B.dtype() == dt && c.C.dtype() == dt &&
            A.dtype() == dt && D_skip.dtype() == dt,
        "scan: mixed dtypes");
  check(c.u.all_finite() && c.delta.all_finite() && c.B.all_finite() &&
            c.C.all_finite(),
        "scan: non-finite input");
}

template <typename T>
void scan_seq_t(const T* uu, const T* dl, const T* Bb, const T* Cc,
                const T* Aa, const T* Dd, i64 L, i64 D, i64 N, i64 seg,
                T* yy, T* st) {
  parallel_chunks(D, kChannelChunk, [&](i64 d0, i64 d1) {
    // Time-major walk so the [L,D] inputs stream contiguously instead of
    // being re-read once per channel; per-channel state for the chunk is
    // carried across k in one block.
    const i64 W = d1 - d0;
    std::vector<T> s(static_cast<size_t>(W * N)), prod(N);
    T* __restrict sp = s.data();
    T* __restrict pp = prod.data();
    for (i64 k0 = 0; k0 < L; k0 += seg) {
      std::fill(s.begin(), s.end(), T(0));
      for (i64 k = k0; k < k0 + seg; ++k) {
        const T* __restrict Bk = Bb + k * N;
        const T* __restrict Ck = Cc + k * N;
        for (i64 d = d0; d < d1; ++d) {
          const T dt = dl[k * D + d];
          const T ud = uu[k * D + d];
          const T dtu = dt * ud;
          const T* __restrict Ad = Aa + d * N;
          T* __restrict sd = sp + (d - d0) * N;
          // Elementwise over n so the lanes vectorize; the dot with C is
          // reduced in a separate fixed-order pass.
          for (i64 n = 0; n < N; ++n) {
            const T a = exp_e<T>(dt * Ad[n]);
            const T sn = a * sd[n] + dtu * Bk[n];
            sd[n] = sn;
            pp[n] = Ck[n] * sn;
          }
          yy[k * D + d] = dot_tree(pp, N) + Dd[d] * ud;
          if (st != nullptr) {
            std::memcpy(st + (k * D + d) * N, sd, N * sizeof(T));
          }
        }
      }
    }
  });
}

// Blocked two-pass prefix scan: per block left-to-right aggregates under
// (a2,b2)∘(a1,b1) = (a1*a2, a2*b1+b2), a sequential carry pass over block
// aggregates, then a downsweep from each block's carried-in state. The
// combination order is fixed, so results are bitwise reproducible.
template <typename T>
void scan_par_t(const T* uu, const T* dl, const T* Bb, const T* Cc,
                const T* Aa, const T* Dd, i64 L, i64 D, i64 N, i64 seg,
                T* yy, T* st) {
  const i64 nblk = (seg + kScanBlock - 1) / kScanBlock;
  parallel_chunks(D, kChannelChunk, [&](i64 d0, i64 d1) {
    std::vector<T> a(L), b(L), sn(L), acc(L);
    std::vector<T> agg_a(nblk), agg_b(nblk), carry(nblk);
    for (i64 d = d0; d < d1; ++d) {
      std::fill(acc.begin(), acc.end(), T(0));
      for (i64 n = 0; n < N; ++n) {
        const T An = Aa[d * N + n];
        for (i64 k = 0; k < L; ++k) {
          const T dt = dl[k * D + d];
          a[k] = exp_e<T>(dt * An);
          b[k] = dt * Bb[k * N + n] * uu[k * D + d];
        }
        for (i64 s0 = 0; s0 < L; s0 += seg) {
          for (i64 j = 0; j < nblk; ++j) {
            const i64 k0 = s0 + j * kScanBlock;
            const i64 k1 = std::min(s0 + seg, k0 + kScanBlock);
            T ca = 1, cb = 0;
            for (i64 k = k0; k < k1; ++k) {
              ca = ca * a[k];
              cb = a[k] * cb + b[k];
            }
            agg_a[j] = ca;
            agg_b[j] = cb;
          }
          T rb = 0;
          for (i64 j = 0; j < nblk; ++j) {
            carry[j] = rb;
            rb = agg_a[j] * rb + agg_b[j];
          }
          for (i64 j = 0; j < nblk; ++j) {
            const i64 k0 = s0 + j * kScanBlock;
            const i64 k1 = std::min(s0 + seg, k0 + kScanBlock);
            T s = carry[j];
            for (i64 k = k0; k < k1; ++k) {
              s = a[k] * s + b[k];
              sn[k] = s;
            }
          }
        }
        for (i64 k = 0; k < L; ++k) acc[k] += Cc[k * N + n] * sn[k];
        if (st != nullptr) {
          for (i64 k = 0; k < L; ++k) st[(k * D + d) * N + n] = sn[k];
        }
      }
      for (i64 k = 0; k < L; ++k) {
        yy[k * D + d] = acc[k] + Dd[d] * uu[k * D + d];
      }
    }
  });
}

}  // namespace

void discretize(const Tensor& delta, const Tensor& A, const Tensor& B,
                Tensor& A_bar, Tensor& B_bar) {
  check(delta.rank() == 2 && A.rank() == 2 && B.rank() == 2,
        "discretize: delta [L,D], A [D,N], B [L,N]");
  const i64 L = delta.dim(0), D = delta.dim(1), N = A.dim(1);
  check(A.dim(0) == D && B.dim(0) == L && B.dim(1) == N,
        "discretize: shape mismatch");
  const Dtype dt = delta.dtype();
  check(A.dtype() == dt && B.dtype() == dt, "discretize: mixed dtypes");
  A_bar = Tensor::empty({L, D, N}, dt);
  B_bar = Tensor::empty({L, D, N}, dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    const T* dl = delta.data<T>();
    const T* Aa = A.data<T>();
    const T* Bb = B.data<T>();
    T* ab = A_bar.mut<T>();
    T* bb = B_bar.mut<T>();
    for (i64 k = 0; k < L; ++k) {
      for (i64 d = 0; d < D; ++d) {
        const T dv = dl[k * D + d];
        check(dv > T(0), "discretize: delta must be positive");
        for (i64 n = 0; n < N; ++n) {
          ab[(k * D + d) * N + n] = exp_e<T>(dv * Aa[d * N + n]);
          bb[(k * D + d) * N + n] = dv * Bb[k * N + n];
        }
      }
    }
  });
}

Tensor scan_core(const ScanCoeffs& c, const Tensor& A, const Tensor& D_skip,
                 ScanImpl impl, Tensor* states_out, i64 seg_len) {
  check_scan_shapes(c, A, D_skip);
  const i64 L = c.u.dim(0), D = c.u.dim(1), N = c.B.dim(1);
  if (seg_len <= 0) seg_len = L;
  check(L % seg_len == 0, "scan_core: seg_len must divide L");
  const Dtype dt = c.u.dtype();
  Tensor y = Tensor::empty({L, D}, dt);
  if (states_out != nullptr) *states_out = Tensor::empty({L, D, N}, dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    T* st = states_out != nullptr ? states_out->mut<T>() : nullptr;
    if (impl == ScanImpl::Sequential) {
      scan_seq_t<T>(c.u.data<T>(), c.delta.data<T>(), c.B.data<T>(),
                    c.C.data<T>(), A.data<T>(), D_skip.data<T>(), L, D, N,
                    seg_len, y.mut<T>(), st);
    } else {
      scan_par_t<T>(c.u.data<T>(), c.delta.data<T>(), c.B.data<T>(),
                    c.C.data<T>(), A.data<T>(), D_skip.data<T>(), L, D, N,
                    seg_len, y.mut<T>(), st);
    }
  });
  y.ensure_finite("scan_core");
  return y;
}

void init_ssm_params(ParamStore& ps, const std::string& prefix, i64 D, i64 N,
                     Rng& rng, Dtype dt) {
  check(D >= 1 && N >= 1, "init_ssm_params: D and N must be >= 1");
  std::vector<double> alog(static_cast<size_t>(D * N));
  for (i64 d = 0; d < D; ++d) {
    for (i64 n = 0; n < N; ++n) {
      alog[static_cast<size_t>(d * N + n)] =
          std::log(static_cast<double>(n + 1));
    }
  }
  ps.add(prefix + ".A_log", Tensor::from_f64({D, N}, alog).astype(dt));
  ps.add(prefix + ".D_skip", Tensor::full({D}, 1.0, dt));
  const double s = 1.0 / std::sqrt(static_cast<double>(D));
  ps.add(prefix + ".W_dt", rng.uniform_tensor({D, D}, -s, s, dt));
  std::vector<double> bdt(static_cast<size_t>(D));
  for (i64 d = 0; d < D; ++d) {
    const double step = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    bdt[static_cast<size_t>(d)] = std::log(std::expm1(step));
  }
  ps.add(prefix + ".b_dt", Tensor::from_f64({D}, bdt).astype(dt));
  ps.add(prefix + ".W_B", rng.uniform_tensor({D, N}, -s, s, dt));
  ps.add(prefix + ".W_C", rng.uniform_tensor({D, N}, -s, s, dt));
}

namespace ops {

SsmVars bind_ssm(Tape& t, ParamStore& ps, const std::string& prefix) {
  SsmVars v;
  v.A_log = t.param(ps.at(prefix + ".A_log"));
  v.D_skip = t.param(ps.at(prefix + ".D_skip"));
  v.W_dt = t.param(ps.at(prefix + ".W_dt"));
  v.b_dt = t.param(ps.at(prefix + ".b_dt"));
  v.W_B = t.param(ps.at(prefix + ".W_B"));
  v.W_C = t.param(ps.at(prefix + ".W_C"));
  return v;
}

Var ssm_scan(Tape& t, Var u, Var delta, Var B, Var C, Var A_log, Var D_skip,
             ScanImpl impl, i64 seg_len) {
  const Tensor ut = t.val(u);
  const Tensor dt_ = t.val(delta);
  const Tensor Bt = t.val(B);
  const Tensor Ct = t.val(C);
  const Tensor alog = t.val(A_log);
  const Tensor Dt = t.val(D_skip);
  const i64 L = ut.dim(0), D = ut.dim(1), N = Bt.dim(1);
  check(alog.rank() == 2 && alog.dim(0) == D && alog.dim(1) == N,
        "ssm_scan: A_log shape");
  const i64 seg = seg_len <= 0 ? L : seg_len;

  Tensor A = Tensor::empty({D, N}, alog.dtype());
  dispatch(alog.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = alog.data<T>();
    T* out = A.mut<T>();
    for (i64 i = 0; i < D * N; ++i) out[i] = -std::exp(in[i]);
    const T* dl = dt_.data<T>();
    for (i64 i = 0; i < L * D; ++i) {
      check(dl[i] > T(0), "ssm_scan: delta must be positive");
    }
  });

  Tensor states;
  Tensor y = scan_core({ut, dt_, Bt, Ct}, A, Dt, impl, &states, seg);

  auto backward = [ut, dt_, Bt, Ct, A, Dt, states, L, D, N, seg, u, delta, B,
                   C, A_log, D_skip](Tape& tp, i64 self) {
    const Tensor& g = tp.grad_of(self);
    const Dtype dt = g.dtype();
    Tensor du = Tensor::zeros({L, D}, dt);
    Tensor ddelta = Tensor::zeros({L, D}, dt);
    Tensor dB = Tensor::zeros({L, N}, dt);
    Tensor dC = Tensor::zeros({L, N}, dt);
    Tensor dAlog = Tensor::zeros({D, N}, dt);
    Tensor dD = Tensor::zeros({D}, dt);
    dispatch(dt, [&](auto tag) {
      using T = decltype(tag);
      const T* gg = g.data<T>();
      const T* uu = ut.data<T>();
      const T* dl = dt_.data<T>();
      const T* Bb = Bt.data<T>();
      const T* Cc = Ct.data<T>();
      const T* Aa = A.data<T>();
      const T* Dd = Dt.data<T>();
      const T* st = states.data<T>();
      T* duu = du.mut<T>();
      T* ddl = ddelta.mut<T>();
      T* dAl = dAlog.mut<T>();
      T* dDd = dD.mut<T>();

      // dB/dC reduce across channels; each chunk of channels writes its own
      // scratch and the scratches merge in ascending chunk order, so the
      // result does not depend on the worker count.
      const i64 nchunk = (D + kChannelChunk - 1) / kChannelChunk;
      std::vector<std::vector<T>> sB(nchunk), sC(nchunk);
      for (i64 c = 0; c < nchunk; ++c) {
        sB[c].assign(static_cast<size_t>(L * N), T(0));
        sC[c].assign(static_cast<size_t>(L * N), T(0));
      }
      parallel_chunks(D, kChannelChunk, [&](i64 d0, i64 d1) {
        const i64 cid = d0 / kChannelChunk;
        T* __restrict dBs = sB[cid].data();
        T* __restrict dCs = sC[cid].data();
        // Time-major like the forward kernel; the chunk's adjoint states
        // ride across k in one block.
        const i64 W = d1 - d0;
        std::vector<T> p(static_cast<size_t>(W * N)), tdl(N), tdu(N);
        std::vector<T> dDe(static_cast<size_t>(W), T(0));
        const std::vector<T> zero(N, T(0));
        T* __restrict pn_ = p.data();
        T* __restrict td = tdl.data();
        T* __restrict tu = tdu.data();
        for (i64 k0 = L - seg; k0 >= 0; k0 -= seg) {
          std::fill(p.begin(), p.end(), T(0));
          for (i64 k = k0 + seg - 1; k >= k0; --k) {
            const T* __restrict Bk = Bb + k * N;
            const T* __restrict Ck = Cc + k * N;
            T* __restrict dBk = dBs + k * N;
            T* __restrict dCk = dCs + k * N;
            for (i64 d = d0; d < d1; ++d) {
              const T gkd = gg[k * D + d];
              const T dtv = dl[k * D + d];
              const T ud = uu[k * D + d];
              const T dtu = dtv * ud;
              const T* __restrict Ad = Aa + d * N;
              T* __restrict dAld = dAl + d * N;
              const T* __restrict stk = st + (k * D + d) * N;
              const T* __restrict stp =
                  k > k0 ? st + ((k - 1) * D + d) * N : zero.data();
              T* __restrict pd = pn_ + (d - d0) * N;
              // Same split as the forward kernel: one vectorizable pass
              // over n, then fixed-order reductions.
              for (i64 n = 0; n < N; ++n) {
                const T pn = pd[n] + gkd * Ck[n];
                const T a = exp_e<T>(dtv * Ad[n]);
                const T dAbar = pn * stp[n];
                dAld[n] += dAbar * dtv * a;
                td[n] = dAbar * Ad[n] * a + pn * Bk[n] * ud;
                dBk[n] += pn * dtu;
                dCk[n] += gkd * stk[n];
                tu[n] = pn * dtv * Bk[n];
                pd[n] = a * pn;
              }
              duu[k * D + d] = dot_tree(tu, N) + gkd * Dd[d];
              ddl[k * D + d] = dot_tree(td, N);
              dDe[d - d0] += gkd * ud;
            }
          }
        }
        for (i64 d = d0; d < d1; ++d) dDd[d] = dDe[d - d0];
      });
      T* dBb = dB.mut<T>();
      T* dCc = dC.mut<T>();
      for (i64 c = 0; c < nchunk; ++c) {
        for (i64 i = 0; i < L * N; ++i) {
          dBb[i] += sB[c][static_cast<size_t>(i)];
          dCc[i] += sC[c][static_cast<size_t>(i)];
        }
      }
      // A = -exp(A_log), so dA/dA_log = A; dAl currently holds dA.
      for (i64 i = 0; i < D * N; ++i) dAl[i] *= Aa[i];
    });
    du.ensure_finite("ssm_scan backward du");
    ddelta.ensure_finite("ssm_scan backward ddelta");
    tp.accum_grad(u.idx, du);
    tp.accum_grad(delta.idx, ddelta);
    tp.accum_grad(B.idx, dB);
    tp.accum_grad(C.idx, dC);
    tp.accum_grad(A_log.idx, dAlog);
    tp.accum_grad(D_skip.idx, dD);
  };
  return t.emit(std::move(y),
                {u.idx, delta.idx, B.idx, C.idx, A_log.idx, D_skip.idx},
                backward);
}

Var selective_scan(Tape& t, Var u, const SsmVars& p, ScanImpl impl,
                   i64 seg_len) {
  Var delta = softplus(t, linear(t, u, p.W_dt, p.b_dt));
  Var B = linear(t, u, p.W_B);
  Var C = linear(t, u, p.W_C);
  return ssm_scan(t, u, delta, B, C, p.A_log, p.D_skip, impl, seg_len);
}

void init_gate_params(ParamStore& ps, const std::string& prefix, i64 dinner,
                      i64 c, Rng& rng, Dtype dt) {
  ps.add(prefix + ".norm_y_gamma", Tensor::full({dinner}, 1.0, dt));
  ps.add(prefix + ".norm_y_beta", Tensor::zeros({dinner}, dt));
  ps.add(prefix + ".norm_x_gamma", Tensor::full({c}, 1.0, dt));
  ps.add(prefix + ".norm_x_beta", Tensor::zeros({c}, dt));
  const double sg = 1.0 / std::sqrt(static_cast<double>(c));
  const double so = 1.0 / std::sqrt(static_cast<double>(dinner));
  ps.add(prefix + ".w_gate", rng.uniform_tensor({c, dinner}, -sg, sg, dt));
  ps.add(prefix + ".b_gate", Tensor::zeros({dinner}, dt));
  ps.add(prefix + ".w_out", rng.uniform_tensor({dinner, c}, -so, so, dt));
  ps.add(prefix + ".b_out", Tensor::zeros({c}, dt));
}

GateVars bind_gate(Tape& t, ParamStore& ps, const std::string& prefix) {
  GateVars g;
  g.norm_y_gamma = t.param(ps.at(prefix + ".norm_y_gamma"));
  g.norm_y_beta = t.param(ps.at(prefix + ".norm_y_beta"));
  g.norm_x_gamma = t.param(ps.at(prefix + ".norm_x_gamma"));
  g.norm_x_beta = t.param(ps.at(prefix + ".norm_x_beta"));
  g.w_gate = t.param(ps.at(prefix + ".w_gate"));
  g.b_gate = t.param(ps.at(prefix + ".b_gate"));
  g.w_out = t.param(ps.at(prefix + ".w_out"));
  g.b_out = t.param(ps.at(prefix + ".b_out"));
  return g;
}

Var gate_output(Tape& t, Var y, Var x_pre, const GateVars& g) {
  Var ny = layer_norm(t, y, g.norm_y_gamma, g.norm_y_beta);
  Var nx = layer_norm(t, x_pre, g.norm_x_gamma, g.norm_x_beta);
  Var gate = silu(t, linear(t, nx, g.w_gate, g.b_gate));
  Var out = linear(t, mul(t, ny, gate), g.w_out, g.b_out);
  return add(t, out, x_pre);
}

}  // namespace ops
}  // namespace ssmavs
