#pragma once

#include <memory>

#include "ssmavs/tape.hpp"

namespace ssmavs::ops {

// Elementwise arithmetic on same-shaped operands.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var div(Tape& t, Var a, Var b);

// x + b where b's shape is a trailing suffix of x's shape (bias patterns).
Var add_bias(Tape& t, Var x, Var b);
// Elementwise multiply by a non-learnable tensor (masks, weightings);
// c must be same-shaped or a trailing suffix.
Var mul_const(Tape& t, Var x, const Tensor& c);
Var scale(Tape& t, Var x, double c);
Var add_scalar(Tape& t, Var x, double c);

// y = x·w (+ b). Trailing axis of x contracts with w's first axis.
// w: [Din,Dout], optional b: [Dout].
Var linear(Tape& t, Var x, Var w, Var b = Var{});

// Normalizes the trailing channel axis per position, then applies the
// affine gamma/beta (both shaped [C]).
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);

Var silu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var softplus(Tape& t, Var x);

// Depthwise causal 1D convolution. x: [T,C], k: [K,C], optional bias [C].
// y_t sums k[j]*x[t-K+1+j], zero history to the left; position t never sees
// inputs after t.
Var causal_conv1d(Tape& t, Var x, Var k, Var bias = Var{});

// Depthwise "same" convolutions with odd kernel extents and zero padding.
// 2D: x [T,H,W,C], k [kh,kw,C]. 3D: x [T,H,W,C], k [kt,kh,kw,C].
Var depthwise_conv2d(Tape& t, Var x, Var k, Var bias = Var{});
Var depthwise_conv3d(Tape& t, Var x, Var k, Var bias = Var{});

Var reshape(Tape& t, Var x, Shape shape);
Var permute(Tape& t, Var x, std::vector<i64> axes);
Var reverse_axis(Tape& t, Var x, i64 axis);

// Row-indexed ops treat x as [L,C] (rank 2). gather_rows reads row idx[i]
// into output row i; repeated indices are allowed and backward scatter-adds.
Var gather_rows(Tape& t, Var x,
                std::shared_ptr<const std::vector<i64>> idx);
Var slice_rows(Tape& t, Var x, i64 begin, i64 len);
Var concat_rows(Tape& t, Var a, Var b);
// Concatenate along the trailing axis: [L,Ca] ++ [L,Cb] -> [L,Ca+Cb].
Var concat_cols(Tape& t, Var a, Var b);

Var sum_all(Tape& t, Var x);  // -> [1]
// Sums over all axes at and after keep_axes: [d0..dk-1, rest...] -> [d0..dk-1].
Var reduce_trailing(Tape& t, Var x, i64 keep_axes);

// Per-frame inner product: out[t,y,x,0] = <feat[t,y,x,:], q[t,:]>.
Var frame_dot(Tape& t, Var feat, Var q);

// Bilinear 2x upsampling of [T,H,W,C] over H and W, half-pixel centers
// (align_corners=false), edge-clamped.
Var bilinear_up2(Tape& t, Var x);

// Elementwise binary cross-entropy between logits z and constant targets in
// [0,1], computed in the numerically stable max/log1p form.
Var bce_with_logits(Tape& t, Var z, const Tensor& target);

}  // namespace ssmavs::ops
