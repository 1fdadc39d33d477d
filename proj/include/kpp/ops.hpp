#pragma once

#include "kpp/tape.hpp"

#include <vector>

namespace kpp {

// Differentiable primitives. Every op records a backward rule on the operands'
// tape and fails with ShapeError (naming the op and shapes) on non-conforming input.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// [m, k] x [k, n] -> [m, n]
Var matmul(Var a, Var b);

/// x [N, C, H, W], weight [O, C, kh, kw], bias [O] (or unbound) -> [N, O, Ho, Wo].
Var conv2d(Var x, Var weight, Var bias, Index stride, Index padding);
/// x [N, Ci, H, W], weight [Ci, Co, kh, kw], bias [Co] (or unbound) -> [N, Co, Ho, Wo]
/// with Ho = (H - 1) * stride - 2 * padding + kh. Adjoint of conv2d in x.
Var conv_transpose2d(Var x, Var weight, Var bias, Index stride, Index padding);

Var sum(Var x, const std::vector<Index>& axes, bool keepdims = false);
Var mean(Var x, const std::vector<Index>& axes, bool keepdims = false);

Var exp(Var x);
Var log(Var x);
Var softplus(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
Var relu(Var x);

/// Repeats x along a new leading axis: shape S -> [batch, S...].
Var broadcast(Var x, Index batch);
Var concat(const std::vector<Var>& xs, Index axis);
/// Half-open range [begin, end) along one axis.
Var slice(Var x, Index axis, Index begin, Index end);
Var reshape(Var x, Shape shape);

// Compositions of the primitives above.

Var full_like(Var x, double value);
Var scale(Var x, double factor);
Var add_scalar(Var x, double value);
Var square(Var x);
Var sum_all(Var x);
Var mean_all(Var x);
/// min(max(x, lo), hi) written as lo + relu(x - lo) - relu(x - hi).
Var clamp(Var x, double lo, double hi);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// Output spatial size of a strided convolution.
constexpr Index conv_out_size(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}
constexpr Index conv_transpose_out_size(Index in, Index kernel, Index stride, Index padding) {
  return (in - 1) * stride - 2 * padding + kernel;
}

}  // namespace kpp
