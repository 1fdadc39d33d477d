#pragma once

#include "kpp/ops.hpp"

namespace kpp {

inline constexpr double kMinLogStd = -7.0;
inline constexpr double kMaxLogStd = 2.0;

/// Diagonal Gaussian over the trailing axis of a [batch, dim] pair.
struct DiagGaussian {
  Var mean;
  Var log_std;

  DiagGaussian(Var mean, Var log_std);
  Index batch() const { return mean.dim(0); }
  Index dim() const { return mean.dim(1); }
};

/// Splits a head output [batch, 2 * dim] into (mean, clamped log_std).
DiagGaussian gaussian_from_head(Var head, Index dim);

/// N(0, 1) with the given shape, as constants on the tape.
DiagGaussian standard_normal(Tape& tape, Index batch, Index dim);

/// mean + exp(log_std) * noise.
Var reparam_sample(const DiagGaussian& d, const Tensor& noise);

/// Closed-form KL(q || p) summed over dim -> [batch].
Var kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p);

/// KL(q || N(0, 1)) summed over dim -> [batch].
Var kl_to_standard_normal(const DiagGaussian& q);

/// Bernoulli log-likelihood from logits, summed over all non-batch axes -> [batch].
/// Target values must be exactly 0 or 1.
Var bernoulli_log_prob(Var logits, const Tensor& target);

/// Fixed-sigma Gaussian log density summed over all non-batch axes -> [batch].
Var gaussian_log_prob(Var mean, const Tensor& target, double sigma);

}  // namespace kpp
