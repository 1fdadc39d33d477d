#include "kpp/distributions.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace kpp {
namespace {

std::vector<Index> trailing_axes(const Shape& shape) {
  std::vector<Index> axes(shape.size() - 1);
  std::iota(axes.begin(), axes.end(), Index{1});
  return axes;
}

}  // namespace

DiagGaussian::DiagGaussian(Var m, Var s) : mean(m), log_std(s) {
  if (mean.shape() != log_std.shape() || mean.value().rank() != 2) {
    throw ShapeError("DiagGaussian: mean " + to_string(mean.shape()) + " and log_std " + to_string(log_std.shape()) +
                     " must be matching [batch, dim]");
  }
}

DiagGaussian gaussian_from_head(Var head, Index dim) {
  if (head.value().rank() != 2 || head.dim(1) != 2 * dim) {
    throw ShapeError("gaussian_from_head: head " + to_string(head.shape()) + " is not [batch, " +
                     std::to_string(2 * dim) + "]");
  }
  return {slice(head, 1, 0, dim), clamp(slice(head, 1, dim, 2 * dim), kMinLogStd, kMaxLogStd)};
}

DiagGaussian standard_normal(Tape& tape, Index batch, Index dim) {
  return {tape.constant(Tensor({batch, dim})), tape.constant(Tensor({batch, dim}))};
}

Var reparam_sample(const DiagGaussian& d, const Tensor& noise) {
  if (noise.shape() != d.mean.shape()) {
    throw ShapeError("reparam_sample: noise " + to_string(noise.shape()) + " vs mean " + to_string(d.mean.shape()));
  }
  return add(d.mean, mul(exp(d.log_std), d.mean.tape().constant(noise)));
}

Var kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.mean.shape() != p.mean.shape()) {
    throw ShapeError("kl_diag_gaussians: q " + to_string(q.mean.shape()) + " vs p " + to_string(p.mean.shape()));
  }
  // log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2, with d = log sq - log sp.
  Var d = sub(q.log_std, p.log_std);
  Var diff = sub(q.mean, p.mean);
  Var per_dim = add(sub(scale(exp(scale(d, 2.0)), 0.5), d),
                    add_scalar(scale(mul(square(diff), exp(scale(p.log_std, -2.0))), 0.5), -0.5));
  return sum(per_dim, {1});
}

Var kl_to_standard_normal(const DiagGaussian& q) {
  return kl_diag_gaussians(q, standard_normal(q.mean.tape(), q.batch(), q.dim()));
}

Var bernoulli_log_prob(Var logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("bernoulli_log_prob: logits " + to_string(logits.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  if (!((target.array() == 0.0) || (target.array() == 1.0)).all()) {
    throw std::invalid_argument("bernoulli_log_prob: target must be binary");
  }
  // x * l - softplus(l) never forms probabilities, so saturated logits stay finite.
  Var ll = sub(mul(logits.tape().constant(target), logits), softplus(logits));
  return logits.value().rank() == 1 ? ll : sum(ll, trailing_axes(logits.shape()));
}

Var gaussian_log_prob(Var mean, const Tensor& target, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_log_prob: sigma must be positive");
  if (mean.shape() != target.shape()) {
    throw ShapeError("gaussian_log_prob: mean " + to_string(mean.shape()) + " vs target " + to_string(target.shape()));
  }
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sigma);
  Var z = sub(mean.tape().constant(target), mean);
  Var ll = add_scalar(scale(square(z), -0.5 / (sigma * sigma)), log_norm);
  return mean.value().rank() == 1 ? ll : sum(ll, trailing_axes(mean.shape()));
}

}  // namespace kpp
