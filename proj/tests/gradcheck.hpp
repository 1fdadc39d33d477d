#pragma once

// Central finite-difference oracle for the tape. Test-only; it never calls a
// backward rule when computing the numeric side.

#include "kpp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace kpp::testing {

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double evaluate(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).value().item();
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const double denom = std::max(a.matrix().norm(), b.matrix().norm());
  if (denom == 0.0) return 0.0;
  return (a - b).matrix().norm() / denom;
}

inline Eigen::ArrayXd numeric_gradient(const LossBuilder& build, std::vector<Tensor> inputs, std::size_t which,
                                       double h = 1e-5) {
  Eigen::ArrayXd g(inputs[which].size());
  for (Index i = 0; i < inputs[which].size(); ++i) {
    const double x0 = inputs[which][i];
    inputs[which][i] = x0 + h;
    const double fp = evaluate(build, inputs);
    inputs[which][i] = x0 - h;
    const double fm = evaluate(build, inputs);
    inputs[which][i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Largest per-input relative error between tape gradients and central differences.
inline double gradcheck(const LossBuilder& build, const std::vector<Tensor>& inputs, double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  Var loss = build(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    worst = std::max(worst, relative_error(vars[k].grad().array(), numeric_gradient(build, inputs, k, h)));
  }
  return worst;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Values with |x| in [margin, 1], away from kinks at zero.
inline Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape, double margin = 0.05) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = sign(rng) ? u(rng) : -u(rng);
  return t;
}

/// Projects an arbitrary-shape output to a scalar with fixed random weights.
inline Var weighted_sum(Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var w = out.tape().constant(random_tensor(rng, out.shape()));
  return sum_all(mul(out, w));
}

}  // namespace kpp::testing
