#pragma once

#include "kpp/data.hpp"
#include "kpp/model.hpp"

#include <cstdint>
#include <vector>

namespace kpp {

/// Per-image terms in nats, averaged over an episode.
struct ElboBreakdown {
  double recon_ll = 0.0;
  double kl_z = 0.0;
  double kl_y = 0.0;
  double elbo = 0.0;
};

/// The same terms as scalars on a tape, ready for backward.
struct ElboGraph {
  Var recon_ll;
  Var kl_z;
  Var kl_y;
  Var elbo;

  ElboBreakdown values() const;
};

/// Builds the conditional bound for one episode [T, C, H, W]: write, read with one reparameterized
/// key draw, one latent draw from the posterior, decode. Noise comes from `seed` alone.
/// A non-finite value raises NonFiniteError naming the first offending term.
ElboGraph elbo_graph(const Network& net, const Tensor& images, std::uint64_t seed);

ElboBreakdown elbo(const Episode& episode, const ModelParams& params, std::uint64_t seed);

double bits_per_dim(double nats_per_image, Index pixels);

/// Deterministic memory [C, H, W] written from images [T, C, H, W].
Tensor build_memory(const ModelParams& params, const Tensor& images);

/// Decoded prior means for raw keys [n, K, 3]: probabilities (Bernoulli) or means (Gaussian).
Tensor generate_from_keys(const ModelParams& params, const Tensor& memory, const Tensor& raw_keys);

/// n images from keys drawn from N(0, 1); the keys are returned through `keys_out` when given.
Tensor generate(const Tensor& memory, Index n, const ModelParams& params, std::uint64_t seed,
                Tensor* keys_out = nullptr);

/// n images from base_keys [K, 3] plus N(0, eps_std^2) perturbations.
Tensor perturbed_generate(const Tensor& memory, const Tensor& base_keys, double eps_std, Index n,
                          const ModelParams& params, std::uint64_t seed, Tensor* keys_out = nullptr);

/// Repeatedly re-infers keys from the current image [C, H, W] and decodes the readout-prior mean,
/// holding the memory fixed. Returns one image per step.
std::vector<Tensor> iterative_read(const Tensor& memory, const Tensor& x_init, Index steps, const ModelParams& params,
                                   std::uint64_t seed);

double l2_distance(const Tensor& a, const Tensor& b);

struct DenoiseResult {
  Tensor noisy;
  std::vector<Tensor> trajectory;
  std::vector<double> errors;  // errors[0] is noisy vs clean, errors[k] is step k vs clean
};

DenoiseResult denoise(const Tensor& memory, const Tensor& x_clean, const NoiseSpec& noise, Index steps,
                      const ModelParams& params, std::uint64_t seed);

}  // namespace kpp
