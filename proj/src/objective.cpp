#include "kpp/objective.hpp"

#include <cmath>
#include <numbers>
#include <optional>

namespace kpp {
namespace {

template <class F>
auto term(const char* name, F&& f) {
  try {
    return f();
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string("elbo: non-finite ") + name + " (" + e.what() + ")");
  }
}

void require_finite(const Tensor& t, const char* name) {
  if (!t.all_finite()) throw NonFiniteError(std::string("elbo: non-finite ") + name);
}

void require_memory_arm(const ModelParams& params, const char* what) {
  if (params.config.no_memory) throw std::invalid_argument(std::string(what) + " needs a model with memory");
}

std::vector<TraceSet> read_all(Var memory, Var raw_keys, const ModelConfig& c) {
  // raw_keys: [N, K * 3]
  std::vector<TraceSet> sets;
  for (Index i = 0; i < raw_keys.dim(0); ++i) {
    Var keys = reshape(slice(raw_keys, 0, i, i + 1), {c.reads, 3});
    sets.push_back(read_traces(memory, keys, c.trace_height, c.trace_width));
  }
  return sets;
}

Tensor output_mean(const ModelConfig& c, Var decoded) {
  return c.likelihood == Likelihood::bernoulli ? sigmoid(decoded).value() : decoded.value();
}

Tensor decode_prior_mean(const Network& net, Var memory, Var raw_keys) {
  DiagGaussian prior = readout_prior(net, read_all(memory, raw_keys, net.config()));
  return output_mean(net.config(), decode(net, prior.mean));
}

}  // namespace

ElboBreakdown ElboGraph::values() const {
  return {recon_ll.value().item(), kl_z.value().item(), kl_y.value().item(), elbo.value().item()};
}

ElboGraph elbo_graph(const Network& net, const Tensor& images, std::uint64_t seed) {
  const ModelConfig& c = net.config();
  Tape& tape = net.tape();
  require_finite(images, "input images");
  const Index steps = images.dim(0);

  Rng rng(seed);
  const Tensor noise_y = rng.normal({steps, 3 * c.reads});
  const Tensor noise_z = rng.normal({steps, c.latent});

  Var x = tape.constant(images);
  Var embeddings = term("embedding", [&] { return encode(net, x); });

  std::optional<DiagGaussian> prior;
  Var kl_y;
  if (c.no_memory) {
    prior = term("ablation prior", [&] { return ablation_prior(net, embeddings); });
    kl_y = tape.constant(Tensor::scalar(0.0));
  } else {
    DiagGaussian q_y = term("key posterior", [&] { return key_posterior(net, embeddings); });
    Var y = term("key sample", [&] { return reparam_sample(q_y, noise_y); });
    Var memory = term("memory", [&] { return write_memory(net, embeddings); });
    auto traces = term("memory traces", [&] { return read_all(memory, y, c); });
    prior = term("readout prior", [&] { return readout_prior(net, traces); });
    kl_y = term("kl_y", [&] { return mean_all(kl_to_standard_normal(q_y)); });
  }

  DiagGaussian q_z = term("latent posterior", [&] { return latent_posterior(net, embeddings); });
  Var z = term("latent sample", [&] { return reparam_sample(q_z, noise_z); });
  Var decoded = term("decoder output", [&] { return decode(net, z); });
  Var recon = term("recon_ll", [&] {
    return mean_all(c.likelihood == Likelihood::bernoulli ? bernoulli_log_prob(decoded, images)
                                                          : gaussian_log_prob(decoded, images, c.gaussian_sigma));
  });
  Var kl_z = term("kl_z", [&] { return mean_all(kl_diag_gaussians(q_z, *prior)); });
  Var bound = term("elbo", [&] { return sub(sub(recon, kl_z), kl_y); });
  return {recon, kl_z, kl_y, bound};
}

ElboBreakdown elbo(const Episode& episode, const ModelParams& params, std::uint64_t seed) {
  Tape tape;
  Network net(tape, params, false);
  return elbo_graph(net, episode.images, seed).values();
}

double bits_per_dim(double nats_per_image, Index pixels) {
  return nats_per_image / (std::numbers::ln2 * static_cast<double>(pixels));
}

Tensor build_memory(const ModelParams& params, const Tensor& images) {
  require_memory_arm(params, "build_memory");
  Tape tape;
  Network net(tape, params, false);
  return write_memory(net, encode(net, tape.constant(images))).value();
}

Tensor generate_from_keys(const ModelParams& params, const Tensor& memory, const Tensor& raw_keys) {
  require_memory_arm(params, "generate");
  const ModelConfig& c = params.config;
  if (raw_keys.rank() != 3 || raw_keys.dim(1) != c.reads || raw_keys.dim(2) != 3 || raw_keys.dim(0) < 1) {
    throw ShapeError("generate: keys " + to_string(raw_keys.shape()) + " are not [n, " + std::to_string(c.reads) +
                     ", 3]");
  }
  if (memory.shape() != c.memory_shape()) {
    throw ShapeError("generate: memory " + to_string(memory.shape()) + " is not " + to_string(c.memory_shape()));
  }
  Tape tape;
  Network net(tape, params, false);
  Var keys = tape.constant(raw_keys.reshaped({raw_keys.dim(0), 3 * c.reads}));
  return decode_prior_mean(net, tape.constant(memory), keys);
}

Tensor generate(const Tensor& memory, Index n, const ModelParams& params, std::uint64_t seed, Tensor* keys_out) {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  Rng rng(seed);
  Tensor keys = rng.normal({n, params.config.reads, 3});
  Tensor images = generate_from_keys(params, memory, keys);
  if (keys_out) *keys_out = std::move(keys);
  return images;
}

Tensor perturbed_generate(const Tensor& memory, const Tensor& base_keys, double eps_std, Index n,
                          const ModelParams& params, std::uint64_t seed, Tensor* keys_out) {
  if (!(eps_std > 0.0)) throw std::invalid_argument("perturbed_generate: eps_std must be > 0");
  if (n < 1) throw std::invalid_argument("perturbed_generate: n must be >= 1");
  const Index k = params.config.reads;
  if (base_keys.shape() != Shape{k, 3}) {
    throw ShapeError("perturbed_generate: base keys " + to_string(base_keys.shape()) + " are not [" +
                     std::to_string(k) + ", 3]");
  }
  Rng rng(seed);
  Tensor keys = rng.normal({n, k, 3}, eps_std);
  for (Index i = 0; i < n; ++i) keys.array().segment(i * 3 * k, 3 * k) += base_keys.array();
  Tensor images = generate_from_keys(params, memory, keys);
  if (keys_out) *keys_out = std::move(keys);
  return images;
}

std::vector<Tensor> iterative_read(const Tensor& memory, const Tensor& x_init, Index steps, const ModelParams& params,
                                   std::uint64_t seed) {
  require_memory_arm(params, "iterative_read");
  const ModelConfig& c = params.config;
  if (steps < 1) throw std::invalid_argument("iterative_read: steps must be >= 1");
  if (x_init.shape() != c.image_shape()) {
    throw ShapeError("iterative_read: image " + to_string(x_init.shape()) + " is not " + to_string(c.image_shape()));
  }
  Rng rng(seed);
  std::vector<Tensor> trajectory;
  Tensor current = x_init;
  for (Index step = 0; step < steps; ++step) {
    Tape tape;
    Network net(tape, params, false);
    Var x = tape.constant(current.reshaped({1, c.image_channels, c.image_height, c.image_width}));
    DiagGaussian q_y = key_posterior(net, encode(net, x));
    Var y = reparam_sample(q_y, rng.normal({1, 3 * c.reads}));
    current = decode_prior_mean(net, tape.constant(memory), y).reshaped(c.image_shape());
    trajectory.push_back(current);
  }
  return trajectory;
}

double l2_distance(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("l2_distance: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return std::sqrt((a.array() - b.array()).square().sum());
}

DenoiseResult denoise(const Tensor& memory, const Tensor& x_clean, const NoiseSpec& noise, Index steps,
                      const ModelParams& params, std::uint64_t seed) {
  DenoiseResult r;
  r.noisy = inject_noise(x_clean, noise, derive_seed(seed, 0));
  r.trajectory = iterative_read(memory, r.noisy, steps, params, derive_seed(seed, 1));
  r.errors.push_back(l2_distance(r.noisy, x_clean));
  for (const Tensor& x : r.trajectory) r.errors.push_back(l2_distance(x, x_clean));
  return r;
}

}  // namespace kpp
