#pragma once

#include "kpp/distributions.hpp"
#include "kpp/stn.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace kpp {

enum class Likelihood { bernoulli, gaussian };

/// Architecture of every network in the model. Conv layers use 3x3 kernels with stride 2,
/// transposed convs 4x4 with stride 2 (each doubles the spatial size).
struct ModelConfig {
  Index image_channels = 1;
  Index image_height = 16;
  Index image_width = 16;

  std::vector<Index> encoder_channels{16, 32, 32};
  Index embed_dim = 128;
  bool tsm = true;

  Index memory_channels = 3;
  Index memory_height = 64;
  Index memory_width = 64;
  /// Channels of the dense projection followed by one entry per upsampling layer but the last.
  std::vector<Index> writer_channels{32, 16, 8};

  Index trace_height = 16;
  Index trace_width = 16;
  Index reads = 2;    // K
  Index latent = 64;  // L

  std::vector<Index> prior_channels{16, 32};
  std::vector<Index> decoder_channels{32, 16};

  bool no_memory = false;
  Likelihood likelihood = Likelihood::bernoulli;
  double gaussian_sigma = 0.1;
  bool zero_init_heads = true;

  void validate() const;
  Shape image_shape() const { return {image_channels, image_height, image_width}; }
  Shape memory_shape() const { return {memory_channels, memory_height, memory_width}; }
  Index pixels() const { return image_channels * image_height * image_width; }
  /// Hidden width of the no-memory prior head, chosen so its parameter count matches
  /// the memory writer plus the readout prior.
  Index ablation_hidden() const;
};

/// An exchangeable set of T images written into one memory.
struct Episode {
  Tensor images;                    // [T, C, H, W]
  std::vector<Index> dataset_ids;   // source index of each image

  Index length() const { return images.dim(0); }
};

struct ParameterSpec {
  std::string name;
  Shape shape;
  double init_std;  // 0 => zeros
};

/// Every trainable tensor implied by the config, in initialization order.
std::vector<ParameterSpec> parameter_specs(const ModelConfig& config);

struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  Index count() const;
  /// Number of scalars whose name starts with any of the prefixes.
  Index count(const std::vector<std::string>& prefixes) const;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Parameters bound to a tape. Leaves are created on first use, so unused
/// subnetworks never enter the graph.
class Network {
 public:
  Network(Tape& tape, const ModelParams& params, bool trainable = true);

  Tape& tape() const { return tape_; }
  const ModelConfig& config() const { return params_.config; }
  Var operator[](const std::string& name) const;
  /// Gradients of every bound parameter after a backward pass.
  std::map<std::string, Tensor> gradients() const;

 private:
  Tape& tape_;
  const ModelParams& params_;
  bool trainable_;
  mutable std::map<std::string, Var> bound_;
};

/// Shifts the first C/8 channels one step forward along the episode axis and the next C/8
/// one step backward, zero-filling at the episode ends.
Var tsm_shift(Var features);

/// Per-sample embeddings [T, embed_dim] of images [T, C, H, W].
Var encode(const Network& net, Var images);
/// Mean-pools embeddings over the episode and decodes a memory [C, H, W].
Var write_memory(const Network& net, Var embeddings);
/// q(Y|X) over [T, K * 3].
DiagGaussian key_posterior(const Network& net, Var embeddings);
/// q(Z|X) over [T, L].
DiagGaussian latent_posterior(const Network& net, Var embeddings);
/// p(Z | traces) over [T, L]; one TraceSet of exactly K traces per sample.
DiagGaussian readout_prior(const Network& net, const std::vector<TraceSet>& traces);
/// Bernoulli logits or Gaussian means [N, C, H, W] for latents [N, L].
Var decode(const Network& net, Var z);
/// p(Z|E) for the no-memory arm: pooled embedding through a dense head, repeated over T.
DiagGaussian ablation_prior(const Network& net, Var embeddings);

/// Self-describing binary checkpoint: "KPP1" then (name length, name, rank, dims, float64 data)
/// per tensor, little-endian. The architecture travels as "meta.*" tensors.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace kpp
