#include "kpp/model.hpp"
#include "kpp/rng.hpp"

#include <cmath>
#include <random>

namespace kpp {
namespace {

constexpr Index kConvKernel = 3;
constexpr Index kConvStride = 2;
constexpr Index kConvPad = 1;
constexpr Index kUpKernel = 4;
constexpr Index kUpStride = 2;
constexpr Index kUpPad = 1;

Index conv_stack_size(Index size, std::size_t layers) {
  for (std::size_t i = 0; i < layers; ++i) size = conv_out_size(size, kConvKernel, kConvStride, kConvPad);
  return size;
}

Index upsample_base(Index size, std::size_t layers, const char* what) {
  const Index factor = Index{1} << layers;
  if (size % factor != 0) {
    throw std::invalid_argument(std::string(what) + ": size " + std::to_string(size) + " is not divisible by " +
                                std::to_string(factor));
  }
  return size / factor;
}

double he_std(Index fan_in, bool relu_follows) { return std::sqrt((relu_follows ? 2.0 : 1.0) / static_cast<double>(fan_in)); }

void add_dense(std::vector<ParameterSpec>& specs, const std::string& prefix, Index in, Index out, double std) {
  specs.push_back({prefix + ".weight", {in, out}, std});
  specs.push_back({prefix + ".bias", {out}, 0.0});
}

void add_conv(std::vector<ParameterSpec>& specs, const std::string& prefix, Index in, Index out) {
  specs.push_back({prefix + ".weight", {out, in, kConvKernel, kConvKernel}, he_std(in * kConvKernel * kConvKernel, true)});
  specs.push_back({prefix + ".bias", {out}, 0.0});
}

void add_tconv(std::vector<ParameterSpec>& specs, const std::string& prefix, Index in, Index out, bool relu_follows) {
  // Each output pixel of a stride-2, 4x4 transposed conv sees 2x2 taps per input channel.
  specs.push_back({prefix + ".weight", {in, out, kUpKernel, kUpKernel}, he_std(in * 4, relu_follows)});
  specs.push_back({prefix + ".bias", {out}, 0.0});
}

void add_upsampler(std::vector<ParameterSpec>& specs, const std::string& prefix, Index in_features,
                   const std::vector<Index>& channels, Index out_channels, Index out_h, Index out_w) {
  if (channels.empty()) {
    add_dense(specs, prefix + ".dense", in_features, out_channels * out_h * out_w, he_std(in_features, false));
    return;
  }
  const Index h0 = upsample_base(out_h, channels.size(), prefix.c_str());
  const Index w0 = upsample_base(out_w, channels.size(), prefix.c_str());
  add_dense(specs, prefix + ".dense", in_features, channels.front() * h0 * w0, he_std(in_features, true));
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const bool last = i + 1 == channels.size();
    add_tconv(specs, prefix + ".tconv" + std::to_string(i), channels[i], last ? out_channels : channels[i + 1], !last);
  }
}

Var dense(const Network& net, const std::string& prefix, Var x) {
  Var w = net[prefix + ".weight"];
  return add(matmul(x, w), broadcast(net[prefix + ".bias"], x.dim(0)));
}

Var conv_layer(const Network& net, const std::string& prefix, Var x) {
  return relu(conv2d(x, net[prefix + ".weight"], net[prefix + ".bias"], kConvStride, kConvPad));
}

Var flatten(Var x) {
  const Index batch = x.dim(0);
  return reshape(x, {batch, x.value().size() / batch});
}

// Dense projection then transposed convs up to [N, out_channels, out_h, out_w].
Var upsample(const Network& net, const std::string& prefix, Var x, const std::vector<Index>& channels,
             Index out_channels, Index out_h, Index out_w) {
  const Index batch = x.dim(0);
  Var h = dense(net, prefix + ".dense", x);
  if (channels.empty()) return reshape(h, {batch, out_channels, out_h, out_w});
  const Index h0 = upsample_base(out_h, channels.size(), prefix.c_str());
  const Index w0 = upsample_base(out_w, channels.size(), prefix.c_str());
  h = reshape(relu(h), {batch, channels.front(), h0, w0});
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::string name = prefix + ".tconv" + std::to_string(i);
    h = conv_transpose2d(h, net[name + ".weight"], net[name + ".bias"], kUpStride, kUpPad);
    if (i + 1 < channels.size()) h = relu(h);
  }
  return h;
}

// FNV-1a of a parameter name.
std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

void require_positive(Index v, const char* what) {
  if (v < 1) throw std::invalid_argument(std::string("model config: ") + what + " must be >= 1");
}

}  // namespace

void ModelConfig::validate() const {
  require_positive(image_channels, "image_channels");
  require_positive(image_height, "image_height");
  require_positive(image_width, "image_width");
  require_positive(embed_dim, "embed_dim");
  require_positive(memory_channels, "memory_channels");
  require_positive(memory_height, "memory_height");
  require_positive(memory_width, "memory_width");
  require_positive(trace_height, "trace_height");
  require_positive(trace_width, "trace_width");
  require_positive(reads, "reads (K)");
  require_positive(latent, "latent (L)");
  for (const auto* list : {&encoder_channels, &writer_channels, &prior_channels, &decoder_channels}) {
    for (Index c : *list) require_positive(c, "layer channels");
  }
  if (likelihood == Likelihood::gaussian && !(gaussian_sigma > 0.0)) {
    throw std::invalid_argument("model config: gaussian_sigma must be positive");
  }
  (void)parameter_specs(*this);  // divisibility checks
}

Index ModelConfig::ablation_hidden() const {
  ModelConfig memory_arm = *this;
  memory_arm.no_memory = false;
  Index target = 0;
  for (const auto& spec : parameter_specs(memory_arm)) {
    if (spec.name.starts_with("writer.") || spec.name.starts_with("prior.")) target += shape_size(spec.shape);
  }
  // embed -> hidden -> 2L: embed*h + h + 2L*h + 2L parameters.
  const double h = static_cast<double>(target - 2 * latent) / static_cast<double>(embed_dim + 1 + 2 * latent);
  return std::max<Index>(1, std::llround(h));
}

std::vector<ParameterSpec> parameter_specs(const ModelConfig& c) {
  std::vector<ParameterSpec> specs;
  const double head_std_scale = c.zero_init_heads ? 0.0 : 1.0;

  Index in = c.image_channels;
  for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
    add_conv(specs, "encoder.conv" + std::to_string(i), in, c.encoder_channels[i]);
    in = c.encoder_channels[i];
  }
  const Index enc_flat = in * conv_stack_size(c.image_height, c.encoder_channels.size()) *
                         conv_stack_size(c.image_width, c.encoder_channels.size());
  add_dense(specs, "encoder.dense", enc_flat, c.embed_dim, he_std(enc_flat, false));

  if (c.no_memory) {
    const Index hidden = c.ablation_hidden();
    add_dense(specs, "ablation.hidden", c.embed_dim, hidden, he_std(c.embed_dim, true));
    add_dense(specs, "ablation.head", hidden, 2 * c.latent, head_std_scale * he_std(hidden, false));
  } else {
    add_upsampler(specs, "writer", c.embed_dim, c.writer_channels, c.memory_channels, c.memory_height, c.memory_width);
    add_dense(specs, "key_head", c.embed_dim, 2 * 3 * c.reads, head_std_scale * he_std(c.embed_dim, false));
    in = c.reads * c.memory_channels;
    for (std::size_t i = 0; i < c.prior_channels.size(); ++i) {
      add_conv(specs, "prior.conv" + std::to_string(i), in, c.prior_channels[i]);
      in = c.prior_channels[i];
    }
    const Index prior_flat = in * conv_stack_size(c.trace_height, c.prior_channels.size()) *
                             conv_stack_size(c.trace_width, c.prior_channels.size());
    add_dense(specs, "prior.head", prior_flat, 2 * c.latent, head_std_scale * he_std(prior_flat, false));
  }

  add_dense(specs, "posterior_head", c.embed_dim, 2 * c.latent, head_std_scale * he_std(c.embed_dim, false));
  add_upsampler(specs, "decoder", c.latent, c.decoder_channels, c.image_channels, c.image_height, c.image_width);
  return specs;
}

Index ModelParams::count() const {
  Index n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

Index ModelParams::count(const std::vector<std::string>& prefixes) const {
  Index n = 0;
  for (const auto& [name, t] : tensors) {
    for (const auto& p : prefixes) {
      if (name.starts_with(p)) {
        n += t.size();
        break;
      }
    }
  }
  return n;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params{config, {}};
  for (const auto& spec : parameter_specs(config)) {
    Tensor t(spec.shape);
    if (spec.init_std > 0.0) {
      std::mt19937_64 engine(derive_seed(seed, name_hash(spec.name)));
      std::normal_distribution<double> dist(0.0, spec.init_std);
      for (Index i = 0; i < t.size(); ++i) t[i] = dist(engine);
    }
    params.tensors.emplace(spec.name, std::move(t));
  }
  return params;
}

Network::Network(Tape& tape, const ModelParams& params, bool trainable)
    : tape_(tape), params_(params), trainable_(trainable) {}

Var Network::operator[](const std::string& name) const {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto it = params_.tensors.find(name);
  if (it == params_.tensors.end()) throw std::out_of_range("model has no parameter '" + name + "'");
  Var v = trainable_ ? tape_.parameter(it->second) : tape_.constant(it->second);
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Tensor> Network::gradients() const {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, v] : bound_) grads.emplace(name, v.grad());
  return grads;
}

Var tsm_shift(Var x) {
  if (x.value().rank() != 4) throw ShapeError("tsm_shift: features must be [T, C, h, w], got " + to_string(x.shape()));
  const Index steps = x.dim(0), channels = x.dim(1);
  const Index fold = channels / 8;
  if (fold == 0) return x;
  Tape& tape = x.tape();
  const Shape edge{1, fold, x.dim(2), x.dim(3)};
  const Shape full{steps, fold, x.dim(2), x.dim(3)};

  Var ahead = slice(x, 1, 0, fold);
  Var behind = slice(x, 1, fold, 2 * fold);
  Var forward = steps > 1 ? concat({tape.constant(Tensor(edge)), slice(ahead, 0, 0, steps - 1)}, 0)
                          : tape.constant(Tensor(full));
  Var backward = steps > 1 ? concat({slice(behind, 0, 1, steps), tape.constant(Tensor(edge))}, 0)
                           : tape.constant(Tensor(full));
  std::vector<Var> parts{forward, backward};
  if (2 * fold < channels) parts.push_back(slice(x, 1, 2 * fold, channels));
  return concat(parts, 1);
}

Var encode(const Network& net, Var images) {
  const ModelConfig& c = net.config();
  const Shape expected{images.dim(0), c.image_channels, c.image_height, c.image_width};
  if (images.value().rank() != 4 || images.shape() != expected || images.dim(0) < 1) {
    throw ShapeError("encode: images " + to_string(images.shape()) + " do not match configured " +
                     to_string(c.image_shape()));
  }
  Var h = images;
  for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
    h = conv_layer(net, "encoder.conv" + std::to_string(i), h);
    if (c.tsm && i + 1 < c.encoder_channels.size()) h = tsm_shift(h);
  }
  return dense(net, "encoder.dense", flatten(h));
}

Var write_memory(const Network& net, Var embeddings) {
  const ModelConfig& c = net.config();
  if (embeddings.dim(0) < 1) throw ShapeError("write_memory: empty episode");
  Var pooled = mean(embeddings, {0}, true);
  Var m = upsample(net, "writer", pooled, c.writer_channels, c.memory_channels, c.memory_height, c.memory_width);
  return reshape(m, c.memory_shape());
}

DiagGaussian key_posterior(const Network& net, Var embeddings) {
  return gaussian_from_head(dense(net, "key_head", embeddings), 3 * net.config().reads);
}

DiagGaussian latent_posterior(const Network& net, Var embeddings) {
  return gaussian_from_head(dense(net, "posterior_head", embeddings), net.config().latent);
}

DiagGaussian readout_prior(const Network& net, const std::vector<TraceSet>& traces) {
  const ModelConfig& c = net.config();
  if (traces.empty()) throw ShapeError("readout_prior: no samples");
  std::vector<Var> rows;
  for (const TraceSet& set : traces) {
    if (static_cast<Index>(set.size()) != c.reads) {
      throw ShapeError("readout_prior: expected " + std::to_string(c.reads) + " traces, got " +
                       std::to_string(set.size()));
    }
    Var stacked = set.stacked();
    rows.push_back(reshape(stacked, {1, stacked.dim(0), stacked.dim(1), stacked.dim(2)}));
  }
  Var h = rows.size() == 1 ? rows.front() : concat(rows, 0);
  for (std::size_t i = 0; i < c.prior_channels.size(); ++i) h = conv_layer(net, "prior.conv" + std::to_string(i), h);
  Var flat = flatten(h);
  return gaussian_from_head(dense(net, "prior.head", flat), c.latent);
}

Var decode(const Network& net, Var z) {
  const ModelConfig& c = net.config();
  if (z.value().rank() != 2 || z.dim(1) != c.latent) {
    throw ShapeError("decode: latent " + to_string(z.shape()) + " is not [N, " + std::to_string(c.latent) + "]");
  }
  return upsample(net, "decoder", z, c.decoder_channels, c.image_channels, c.image_height, c.image_width);
}

DiagGaussian ablation_prior(const Network& net, Var embeddings) {
  const Index steps = embeddings.dim(0);
  Var pooled = mean(embeddings, {0}, true);
  Var head = dense(net, "ablation.head", relu(dense(net, "ablation.hidden", pooled)));
  Var repeated = broadcast(reshape(head, {head.dim(1)}), steps);
  return gaussian_from_head(repeated, net.config().latent);
}

}  // namespace kpp
