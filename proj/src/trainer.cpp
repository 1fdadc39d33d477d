#include "kpp/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace kpp {
namespace {

enum Stream : std::uint64_t { kInit = 0, kEpisodes = 1, kNoise = 2, kEval = 3 };

bool is_bias(const std::string& name) { return name.ends_with(".bias"); }

void accumulate(ElboBreakdown& acc, const ElboBreakdown& b, double weight) {
  acc.recon_ll += weight * b.recon_ll;
  acc.kl_z += weight * b.kl_z;
  acc.kl_y += weight * b.kl_y;
  acc.elbo += weight * b.elbo;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (episode_length < 1) throw std::invalid_argument("T must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_episodes < 1) throw std::invalid_argument("batch must be >= 1");
  if (episodes_per_epoch < 1) throw std::invalid_argument("episodes per epoch must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (warmup_epochs < 0) throw std::invalid_argument("warmup must be >= 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
}

std::string metrics_csv_header() { return "epoch,split,elbo,recon_ll,kl_z,kl_y,wall_seconds,seed"; }

std::string to_csv(const MetricsRow& r) {
  return std::to_string(r.epoch) + "," + (r.split == Split::train ? "train" : "test") + "," +
         format_double(r.terms.elbo) + "," + format_double(r.terms.recon_ll) + "," + format_double(r.terms.kl_z) + "," +
         format_double(r.terms.kl_y) + "," + format_double(r.wall_seconds) + "," + std::to_string(r.seed);
}

void DivergenceMonitor::observe(Index epoch, double loss) {
  if (!have_reference_) {
    have_reference_ = true;
    reference_ = loss;
    return;
  }
  if (!(loss <= 10.0 * std::abs(reference_))) {
    if (++bad_epochs_ >= 3) {
      throw DivergenceError("training diverged: negative bound " + format_double(loss) + " at epoch " +
                            std::to_string(epoch) + " exceeds 10x the first-epoch value " + format_double(reference_) +
                            " for 3 consecutive epochs");
    }
  } else {
    bad_epochs_ = 0;
  }
}

void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double weight_decay) {
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.tensors) {
    auto mit = state.m.try_emplace(name, Tensor::zeros_like(p)).first;
    auto vit = state.v.try_emplace(name, Tensor::zeros_like(p)).first;
    Eigen::ArrayXd& m = mit->second.array();
    Eigen::ArrayXd& v = vit->second.array();
    auto git = grads.find(name);
    if (git != grads.end()) {
      if (git->second.size() != p.size()) {
        throw ShapeError("adam_step: gradient for '" + name + "' has shape " + to_string(git->second.shape()));
      }
      const Eigen::ArrayXd& g = git->second.array();
      m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
      v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g.square();
    } else {
      m *= kAdamBeta1;
      v *= kAdamBeta2;
    }
    const double decay = is_bias(name) ? 0.0 : weight_decay;
    p.array() -= lr * ((m / c1) / ((v / c2).sqrt() + kAdamEps) + decay * p.array());
  }
}

double lr_at(const TrainConfig& c, Index epoch) {
  if (epoch < 0 || epoch >= c.epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.epochs) + ")");
  }
  if (epoch < c.warmup_epochs) {
    return c.lr * static_cast<double>(epoch + 1) / static_cast<double>(c.warmup_epochs);
  }
  if (c.schedule == Schedule::constant) return c.lr;
  const double t = static_cast<double>(epoch - c.warmup_epochs + 1) / static_cast<double>(c.epochs - c.warmup_epochs + 1);
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

MetricsRow eval_conditional(const ModelParams& params, const Dataset& split, Index episode_length, std::uint64_t seed) {
  if (split.size() < episode_length) {
    throw std::invalid_argument("eval_conditional: split of " + std::to_string(split.size()) +
                                " images is smaller than T = " + std::to_string(episode_length));
  }
  const auto episodes = partition_episodes(split, episode_length, seed);
  MetricsRow row;
  row.split = split.split;
  row.seed = seed;
  const double weight = 1.0 / static_cast<double>(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    accumulate(row.terms, elbo(episodes[i], params, derive_seed(seed, i)), weight);
  }
  row.terms.elbo = row.terms.recon_ll - row.terms.kl_z - row.terms.kl_y;
  return row;
}

std::uint64_t init_seed(const TrainConfig& config) { return derive_seed(config.seed, kInit); }
std::uint64_t eval_seed(const TrainConfig& config) { return derive_seed(config.seed, kEval); }

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set, const TrainHooks& hooks) {
  config.validate();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto elapsed = [&] {
    return hooks.wall_clock ? std::chrono::duration<double>(Clock::now() - start).count() : 0.0;
  };
  auto emit = [&](TrainResult& result, const MetricsRow& row) {
    result.history.push_back(row);
    if (hooks.on_row) hooks.on_row(row);
  };

  TrainResult result;
  result.final_params = init_params(config.model, init_seed(config));
  ModelParams& params = result.final_params;
  AdamState state;
  EpisodeSampler sampler(train_set, config.episode_length, derive_seed(config.seed, kEpisodes));
  const std::uint64_t noise_root = derive_seed(config.seed, kNoise);
  std::uint64_t episode_counter = 0;

  DivergenceMonitor monitor;
  bool have_best = false;

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    ElboBreakdown epoch_terms;
    const Index steps = config.steps_per_epoch();
    const double weight = 1.0 / static_cast<double>(steps * config.batch_episodes);
    try {
      for (Index step = 0; step < steps; ++step) {
        Tape tape;
        Network net(tape, params, true);
        std::vector<Var> bounds;
        for (Index b = 0; b < config.batch_episodes; ++b) {
          ElboGraph g = elbo_graph(net, sampler.next().images, derive_seed(noise_root, episode_counter++));
          accumulate(epoch_terms, g.values(), weight);
          bounds.push_back(g.elbo);
        }
        Var total = bounds.size() == 1 ? bounds.front() : sum_all(concat(bounds, 0));
        tape.backward(scale(total, -1.0 / static_cast<double>(config.batch_episodes)));
        adam_step(params, net.gradients(), state, lr, config.weight_decay);
      }
    } catch (const NonFiniteError& e) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    for (const auto& [name, t] : params.tensors) {
      if (!t.all_finite()) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) + ": parameter '" + name +
                              "' is not finite");
      }
    }
    epoch_terms.elbo = epoch_terms.recon_ll - epoch_terms.kl_z - epoch_terms.kl_y;

    MetricsRow train_row{epoch + 1, Split::train, epoch_terms, elapsed(), config.seed};
    emit(result, train_row);
    MetricsRow test_row = eval_conditional(params, test_set, config.episode_length, eval_seed(config));
    test_row.epoch = epoch + 1;
    test_row.split = Split::test;
    test_row.seed = config.seed;
    test_row.wall_seconds = elapsed();
    emit(result, test_row);

    if (!have_best || test_row.terms.elbo > result.best_test.terms.elbo) {
      have_best = true;
      result.best_params = params;
      result.best_test = test_row;
      if (hooks.on_best) hooks.on_best(params, test_row);
    }

    monitor.observe(epoch + 1, -epoch_terms.elbo);
  }
  return result;
}

}  // namespace kpp
