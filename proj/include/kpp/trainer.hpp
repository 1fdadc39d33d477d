#pragma once

#include "kpp/objective.hpp"

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpp {

enum class Schedule { constant, cosine };

struct TrainConfig {
  ModelConfig model;  // K, L, memory dims, likelihood and the no-memory flag live here
  Index episode_length = 8;
  Index epochs = 30;
  Index batch_episodes = 4;
  Index episodes_per_epoch = 256;
  double lr = 1e-3;
  Schedule schedule = Schedule::cosine;
  Index warmup_epochs = 10;
  double weight_decay = 1e-3;
  std::uint64_t seed = 1;

  void validate() const;
  Index steps_per_epoch() const { return std::max<Index>(1, episodes_per_epoch / batch_episodes); }
};

/// One row of metrics.csv; epochs are numbered from 1.
struct MetricsRow {
  Index epoch = 0;
  Split split = Split::train;
  ElboBreakdown terms;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

std::string metrics_csv_header();
std::string to_csv(const MetricsRow& row);

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flags a run whose epoch loss exceeds 10x the first epoch's for 3 consecutive epochs.
class DivergenceMonitor {
 public:
  /// Records one epoch's negative bound; throws DivergenceError on the third consecutive bad epoch.
  void observe(Index epoch, double loss);

 private:
  bool have_reference_ = false;
  double reference_ = 0.0;
  int bad_epochs_ = 0;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  Index step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Bias-corrected Adam with decoupled weight decay on every tensor except biases.
/// Parameters missing from `grads` are treated as having zero gradient.
void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double weight_decay);

/// Linear warmup lr (epoch + 1) / warmup, then cosine decay with t = (epoch - warmup + 1) / (epochs - warmup + 1),
/// or a constant lr after warmup. `epoch` is zero-based.
double lr_at(const TrainConfig& config, Index epoch);

/// Splits `split` into disjoint episodes of length T, writes each episode's memory and scores the
/// bound on that same episode; the row holds per-image means over all episodes.
MetricsRow eval_conditional(const ModelParams& params, const Dataset& split, Index episode_length, std::uint64_t seed);

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_row;
  std::function<void(const ModelParams&, const MetricsRow&)> on_best;
  bool wall_clock = false;  // off keeps metrics byte-identical across runs
};

struct TrainResult {
  ModelParams final_params;
  ModelParams best_params;
  MetricsRow best_test;
  std::vector<MetricsRow> history;
};

/// Seeds derived from config.seed: parameter init, the episode stream, per-episode noise and evaluation.
std::uint64_t init_seed(const TrainConfig& config);
std::uint64_t eval_seed(const TrainConfig& config);

/// Throws DivergenceError when the train bound is more than 10x worse than its first-epoch value for
/// three consecutive epochs, or when a non-finite value appears.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const TrainHooks& hooks = {});

}  // namespace kpp
