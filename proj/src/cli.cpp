#include "kpp/cli.hpp"

#include "kpp/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#ifndef KPP_VERSION
#define KPP_VERSION "0.0.0"
#endif

namespace kpp::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSynthTrainSeed = 1001;
constexpr std::uint64_t kSynthTestSeed = 2002;
constexpr std::uint64_t kBinarizeTrainSeed = 11;
constexpr std::uint64_t kBinarizeTestSeed = 12;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string zero_pad(Index v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max<int>(0, width - static_cast<int>(s.size()))), '0') + s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> items;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

Index parse_index(const std::string& s, const char* what) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw UsageError(std::string(what) + ": '" + s + "' is not an integer");
  return static_cast<Index>(v);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Option groups

struct DataOptions {
  std::string source = "synth";
  Index image_size = 16;
  Index train_size = 2048;
  Index test_size = 512;

  void add(CLI::App* app, bool with_train) {
    app->add_option("--data", source, "synth, or a directory holding MNIST IDX files");
    app->add_option("--image-size", image_size, "Side length of synth images")->check(CLI::Range(8, 4096));
    if (with_train) app->add_option("--train-size", train_size, "Training images (0 = all)")->check(CLI::NonNegativeNumber);
    app->add_option("--test-size", test_size, "Test images (0 = all)")->check(CLI::NonNegativeNumber);
  }

  void snapshot(json& j, bool with_train) const {
    j["data"] = source;
    j["image_size"] = image_size;
    if (with_train) j["train_size"] = train_size;
    j["test_size"] = test_size;
  }
};

struct Splits {
  Dataset train;
  Dataset test;
};

Dataset head(Dataset d, Index n) {
  if (n == 0 || n >= d.size()) return d;
  std::vector<Index> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  d.images = d.gather(ids);
  if (!d.labels.empty()) d.labels.resize(static_cast<std::size_t>(n));
  return d;
}

Splits load_data(const DataOptions& o, Likelihood likelihood, bool need_train) {
  Splits s;
  if (o.source == "synth") {
    const Index train_n = o.train_size == 0 ? 2048 : o.train_size;
    const Index test_n = o.test_size == 0 ? 512 : o.test_size;
    if (need_train) s.train = synth_shapes(train_n, o.image_size, o.image_size, kSynthTrainSeed, Split::train);
    s.test = synth_shapes(test_n, o.image_size, o.image_size, kSynthTestSeed, Split::test);
    return s;
  }
  const fs::path dir(o.source);
  if (!fs::is_directory(dir)) throw DataError("--data: '" + o.source + "' is neither 'synth' nor a directory");
  auto prepare = [&](const char* file, Split split, Index n, std::uint64_t seed) {
    Dataset d = head(load_idx(dir / file, split), n);
    return likelihood == Likelihood::bernoulli ? binarize(d, BinarizeMode::stochastic, seed) : d;
  };
  if (need_train) s.train = prepare("train-images-idx3-ubyte", Split::train, o.train_size, kBinarizeTrainSeed);
  s.test = prepare("t10k-images-idx3-ubyte", Split::test, o.test_size, kBinarizeTestSeed);
  return s;
}

struct TrainOptions {
  TrainConfig config;
  Index memory_size = 64;
  Index trace_size = 16;
  std::string schedule = "cosine";
  std::string likelihood = "bernoulli";
  bool no_memory = false;
  bool wall_clock = false;

  void add(CLI::App* app) {
    app->add_option("--T", config.episode_length, "Episode length")->check(CLI::PositiveNumber);
    app->add_option("--K", config.model.reads, "Memory reads per sample")->check(CLI::PositiveNumber);
    app->add_option("--L", config.model.latent, "Latent width")->check(CLI::PositiveNumber);
    app->add_option("--epochs", config.epochs)->check(CLI::PositiveNumber);
    app->add_option("--seed", config.seed);
    app->add_option("--batch", config.batch_episodes, "Episodes per optimizer step")->check(CLI::PositiveNumber);
    app->add_option("--episodes-per-epoch", config.episodes_per_epoch)->check(CLI::PositiveNumber);
    app->add_option("--lr", config.lr)->check(CLI::PositiveNumber);
    app->add_option("--schedule", schedule)->check(CLI::IsMember({"constant", "cosine"}));
    app->add_option("--warmup", config.warmup_epochs)->check(CLI::NonNegativeNumber);
    app->add_option("--weight-decay", config.weight_decay)->check(CLI::NonNegativeNumber);
    app->add_option("--likelihood", likelihood)->check(CLI::IsMember({"bernoulli", "gaussian"}));
    app->add_option("--sigma", config.model.gaussian_sigma, "Gaussian output std")->check(CLI::PositiveNumber);
    app->add_option("--memory-size", memory_size, "Memory side length")->check(CLI::PositiveNumber);
    app->add_option("--trace-size", trace_size, "Read trace side length")->check(CLI::PositiveNumber);
    app->add_flag("--no-memory", no_memory, "Train the ablation arm without memory");
    app->add_flag("--wall-clock", wall_clock, "Record elapsed seconds in metrics.csv");
  }

  /// Finalizes the config for images of the given shape.
  TrainConfig resolve(const Shape& image_shape) const {
    TrainConfig c = config;
    c.schedule = schedule == "constant" ? Schedule::constant : Schedule::cosine;
    c.model.likelihood = likelihood == "gaussian" ? Likelihood::gaussian : Likelihood::bernoulli;
    c.model.no_memory = no_memory;
    c.model.image_channels = image_shape[0];
    c.model.image_height = image_shape[1];
    c.model.image_width = image_shape[2];
    c.model.memory_height = c.model.memory_width = memory_size;
    c.model.trace_height = c.model.trace_width = trace_size;
    return c;
  }

  void snapshot(json& j) const {
    j["T"] = config.episode_length;
    j["K"] = config.model.reads;
    j["L"] = config.model.latent;
    j["epochs"] = config.epochs;
    j["seed"] = config.seed;
    j["batch"] = config.batch_episodes;
    j["episodes_per_epoch"] = config.episodes_per_epoch;
    j["lr"] = config.lr;
    j["schedule"] = schedule;
    j["warmup"] = config.warmup_epochs;
    j["weight_decay"] = config.weight_decay;
    j["likelihood"] = likelihood;
    j["sigma"] = config.model.gaussian_sigma;
    j["memory_size"] = memory_size;
    j["trace_size"] = trace_size;
    j["no_memory"] = no_memory;
    j["wall_clock"] = wall_clock;
  }
};

// ---------------------------------------------------------------------------
// Run directories

struct Invocation {
  std::string command_line;
  std::string command;
};

fs::path default_out(const std::string& command, std::uint64_t seed) {
  return fs::path("runs") / (command + "_seed" + std::to_string(seed));
}

void write_manifest(const fs::path& dir, const Invocation& inv, const json& config, const json& seed) {
  fs::create_directories(dir);
  json m;
  m["command_line"] = inv.command_line;
  m["command"] = inv.command;
  m["config"] = config;
  m["seed"] = seed;
  m["version"] = version();
  m["output_dir"] = dir.generic_string();
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

class CsvFile {
 public:
  CsvFile(const fs::path& path, const std::string& header) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    line(header);
  }
  void line(const std::string& s) { out_ << s << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

void require_checkpoint(const std::string& path) {
  if (!fs::is_regular_file(path)) throw DataError("--ckpt: no checkpoint at '" + path + "'");
}

ModelParams load_model(const std::string& path) {
  require_checkpoint(path);
  return load_checkpoint(path);
}

void require_image_shape(const ModelParams& p, const Dataset& d) {
  if (d.image_shape() != p.config.image_shape()) {
    throw DataError("data images " + to_string(d.image_shape()) + " do not match the checkpoint's " +
                    to_string(p.config.image_shape()));
  }
}

Index grid_columns(Index n) { return std::max<Index>(1, static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n))))); }

// ---------------------------------------------------------------------------
// Commands

struct TrainCommand {
  TrainOptions train;
  DataOptions data;
  std::string out;

  void add(CLI::App* app) {
    train.add(app);
    data.add(app, true);
    app->add_option("--out", out, "Run directory (default runs/train_seed<seed>)");
  }

  int run(const Invocation& inv, std::ostream& out_stream) const {
    const fs::path dir = out.empty() ? default_out("train", train.config.seed) : fs::path(out);
    json snap;
    train.snapshot(snap);
    data.snapshot(snap, true);
    snap["arm"] = train.no_memory ? "no_memory" : "memory";
    write_manifest(dir, inv, snap, train.config.seed);

    const Splits splits = load_data(data, train.likelihood == "gaussian" ? Likelihood::gaussian : Likelihood::bernoulli,
                                    true);
    const TrainConfig config = train.resolve(splits.train.image_shape());
    CsvFile metrics(dir / "metrics.csv", metrics_csv_header());
    TrainHooks hooks;
    hooks.wall_clock = train.wall_clock;
    hooks.on_row = [&](const MetricsRow& r) { metrics.line(to_csv(r)); };
    hooks.on_best = [&](const ModelParams& p, const MetricsRow&) { save_checkpoint(dir / "best.ckpt", p); };
    TrainResult result = kpp::train(config, splits.train, splits.test, hooks);
    save_checkpoint(dir / "final.ckpt", result.final_params);
    const MetricsRow& last = result.history.back();
    out_stream << "epochs " << config.epochs << ", final test elbo " << fmt(last.terms.elbo) << ", best test elbo "
               << fmt(result.best_test.terms.elbo) << " at epoch " << result.best_test.epoch << "\n"
               << "wrote " << dir.generic_string() << "\n";
    return kSuccess;
  }
};

struct GenerateCommand {
  std::string ckpt;
  DataOptions data;
  Index n = 16;
  double perturb = 0.0;
  std::uint64_t seed = 1;
  Index episode_length = 8;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    data.add(app, false);
    app->add_option("--n", n, "Images to generate")->check(CLI::PositiveNumber);
    app->add_option("--perturb", perturb, "Std of key perturbations around one base key")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed);
    app->add_option("--T", episode_length, "Length of the episode written to memory")->check(CLI::PositiveNumber);
    app->add_option("--out", out, "Run directory (default runs/generate_seed<seed>)");
  }

  int run(const Invocation& inv, std::ostream& out_stream) const {
    require_checkpoint(ckpt);
    const fs::path dir = out.empty() ? default_out("generate", seed) : fs::path(out);
    json snap{{"ckpt", ckpt}, {"n", n}, {"perturb", perturb}, {"seed", seed}, {"T", episode_length}};
    data.snapshot(snap, false);
    write_manifest(dir, inv, snap, seed);

    const ModelParams params = load_model(ckpt);
    const Splits splits = load_data(data, params.config.likelihood, false);
    require_image_shape(params, splits.test);
    EpisodeSampler sampler(splits.test, episode_length, derive_seed(seed, 0));
    const Tensor memory = build_memory(params, sampler.next().images);

    const Index k = params.config.reads;
    std::vector<std::string> key_rows;
    auto add_keys = [&](const std::string& kind, Index sample, const Tensor& keys) {
      for (Index r = 0; r < k; ++r) {
        key_rows.push_back(kind + "," + std::to_string(sample) + "," + std::to_string(r) + "," +
                           fmt(keys[r * 3]) + "," + fmt(keys[r * 3 + 1]) + "," + fmt(keys[r * 3 + 2]));
      }
    };

    Tensor images;
    Tensor keys;
    Tensor grid_images;
    if (perturb > 0.0) {
      const Tensor base_keys = Rng(derive_seed(seed, 2)).normal({k, 3});
      const Tensor base = generate_from_keys(params, memory, base_keys.reshaped({1, k, 3}));
      images = perturbed_generate(memory, base_keys, perturb, n, params, derive_seed(seed, 3), &keys);
      write_file(dir / "base.pgm", encode_pgm(base.reshaped(params.config.image_shape())));
      add_keys("base", 0, base_keys);
      grid_images = concat_images(base, images);
    } else {
      images = generate(memory, n, params, derive_seed(seed, 1), &keys);
      grid_images = images;
    }
    const Index per_sample = k * 3;
    const Index pixels = params.config.pixels();
    for (Index i = 0; i < n; ++i) {
      Tensor one(params.config.image_shape());
      one.array() = images.array().segment(i * pixels, pixels);
      write_file(dir / ("sample_" + zero_pad(i, 3) + ".pgm"), encode_pgm(one));
      Tensor sample_keys({k, 3});
      sample_keys.array() = keys.array().segment(i * per_sample, per_sample);
      add_keys("sample", i, sample_keys);
    }
    write_file(dir / "grid.pgm", encode_pgm_grid(grid_images, grid_columns(grid_images.dim(0))));
    std::string csv = "kind,sample,read,y0,y1,y2\n";
    for (const auto& row : key_rows) csv += row + "\n";
    write_file(dir / "keys.csv", csv);
    out_stream << "wrote " << n << " samples to " << dir.generic_string() << "\n";
    return kSuccess;
  }

  static Tensor concat_images(const Tensor& a, const Tensor& b) {
    Shape shape = a.shape();
    shape[0] = a.dim(0) + b.dim(0);
    Tensor t(shape);
    t.array().head(a.size()) = a.array();
    t.array().tail(b.size()) = b.array();
    return t;
  }
};

struct DenoiseCommand {
  std::string ckpt;
  DataOptions data;
  std::string noise;
  double level = 0.0;
  Index steps = 10;
  Index n = 8;
  std::uint64_t seed = 1;
  Index episode_length = 8;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    app->add_option("--noise", noise, "salt_pepper, speckle or poisson")->required();
    app->add_option("--level", level, "Noise strength (default depends on --noise)")->check(CLI::PositiveNumber);
    app->add_option("--steps", steps, "Clean-up iterations")->check(CLI::PositiveNumber);
    app->add_option("--n", n, "Images to corrupt and clean")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed);
    app->add_option("--T", episode_length, "Length of each episode written to memory")->check(CLI::PositiveNumber);
    data.add(app, false);
    app->add_option("--out", out, "Run directory (default runs/denoise_seed<seed>)");
  }

  int run(const Invocation& inv, std::ostream& out_stream) const {
    NoiseSpec spec;
    try {
      spec = default_noise(parse_noise_kind(noise));
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--noise: ") + e.what());
    }
    if (level > 0.0) spec.amount = level;
    require_checkpoint(ckpt);
    const fs::path dir = out.empty() ? default_out("denoise", seed) : fs::path(out);
    json snap{{"ckpt", ckpt}, {"noise", noise}, {"level", spec.amount}, {"steps", steps},
              {"n", n},       {"seed", seed},   {"T", episode_length}};
    data.snapshot(snap, false);
    write_manifest(dir, inv, snap, seed);

    const ModelParams params = load_model(ckpt);
    const Splits splits = load_data(data, params.config.likelihood, false);
    require_image_shape(params, splits.test);
    EpisodeSampler sampler(splits.test, episode_length, derive_seed(seed, 0));

    const Shape image_shape = params.config.image_shape();
    const Index pixels = params.config.pixels();
    std::string csv = "image_id,step,l2_error\n";
    std::vector<double> initial;
    std::vector<double> final;
    Episode episode;
    Tensor memory;
    for (Index i = 0; i < n; ++i) {
      const Index slot = i % episode_length;
      if (slot == 0) {
        episode = sampler.next();
        memory = build_memory(params, episode.images);
      }
      Tensor clean(image_shape);
      clean.array() = episode.images.array().segment(slot * pixels, pixels);
      const DenoiseResult r = denoise(memory, clean, spec, steps, params, derive_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
      const std::string stem = "image_" + zero_pad(i, 3);
      write_file(dir / (stem + "_clean.pgm"), encode_pgm(clean));
      write_file(dir / (stem + "_noisy.pgm"), encode_pgm(r.noisy));
      for (std::size_t s = 0; s < r.trajectory.size(); ++s) {
        write_file(dir / (stem + "_step_" + zero_pad(static_cast<Index>(s + 1), 2) + ".pgm"), encode_pgm(r.trajectory[s]));
      }
      for (std::size_t s = 0; s < r.errors.size(); ++s) {
        csv += std::to_string(i) + "," + std::to_string(s) + "," + fmt(r.errors[s]) + "\n";
      }
      initial.push_back(r.errors.front());
      final.push_back(r.errors.back());
    }
    write_file(dir / "errors.csv", csv);
    out_stream << "median l2 error: noisy " << fmt(median(initial)) << ", after " << steps << " steps "
               << fmt(median(final)) << "\n"
               << "wrote " << dir.generic_string() << "\n";
    return kSuccess;
  }
};

struct AblateCommand {
  TrainOptions train;
  DataOptions data;
  std::string axis;
  std::string values;
  std::string seeds = "1";
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--axis", axis, "T, K or memory")->required()->check(CLI::IsMember({"T", "K", "memory"}));
    app->add_option("--values", values, "Comma-separated values along the axis")->required();
    app->add_option("--seeds", seeds, "Comma-separated seeds");
    train.add(app);
    data.add(app, true);
    app->add_option("--out", out, "Sweep directory (default runs/ablate_seed<first seed>)");
  }

  struct Cell {
    std::string value;
    std::uint64_t seed = 0;
    TrainConfig config;
    fs::path dir;
    bool diverged = false;
    std::string error;
    MetricsRow last_test;
  };

  std::vector<Cell> cells(const Shape& image_shape, const fs::path& dir) const {
    const auto value_list = split_list(values);
    const auto seed_list = split_list(seeds);
    if (value_list.empty()) throw UsageError("--values: empty value list");
    if (seed_list.empty()) throw UsageError("--seeds: empty seed list");
    std::vector<Cell> out_cells;
    for (const auto& v : value_list) {
      for (const auto& s : seed_list) {
        Cell c;
        c.value = v;
        c.seed = static_cast<std::uint64_t>(parse_index(s, "--seeds"));
        c.config = train.resolve(image_shape);
        c.config.seed = c.seed;
        if (axis == "T") {
          c.config.episode_length = parse_index(v, "--values");
        } else if (axis == "K") {
          c.config.model.reads = parse_index(v, "--values");
        } else if (v == "on" || v == "off") {
          c.config.model.no_memory = v == "off";
        } else {
          throw UsageError("--values: memory axis takes on or off, got '" + v + "'");
        }
        try {
          c.config.validate();
        } catch (const std::invalid_argument& e) {
          throw UsageError("--values " + v + ": " + e.what());
        }
        c.dir = dir / "cells" / (axis + "_" + v + "_seed" + std::to_string(c.seed));
        out_cells.push_back(std::move(c));
      }
    }
    return out_cells;
  }

  int run(const Invocation& inv, std::ostream& out_stream, Index threads) const {
    const auto seed_list = split_list(seeds);
    const std::uint64_t first_seed =
        seed_list.empty() ? 0 : static_cast<std::uint64_t>(parse_index(seed_list.front(), "--seeds"));
    const fs::path dir = out.empty() ? default_out("ablate", first_seed) : fs::path(out);
    json snap;
    train.snapshot(snap);
    data.snapshot(snap, true);
    snap.erase("seed");
    snap["axis"] = axis;
    snap["values"] = values;
    snap["seeds"] = seeds;
    if (split_list(values).empty()) throw UsageError("--values: empty value list");
    write_manifest(dir, inv, snap, seeds);

    const Splits splits =
        load_data(data, train.likelihood == "gaussian" ? Likelihood::gaussian : Likelihood::bernoulli, true);
    std::vector<Cell> grid = cells(splits.train.image_shape(), dir);

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < grid.size(); i = next++) {
        Cell& c = grid[i];
        try {
          json cell_snap = snap;
          cell_snap["seed"] = c.seed;
          cell_snap["T"] = c.config.episode_length;
          cell_snap["K"] = c.config.model.reads;
          cell_snap["no_memory"] = c.config.model.no_memory;
          cell_snap["arm"] = c.config.model.no_memory ? "no_memory" : "memory";
          write_manifest(c.dir, {inv.command_line, "ablate-cell"}, cell_snap, c.seed);
          CsvFile metrics(c.dir / "metrics.csv", metrics_csv_header());
          TrainHooks hooks;
          hooks.wall_clock = train.wall_clock;
          hooks.on_row = [&](const MetricsRow& r) { metrics.line(to_csv(r)); };
          TrainResult r = kpp::train(c.config, splits.train, splits.test, hooks);
          c.last_test = r.history.back();
        } catch (const DivergenceError& e) {
          c.diverged = true;
          c.error = e.what();
        } catch (const std::exception& e) {
          c.error = e.what();
        }
      }
    };
    const Index workers = std::clamp<Index>(threads, 1, static_cast<Index>(grid.size()));
    std::vector<std::thread> pool;
    for (Index t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::string csv = "axis,value,seed,test_elbo,test_kl\n";
    bool any_diverged = false;
    for (const Cell& c : grid) {
      if (!c.error.empty() && !c.diverged) throw std::runtime_error("cell " + c.dir.generic_string() + ": " + c.error);
      any_diverged = any_diverged || c.diverged;
      const std::string elbo_s = c.diverged ? "nan" : fmt(c.last_test.terms.elbo);
      const std::string kl_s = c.diverged ? "nan" : fmt(c.last_test.terms.kl_z + c.last_test.terms.kl_y);
      csv += axis + "," + c.value + "," + std::to_string(c.seed) + "," + elbo_s + "," + kl_s + "\n";
    }
    write_file(dir / "ablation.csv", csv);
    out_stream << csv << "wrote " << dir.generic_string() << "\n";
    if (any_diverged) {
      for (const Cell& c : grid) {
        if (c.diverged) out_stream << "diverged: " << c.dir.generic_string() << ": " << c.error << "\n";
      }
      return kDiverged;
    }
    return kSuccess;
  }
};

struct EvalCommand {
  std::string ckpt;
  DataOptions data;
  Index episode_length = 8;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    data.add(app, false);
    app->add_option("--T", episode_length, "Episode length")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed);
  }

  int run(std::ostream& out_stream) const {
    const ModelParams params = load_model(ckpt);
    const Splits splits = load_data(data, params.config.likelihood, false);
    require_image_shape(params, splits.test);
    const MetricsRow row = eval_conditional(params, splits.test, episode_length, seed);
    const bool binary = params.config.likelihood == Likelihood::bernoulli;
    const double neg = -row.terms.elbo;
    out_stream << "split,T,seed,neg_elbo,unit,recon_ll,kl_z,kl_y\n"
               << "test," << episode_length << "," << seed << ","
               << fmt(binary ? neg : bits_per_dim(neg, params.config.pixels())) << ","
               << (binary ? "nats/image" : "bits/dim") << "," << fmt(row.terms.recon_ll) << "," << fmt(row.terms.kl_z)
               << "," << fmt(row.terms.kl_y) << "\n";
    return kSuccess;
  }
};

Index thread_cap() {
  const char* env = std::getenv("KPP_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const Index v = parse_index(env, "KPP_THREADS");
  if (v < 1) throw UsageError("KPP_THREADS must be >= 1");
  return v;
}

std::string join(const std::vector<std::string>& args) {
  std::string s;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i) s += ' ';
    s += i == 0 ? std::string("kpp") : args[i];
  }
  return s;
}

/// Splices the arguments of a `--config` file in right after the subcommand so later flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::string config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[i + 1];
    } else if (args[i].starts_with("--config=")) {
      config = args[i].substr(9);
    }
  }
  if (config.empty() || args.size() < 2) return {args.begin() + 1, args.end()};
  out.push_back(args[1]);
  for (auto& a : config_file_args(config)) out.push_back(std::move(a));
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

}  // namespace

std::string version() { return KPP_VERSION; }

std::vector<std::string> config_file_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("--config: cannot read '" + path.string() + "'");
  std::vector<std::string> args;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw UsageError(path.string() + ":" + std::to_string(line_no) + ": empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Block-allocated latent memory generative model", "kpp"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", version());

  TrainCommand train_cmd;
  GenerateCommand generate_cmd;
  DenoiseCommand denoise_cmd;
  AblateCommand ablate_cmd;
  EvalCommand eval_cmd;
  std::string config_path;

  auto add = [&](const char* name, const char* about) {
    CLI::App* sub = app.add_subcommand(name, about);
    sub->add_option("--config", config_path, "File of key = value lines; flags override it");
    return sub;
  };
  CLI::App* train_app = add("train", "Train a model and write metrics.csv and checkpoints");
  train_cmd.add(train_app);
  CLI::App* generate_app = add("generate", "Sample images from a memory written by a test episode");
  generate_cmd.add(generate_app);
  CLI::App* denoise_app = add("denoise", "Corrupt test images and clean them by iterative reading");
  denoise_cmd.add(denoise_app);
  CLI::App* ablate_app = add("ablate", "Sweep T, K or the memory arm over several seeds");
  ablate_cmd.add(ablate_app);
  CLI::App* eval_app = add("eval", "Print the conditional test bound of a checkpoint");
  eval_cmd.add(eval_app);

  auto usage = [&](const std::string& message) {
    err << "error: " << message << "\n\n";
    CLI::App* active = &app;
    for (CLI::App* sub : app.get_subcommands()) active = sub;
    err << active->help();
    return static_cast<int>(kUsageError);
  };

  try {
    std::vector<std::string> argv = expand_config(args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  } catch (const UsageError& e) {
    return usage(e.what());
  }

  const Invocation inv{join(args), app.get_subcommands().front()->get_name()};
  try {
    if (train_app->parsed()) return train_cmd.run(inv, out);
    if (generate_app->parsed()) return generate_cmd.run(inv, out);
    if (denoise_app->parsed()) return denoise_cmd.run(inv, out);
    if (ablate_app->parsed()) return ablate_cmd.run(inv, out, thread_cap());
    return eval_cmd.run(out);
  } catch (const UsageError& e) {
    return usage(e.what());
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  }
}

}  // namespace kpp::cli
