#include "doctest.h"

#include "kpp/cli.hpp"
#include "kpp/objective.hpp"
#include "kpp/trainer.hpp"
#include "model_fixtures.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace kpp;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result kpp_run(std::vector<std::string> args) {
  args.insert(args.begin(), "kpp");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  return out;
}

/// Fresh scratch directory per test case.
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("kpp_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// A small model on 8x8 synth images so each command finishes in well under a second.
const std::vector<std::string> kSmall = {"--data",       "synth", "--image-size",         "8",  "--train-size", "64",
                                         "--test-size",  "32",    "--L",                  "8",  "--memory-size", "16",
                                         "--trace-size", "8",     "--episodes-per-epoch", "8"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

fs::path train_small(const fs::path& dir, const std::string& seed = "3") {
  const fs::path out = dir / ("train_" + seed);
  Result r = kpp_run(with({"train", "--T", "4", "--K", "1", "--epochs", "2", "--seed", seed, "--out", out.string()}, kSmall));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return out;
}

}  // namespace

TEST_CASE("config_file_args") {
  const fs::path dir = scratch("config");
  write_file(dir / "a.cfg", "# comment\nepochs = 3\n\n  no_memory=true   # trailing\ndata = \"synth\"\n");
  CHECK(cli::config_file_args(dir / "a.cfg") ==
        std::vector<std::string>{"--epochs=3", "--no-memory=true", "--data=synth"});
  write_file(dir / "b.cfg", "epochs 3\n");
  CHECK_THROWS(cli::config_file_args(dir / "b.cfg"));
}

TEST_CASE("train writes manifest, metrics and checkpoints") {
  const fs::path dir = scratch("train");
  const fs::path run = train_small(dir);
  for (const char* f : {"manifest.json", "metrics.csv", "best.ckpt", "final.ckpt"}) CHECK(fs::exists(run / f));

  auto rows = lines(slurp(run / "metrics.csv"));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == metrics_csv_header());
  CHECK(rows[1].starts_with("1,train,"));
  CHECK(rows[2].starts_with("1,test,"));
  CHECK(rows[4].starts_with("2,test,"));

  const auto m = nlohmann::json::parse(slurp(run / "manifest.json"));
  CHECK(m["command"] == "train");
  CHECK(m["seed"] == 3);
  CHECK(m["version"] == cli::version());
  CHECK(m["output_dir"] == run.generic_string());
  CHECK(m["command_line"].get<std::string>().starts_with("kpp train --T 4"));
  CHECK(m["config"]["epochs"] == 2);
  CHECK(m["config"]["arm"] == "memory");

  // Repeated invocation: byte-identical outputs.
  const fs::path again = dir / "again";
  Result r = kpp_run(with({"train", "--T", "4", "--K", "1", "--epochs", "2", "--seed", "3", "--out", again.string()}, kSmall));
  REQUIRE(r.code == 0);
  CHECK(slurp(again / "metrics.csv") == slurp(run / "metrics.csv"));
  CHECK(slurp(again / "final.ckpt") == slurp(run / "final.ckpt"));

  // The best checkpoint reproduces its test row exactly.
  const ModelParams best = load_checkpoint(run / "best.ckpt");
  CHECK_FALSE(best.config.no_memory);
  const Dataset test = synth_shapes(32, 8, 8, 2002, Split::test);
  TrainConfig c;
  c.seed = 3;
  MetricsRow row = eval_conditional(best, test, 4, eval_seed(c));
  row.epoch = 2;
  row.seed = 3;
  CHECK(to_csv(row) == rows[4]);
}

TEST_CASE("train --no-memory records the ablation arm") {
  const fs::path dir = scratch("nomem");
  Result r = kpp_run(with({"train", "--T", "4", "--epochs", "1", "--no-memory", "--out", (dir / "r").string()}, kSmall));
  REQUIRE(r.code == 0);
  const auto m = nlohmann::json::parse(slurp(dir / "r" / "manifest.json"));
  CHECK(m["config"]["arm"] == "no_memory");
  CHECK(m["config"]["no_memory"] == true);
  const ModelParams p = load_checkpoint(dir / "r" / "final.ckpt");
  CHECK(p.config.no_memory);
  CHECK(p.count({"writer.", "key_head", "prior."}) == 0);
}

TEST_CASE("config file precedence") {
  const fs::path dir = scratch("precedence");
  std::string cfg = "epochs = 1\nT = 4\nseed = 9\n";
  for (std::size_t i = 0; i < kSmall.size(); i += 2) cfg += kSmall[i].substr(2) + " = " + kSmall[i + 1] + "\n";
  write_file(dir / "run.cfg", cfg);

  Result file_only = kpp_run({"train", "--config", (dir / "run.cfg").string(), "--out", (dir / "a").string()});
  REQUIRE_MESSAGE(file_only.code == 0, file_only.err);
  CHECK(lines(slurp(dir / "a" / "metrics.csv")).size() == 3);
  CHECK(nlohmann::json::parse(slurp(dir / "a" / "manifest.json"))["seed"] == 9);

  Result flag_wins = kpp_run({"train", "--epochs", "2", "--config", (dir / "run.cfg").string(), "--out", (dir / "b").string()});
  REQUIRE(flag_wins.code == 0);
  CHECK(lines(slurp(dir / "b" / "metrics.csv")).size() == 5);
  CHECK(nlohmann::json::parse(slurp(dir / "b" / "manifest.json"))["config"]["T"] == 4);

  write_file(dir / "bad.cfg", "no_such_key = 1\n");
  CHECK(kpp_run({"train", "--config", (dir / "bad.cfg").string()}).code == 1);
  CHECK(kpp_run({"train", "--config", (dir / "missing.cfg").string()}).code == 1);
}

TEST_CASE("usage errors exit 1 with usage text") {
  Result none = kpp_run({});
  CHECK(none.code == 1);
  CHECK(none.err.find("Usage") != std::string::npos);

  Result bad = kpp_run({"train", "--epochs", "zero"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("--epochs") != std::string::npos);
  CHECK(bad.err.find("Usage") != std::string::npos);

  CHECK(kpp_run({"train", "--T", "0"}).code == 1);
  CHECK(kpp_run({"train", "--unknown-flag"}).code == 1);
  CHECK(kpp_run({"generate", "--ckpt", "/nonexistent/model.ckpt"}).code == 1);
  CHECK(kpp_run({"generate"}).code == 1);
  CHECK(kpp_run({"eval", "--ckpt", "/nonexistent/model.ckpt"}).code == 1);
  CHECK(kpp_run({"denoise", "--ckpt", "x.ckpt", "--noise", "blur"}).code == 1);
  CHECK(kpp_run({"ablate", "--axis", "T", "--values", ""}).code == 1);
  CHECK(kpp_run({"ablate", "--axis", "T", "--values", ", ,"}).code == 1);
  CHECK(kpp_run({"ablate", "--axis", "depth", "--values", "1"}).code == 1);

  Result help = kpp_run({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("ablate") != std::string::npos);
  Result version = kpp_run({"--version"});
  CHECK(version.code == 0);
  CHECK(version.out.find(cli::version()) != std::string::npos);
}

TEST_CASE("generate emits samples, grid and keys") {
  const fs::path dir = scratch("generate");
  const std::string ckpt = (train_small(dir) / "final.ckpt").string();
  const std::vector<std::string> data = {"--data", "synth", "--image-size", "8", "--test-size", "32", "--T", "4"};

  Result r = kpp_run(with({"generate", "--ckpt", ckpt, "--n", "16", "--seed", "5", "--out", (dir / "g").string()}, data));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  int pgm = 0;
  for (const auto& e : fs::directory_iterator(dir / "g")) pgm += e.path().extension() == ".pgm";
  CHECK(pgm == 17);
  CHECK(slurp(dir / "g" / "grid.pgm").starts_with("P5\n37 37\n255\n"));
  const auto key_rows = lines(slurp(dir / "g" / "keys.csv"));
  CHECK(key_rows.size() == 1 + 16);
  CHECK(key_rows[0] == "kind,sample,read,y0,y1,y2");

  // The keys in keys.csv regenerate sample 7 through the library.
  const ModelParams params = load_checkpoint(ckpt);
  const Dataset test = synth_shapes(32, 8, 8, 2002, Split::test);
  EpisodeSampler sampler(test, 4, derive_seed(5, 0));
  const Tensor memory = build_memory(params, sampler.next().images);
  const auto f = fields(key_rows[8]);
  REQUIRE(f[1] == "7");
  Tensor keys({1, 1, 3}, {std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
  Tensor sample = generate_from_keys(params, memory, keys);
  CHECK(encode_pgm(sample.reshaped({1, 8, 8})) == slurp(dir / "g" / "sample_007.pgm"));

  Result again = kpp_run(with({"generate", "--ckpt", ckpt, "--n", "16", "--seed", "5", "--out", (dir / "g2").string()}, data));
  REQUIRE(again.code == 0);
  for (const char* f2 : {"grid.pgm", "keys.csv", "sample_000.pgm", "sample_015.pgm"}) {
    CHECK(slurp(dir / "g" / f2) == slurp(dir / "g2" / f2));
  }

  Result p = kpp_run(with({"generate", "--ckpt", ckpt, "--n", "4", "--perturb", "0.1", "--out", (dir / "p").string()}, data));
  REQUIRE(p.code == 0);
  CHECK(fs::exists(dir / "p" / "base.pgm"));
  const auto prow = lines(slurp(dir / "p" / "keys.csv"));
  REQUIRE(prow.size() == 1 + 1 + 4);
  CHECK(prow[1].starts_with("base,0,0,"));
  // Perturbed keys stay within a few eps of the base key.
  const auto base = fields(prow[1]);
  for (std::size_t i = 2; i < prow.size(); ++i) {
    const auto s = fields(prow[i]);
    for (int c = 3; c < 6; ++c) CHECK(std::abs(std::stod(s[c]) - std::stod(base[c])) < 0.6);
  }

  const fs::path nomem = dir / "nomem";
  REQUIRE(kpp_run(with({"train", "--T", "4", "--epochs", "1", "--no-memory", "--out", nomem.string()}, kSmall)).code == 0);
  CHECK(kpp_run(with({"generate", "--ckpt", (nomem / "final.ckpt").string(), "--out", (dir / "x").string()}, data)).code == 1);
}

TEST_CASE("denoise writes trajectories and errors") {
  const fs::path dir = scratch("denoise");
  const std::string ckpt = (train_small(dir) / "final.ckpt").string();
  const std::vector<std::string> args = {"denoise", "--ckpt", ckpt, "--noise", "salt_pepper", "--steps", "10", "--n", "5",
                                         "--seed", "4", "--data", "synth", "--image-size", "8", "--test-size", "32",
                                         "--T", "4"};
  Result r = kpp_run(with(args, {"--out", (dir / "d").string()}));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (int i = 0; i < 5; ++i) {
    const std::string stem = "image_00" + std::to_string(i);
    CHECK(fs::exists(dir / "d" / (stem + "_clean.pgm")));
    CHECK(fs::exists(dir / "d" / (stem + "_noisy.pgm")));
    for (int s = 1; s <= 10; ++s) {
      CHECK(fs::exists(dir / "d" / (stem + "_step_" + (s < 10 ? "0" : "") + std::to_string(s) + ".pgm")));
    }
    CHECK_FALSE(fs::exists(dir / "d" / (stem + "_step_11.pgm")));
  }
  const auto rows = lines(slurp(dir / "d" / "errors.csv"));
  REQUIRE(rows.size() == 1 + 5 * 11);
  CHECK(rows[0] == "image_id,step,l2_error");

  // Step 0 is the noisy-vs-clean distance, recomputed from the clean image and its noise seed.
  const Dataset test = synth_shapes(32, 8, 8, 2002, Split::test);
  EpisodeSampler sampler(test, 4, derive_seed(4, 0));
  sampler.next();
  const Episode second = sampler.next();
  Tensor clean({1, 8, 8});
  clean.array() = second.images.array().segment(0, 64);
  const Tensor noisy = inject_noise(clean, default_noise(NoiseKind::salt_pepper), derive_seed(derive_seed(4, 1004), 0));
  const auto row = fields(rows[1 + 4 * 11]);
  REQUIRE(row[0] == "4");
  REQUIRE(row[1] == "0");
  CHECK(std::stod(row[2]) == doctest::Approx(l2_distance(noisy, clean)).epsilon(1e-9));
  CHECK(encode_pgm(clean) == slurp(dir / "d" / "image_004_clean.pgm"));

  Result again = kpp_run(with(args, {"--out", (dir / "d2").string()}));
  REQUIRE(again.code == 0);
  CHECK(slurp(dir / "d" / "errors.csv") == slurp(dir / "d2" / "errors.csv"));
  CHECK(slurp(dir / "d" / "image_003_step_07.pgm") == slurp(dir / "d2" / "image_003_step_07.pgm"));
}

TEST_CASE("ablate runs the grid and its rows aggregate from the cells") {
  const fs::path dir = scratch("ablate");
  const std::vector<std::string> args =
      with({"ablate", "--axis", "T", "--values", "2,4,8", "--seeds", "1,2,3", "--epochs", "1"}, kSmall);
  Result r = kpp_run(with(args, {"--out", (dir / "a").string()}));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rows = lines(slurp(dir / "a" / "ablation.csv"));
  REQUIRE(rows.size() == 1 + 9);
  CHECK(rows[0] == "axis,value,seed,test_elbo,test_kl");

  // Each row is the last test row of its cell; mean and std per value recomputed from the cells match.
  std::map<std::string, std::vector<double>> by_value_rows, by_value_cells;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = fields(rows[i]);
    const fs::path cell = dir / "a" / "cells" / ("T_" + f[1] + "_seed" + f[2]);
    const auto metrics = lines(slurp(cell / "metrics.csv"));
    const auto last = fields(metrics.back());
    REQUIRE(last[1] == "test");
    CHECK(f[3] == last[2]);
    CHECK(std::stod(f[4]) == doctest::Approx(std::stod(last[4]) + std::stod(last[5])).epsilon(1e-9));
    by_value_rows[f[1]].push_back(std::stod(f[3]));
    by_value_cells[f[1]].push_back(std::stod(last[2]));
  }
  for (const auto& [value, xs] : by_value_rows) {
    REQUIRE(xs.size() == 3);
    const auto& ys = by_value_cells[value];
    const double mx = (xs[0] + xs[1] + xs[2]) / 3, my = (ys[0] + ys[1] + ys[2]) / 3;
    double vx = 0, vy = 0;
    for (int i = 0; i < 3; ++i) {
      vx += (xs[i] - mx) * (xs[i] - mx) / 2;
      vy += (ys[i] - my) * (ys[i] - my) / 2;
    }
    CHECK(mx == doctest::Approx(my).epsilon(1e-9));
    CHECK(std::sqrt(vx) == doctest::Approx(std::sqrt(vy)).epsilon(1e-6));
  }

  // Parallel cells give the same bytes.
  setenv("KPP_THREADS", "3", 1);
  Result par = kpp_run(with(args, {"--out", (dir / "b").string()}));
  unsetenv("KPP_THREADS");
  REQUIRE(par.code == 0);
  CHECK(slurp(dir / "a" / "ablation.csv") == slurp(dir / "b" / "ablation.csv"));

  setenv("KPP_THREADS", "zero", 1);
  CHECK(kpp_run(with(args, {"--out", (dir / "c").string()})).code == 1);
  unsetenv("KPP_THREADS");

  Result mem = kpp_run(with({"ablate", "--axis", "memory", "--values", "on,off", "--seeds", "1", "--epochs", "1", "--T", "4",
                             "--out", (dir / "m").string()},
                            kSmall));
  REQUIRE(mem.code == 0);
  const auto mrows = lines(slurp(dir / "m" / "ablation.csv"));
  REQUIRE(mrows.size() == 3);
  CHECK(mrows[1].starts_with("memory,on,1,"));
  CHECK(mrows[2].starts_with("memory,off,1,"));
  const auto off = nlohmann::json::parse(slurp(dir / "m" / "cells" / "memory_off_seed1" / "manifest.json"));
  CHECK(off["config"]["arm"] == "no_memory");
  const auto on = nlohmann::json::parse(slurp(dir / "m" / "cells" / "memory_on_seed1" / "manifest.json"));
  CHECK(on["config"]["arm"] == "memory");
}

namespace {

/// Every parameter set from a closed-form pattern, so the checkpoint does not depend on the init RNG.
fs::path fixture_checkpoint(const fs::path& dir) {
  ModelParams p = init_params(testing::tiny_config(), 1);
  double k = 0.0;
  for (auto& [name, t] : p.tensors) {
    for (Index i = 0; i < t.size(); ++i) t[i] = 0.2 * std::sin(1.3 * static_cast<double>(i) + 0.7 * k);
    k += 1.0;
  }
  const fs::path path = dir / "fixture.ckpt";
  save_checkpoint(path, p);
  return path;
}

}  // namespace

TEST_CASE("eval prints the golden row for a fixture checkpoint") {
  const fs::path dir = scratch("eval");
  const fs::path ckpt = fixture_checkpoint(dir);
  const std::vector<std::string> args = {"eval", "--ckpt", ckpt.string(), "--data", "synth", "--image-size", "8",
                                         "--test-size", "32", "--T", "4", "--seed", "7"};
  Result r = kpp_run(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const fs::path golden = fs::path(KPP_TEST_DATA_DIR) / "golden" / "eval_fixture.csv";
  if (std::getenv("KPP_UPDATE_GOLDEN")) write_file(golden, r.out);
  CHECK(r.out == slurp(golden));

  // The row is the library's conditional bound, negated.
  const MetricsRow row = eval_conditional(load_checkpoint(ckpt), synth_shapes(32, 8, 8, 2002, Split::test), 4, 7);
  const auto f = fields(lines(r.out).at(1));
  CHECK(f[0] == "test");
  CHECK(f[4] == "nats/image");
  CHECK(std::stod(f[3]) == doctest::Approx(-row.terms.elbo).epsilon(1e-9));
  CHECK(std::stod(f[3]) == doctest::Approx(-std::stod(f[5]) + std::stod(f[6]) + std::stod(f[7])).epsilon(1e-9));

  CHECK(kpp_run(args).out == r.out);
  CHECK(kpp_run({"eval", "--ckpt", ckpt.string(), "--data", (dir / "no_such_dir").string()}).code == 1);
  CHECK(kpp_run({"eval", "--ckpt", ckpt.string(), "--data", "synth"}).code == 1);  // 16x16 images vs an 8x8 model
}
