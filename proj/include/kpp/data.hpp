#pragma once

#include "kpp/model.hpp"
#include "kpp/rng.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kpp {

enum class Split { train, test };

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images [N, C, H, W] with values in [0, 1]; immutable after construction.
struct Dataset {
  std::string name;
  Split split = Split::train;
  Tensor images;
  std::vector<int> labels;  // optional; empty when unknown

  Index size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  bool is_binary() const { return ((images.array() == 0.0) || (images.array() == 1.0)).all(); }
  /// Images at the given indices, stacked as [indices.size(), C, H, W].
  Tensor gather(const std::vector<Index>& indices) const;
};

/// Throws DataError when any pixel lies outside [0, 1] or is not finite.
void check_pixel_range(const Tensor& images, std::string_view what);

/// IDX image file (magic 0x00000803), scaled from bytes to [0, 1] -> Dataset [N, 1, rows, cols].
Dataset load_idx(const std::filesystem::path& path, Split split = Split::train);
/// IDX label file (magic 0x00000801).
std::vector<int> load_idx_labels(const std::filesystem::path& path);
/// Serializes images [N, 1, H, W] in [0, 1] as an IDX image file (pixel = round(255 x)).
std::string encode_idx_images(const Tensor& images);

enum class BinarizeMode { threshold, stochastic };

/// threshold: x >= 0.5 -> 1. stochastic: one static Bernoulli(x) draw per pixel from `seed`.
Dataset binarize(const Dataset& dataset, BinarizeMode mode, std::uint64_t seed);

/// Binary images of randomly placed rectangles, crosses and circles (labels 0, 1, 2).
Dataset synth_shapes(Index n, Index height, Index width, std::uint64_t seed, Split split = Split::train);

enum class NoiseKind { salt_pepper, speckle, poisson };

/// amount is the flip rate (salt_pepper), multiplicative std (speckle) or photon scale (poisson).
struct NoiseSpec {
  NoiseKind kind = NoiseKind::salt_pepper;
  double amount = 0.1;
};

NoiseKind parse_noise_kind(std::string_view name);
std::string_view to_string(NoiseKind kind);
/// Default strength used by the denoising protocol for each kind.
NoiseSpec default_noise(NoiseKind kind);

/// Corrupts an image with values in [0, 1]; output stays in [0, 1].
Tensor inject_noise(const Tensor& image, const NoiseSpec& noise, std::uint64_t seed);

/// Draws episodes of T distinct images, uniformly, from a private generator.
class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& dataset, Index episode_length, std::uint64_t seed);
  Episode next();

 private:
  const Dataset& dataset_;
  Index length_;
  Rng rng_;
  std::vector<Index> order_;
};

/// Seeded shuffle of the dataset chunked into floor(N / T) disjoint episodes.
std::vector<Episode> partition_episodes(const Dataset& dataset, Index episode_length, std::uint64_t seed);

/// Binary PGM (P5, maxval 255) of an image [C, H, W] or [H, W]; channels are averaged.
std::string encode_pgm(const Tensor& image);
/// Tiles images [N, C, H, W] into a grid with `columns` per row and a one-pixel border.
std::string encode_pgm_grid(const Tensor& images, Index columns);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace kpp
