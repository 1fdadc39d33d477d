#include "kpp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

namespace kpp {
namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) {
    throw DataError(path.string() + ": truncated header at byte offset " + std::to_string(offset));
  }
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xFF));
}

std::string hex(std::uint32_t v) {
  std::ostringstream s;
  s << "0x" << std::hex << v;
  return s.str();
}

void check_magic(std::uint32_t magic, std::uint32_t expected, const std::filesystem::path& path) {
  if (magic != expected) {
    throw DataError(path.string() + ": bad magic " + hex(magic) + " at byte offset 0, expected " + hex(expected));
  }
}

void check_payload(const std::string& bytes, std::size_t offset, std::size_t need, const std::filesystem::path& path) {
  if (bytes.size() - offset < need) {
    throw DataError(path.string() + ": truncated payload at byte offset " + std::to_string(offset) + ": expected " +
                    std::to_string(need) + " bytes, found " + std::to_string(bytes.size() - offset));
  }
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void set_pixel(Tensor& images, Index n, Index row, Index col) {
  const Index h = images.dim(2), w = images.dim(3);
  images[(n * h + row) * w + col] = 1.0;
}

void draw_rectangle(Tensor& images, Index n, Index h, Index w, Rng& rng) {
  const Index s = std::min(h, w);
  const Index lo = std::max<Index>(2, s / 4), hi = std::max(lo, s / 2 + 1);
  const Index rh = lo + rng.uniform_index(hi - lo + 1), rw = lo + rng.uniform_index(hi - lo + 1);
  const Index top = rng.uniform_index(h - std::min(rh, h) + 1), left = rng.uniform_index(w - std::min(rw, w) + 1);
  for (Index r = top; r < std::min(h, top + rh); ++r) {
    for (Index c = left; c < std::min(w, left + rw); ++c) set_pixel(images, n, r, c);
  }
}

void draw_cross(Tensor& images, Index n, Index h, Index w, Rng& rng) {
  const Index s = std::min(h, w);
  const Index thick = std::max<Index>(1, s / 8);
  const Index lo = std::max<Index>(1, s / 6 + 1), hi = std::max(lo, (s - thick) / 2);
  const Index arm = lo + rng.uniform_index(hi - lo + 1);
  const Index span_r = std::max<Index>(1, h - 2 * arm - thick + 1), span_c = std::max<Index>(1, w - 2 * arm - thick + 1);
  const Index cy = arm + rng.uniform_index(span_r), cx = arm + rng.uniform_index(span_c);
  for (Index r = cy - arm; r <= cy + arm + thick - 1; ++r) {
    for (Index c = cx - arm; c <= cx + arm + thick - 1; ++c) {
      if (r < 0 || r >= h || c < 0 || c >= w) continue;
      const bool horizontal = r >= cy && r < cy + thick;
      const bool vertical = c >= cx && c < cx + thick;
      if (horizontal || vertical) set_pixel(images, n, r, c);
    }
  }
}

void draw_circle(Tensor& images, Index n, Index h, Index w, Rng& rng) {
  const double s = static_cast<double>(std::min(h, w));
  const double radius = s / 6.0 + 1.0 + rng.uniform01() * s / 6.0;
  const double cy = radius + 0.5 + rng.uniform01() * std::max(0.0, static_cast<double>(h) - 2.0 * radius - 2.0);
  const double cx = radius + 0.5 + rng.uniform01() * std::max(0.0, static_cast<double>(w) - 2.0 * radius - 2.0);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const double d = std::hypot(static_cast<double>(r) - cy, static_cast<double>(c) - cx);
      if (std::abs(d - radius) <= 0.75) set_pixel(images, n, r, c);
    }
  }
}

Tensor as_chw(const Tensor& image) {
  if (image.rank() == 2) return image.reshaped({1, image.dim(0), image.dim(1)});
  if (image.rank() == 3) return image;
  throw ShapeError("encode_pgm: expected [C, H, W] or [H, W], got " + to_string(image.shape()));
}

std::string pgm_bytes(const std::vector<unsigned char>& pixels, Index h, Index w) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

}  // namespace

Tensor Dataset::gather(const std::vector<Index>& indices) const {
  const Index per = images.size() / std::max<Index>(1, size());
  Tensor out({static_cast<Index>(indices.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i) + " out of range");
    out.array().segment(static_cast<Index>(k) * per, per) = images.array().segment(i * per, per);
  }
  return out;
}

void check_pixel_range(const Tensor& images, std::string_view what) {
  for (Index i = 0; i < images.size(); ++i) {
    const double v = images[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError(std::string(what) + ": pixel " + std::to_string(i) + " = " + std::to_string(v) +
                      " is outside [0, 1]");
    }
  }
}

Dataset load_idx(const std::filesystem::path& path, Split split) {
  const std::string bytes = read_file(path);
  check_magic(read_be32(bytes, 0, path), kIdxImages, path);
  const Index n = read_be32(bytes, 4, path), rows = read_be32(bytes, 8, path), cols = read_be32(bytes, 12, path);
  const std::size_t need = static_cast<std::size_t>(n) * static_cast<std::size_t>(rows * cols);
  check_payload(bytes, 16, need, path);
  Dataset d;
  d.name = path.filename().string();
  d.split = split;
  d.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < need; ++i) {
    d.images[static_cast<Index>(i)] = static_cast<double>(static_cast<unsigned char>(bytes[16 + i])) / 255.0;
  }
  return d;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  check_magic(read_be32(bytes, 0, path), kIdxLabels, path);
  const std::size_t n = read_be32(bytes, 4, path);
  check_payload(bytes, 8, n, path);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<unsigned char>(bytes[8 + i]);
  return labels;
}

std::string encode_idx_images(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw ShapeError("encode_idx_images: expected [N, 1, H, W], got " + to_string(images.shape()));
  }
  std::string out;
  put_be32(out, kIdxImages);
  put_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(3)));
  for (Index i = 0; i < images.size(); ++i) out.push_back(static_cast<char>(to_byte(images[i])));
  return out;
}

Dataset binarize(const Dataset& dataset, BinarizeMode mode, std::uint64_t seed) {
  check_pixel_range(dataset.images, "binarize");
  Dataset out = dataset;
  Rng rng(seed);
  for (Index i = 0; i < out.images.size(); ++i) {
    const double v = dataset.images[i];
    out.images[i] = mode == BinarizeMode::threshold ? (v >= 0.5 ? 1.0 : 0.0) : (rng.uniform01() < v ? 1.0 : 0.0);
  }
  return out;
}

Dataset synth_shapes(Index n, Index height, Index width, std::uint64_t seed, Split split) {
  if (n < 0 || height < 8 || width < 8) {
    throw std::invalid_argument("synth_shapes: need n >= 0 and images of at least 8x8");
  }
  Dataset d;
  d.name = "synth";
  d.split = split;
  d.images = Tensor({n, 1, height, width});
  d.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(rng.uniform_index(3));
    d.labels[static_cast<std::size_t>(i)] = label;
    if (label == 0) {
      draw_rectangle(d.images, i, height, width, rng);
    } else if (label == 1) {
      draw_cross(d.images, i, height, width, rng);
    } else {
      draw_circle(d.images, i, height, width, rng);
    }
  }
  return d;
}

NoiseKind parse_noise_kind(std::string_view name) {
  if (name == "salt_pepper") return NoiseKind::salt_pepper;
  if (name == "speckle") return NoiseKind::speckle;
  if (name == "poisson") return NoiseKind::poisson;
  throw std::invalid_argument("unknown noise kind '" + std::string(name) + "' (salt_pepper, speckle, poisson)");
}

std::string_view to_string(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::salt_pepper: return "salt_pepper";
    case NoiseKind::speckle: return "speckle";
    case NoiseKind::poisson: return "poisson";
  }
  return "?";
}

NoiseSpec default_noise(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::salt_pepper: return {kind, 0.1};
    case NoiseKind::speckle: return {kind, 0.3};
    case NoiseKind::poisson: return {kind, 30.0};
  }
  return {kind, 0.0};
}

Tensor inject_noise(const Tensor& image, const NoiseSpec& noise, std::uint64_t seed) {
  check_pixel_range(image, "inject_noise");
  Rng rng(seed);
  Tensor out = image;
  switch (noise.kind) {
    case NoiseKind::salt_pepper: {
      if (!(noise.amount >= 0.0 && noise.amount <= 1.0)) {
        throw std::invalid_argument("salt_pepper rate must lie in [0, 1], got " + std::to_string(noise.amount));
      }
      for (Index i = 0; i < out.size(); ++i) {
        const double u = rng.uniform01();
        if (u < noise.amount) out[i] = u < 0.5 * noise.amount ? 0.0 : 1.0;
      }
      break;
    }
    case NoiseKind::speckle: {
      if (!(noise.amount >= 0.0)) {
        throw std::invalid_argument("speckle std must be >= 0, got " + std::to_string(noise.amount));
      }
      std::normal_distribution<double> dist(0.0, 1.0);
      for (Index i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(out[i] * (1.0 + noise.amount * dist(rng.engine())), 0.0, 1.0);
      }
      break;
    }
    case NoiseKind::poisson: {
      if (!(noise.amount > 0.0)) {
        throw std::invalid_argument("poisson scale must be > 0, got " + std::to_string(noise.amount));
      }
      for (Index i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(static_cast<double>(rng.poisson(out[i] * noise.amount)) / noise.amount, 0.0, 1.0);
      }
      break;
    }
  }
  return out;
}

EpisodeSampler::EpisodeSampler(const Dataset& dataset, Index episode_length, std::uint64_t seed)
    : dataset_(dataset), length_(episode_length), rng_(seed), order_(static_cast<std::size_t>(dataset.size())) {
  if (episode_length < 1 || episode_length > dataset.size()) {
    throw std::invalid_argument("episode length " + std::to_string(episode_length) + " must lie in [1, " +
                                std::to_string(dataset.size()) + "]");
  }
  std::iota(order_.begin(), order_.end(), Index{0});
}

Episode EpisodeSampler::next() {
  const Index n = dataset_.size();
  for (Index i = 0; i < length_; ++i) {
    const Index j = i + rng_.uniform_index(n - i);
    std::swap(order_[static_cast<std::size_t>(i)], order_[static_cast<std::size_t>(j)]);
  }
  Episode e;
  e.dataset_ids.assign(order_.begin(), order_.begin() + length_);
  e.images = dataset_.gather(e.dataset_ids);
  return e;
}

std::vector<Episode> partition_episodes(const Dataset& dataset, Index episode_length, std::uint64_t seed) {
  if (episode_length < 1 || episode_length > dataset.size()) {
    throw std::invalid_argument("episode length " + std::to_string(episode_length) + " must lie in [1, " +
                                std::to_string(dataset.size()) + "]");
  }
  std::vector<Index> order(static_cast<std::size_t>(dataset.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<Episode> episodes;
  for (Index start = 0; start + episode_length <= dataset.size(); start += episode_length) {
    Episode e;
    e.dataset_ids.assign(order.begin() + start, order.begin() + start + episode_length);
    e.images = dataset.gather(e.dataset_ids);
    episodes.push_back(std::move(e));
  }
  return episodes;
}

std::string encode_pgm(const Tensor& image) {
  const Tensor chw = as_chw(image);
  const Index c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  std::vector<unsigned char> pixels(static_cast<std::size_t>(h * w));
  for (Index p = 0; p < h * w; ++p) {
    double acc = 0.0;
    for (Index ch = 0; ch < c; ++ch) acc += chw[ch * h * w + p];
    pixels[static_cast<std::size_t>(p)] = to_byte(acc / static_cast<double>(c));
  }
  return pgm_bytes(pixels, h, w);
}

std::string encode_pgm_grid(const Tensor& images, Index columns) {
  if (images.rank() != 4 || images.dim(0) < 1) {
    throw ShapeError("encode_pgm_grid: expected [N, C, H, W], got " + to_string(images.shape()));
  }
  if (columns < 1) throw std::invalid_argument("encode_pgm_grid: columns must be >= 1");
  const Index n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const Index cols = std::min(columns, n), rows = (n + cols - 1) / cols;
  const Index gh = rows * (h + 1) + 1, gw = cols * (w + 1) + 1;
  std::vector<unsigned char> pixels(static_cast<std::size_t>(gh * gw), 128);
  for (Index k = 0; k < n; ++k) {
    const Index top = (k / cols) * (h + 1) + 1, left = (k % cols) * (w + 1) + 1;
    for (Index r = 0; r < h; ++r) {
      for (Index col = 0; col < w; ++col) {
        double acc = 0.0;
        for (Index ch = 0; ch < c; ++ch) acc += images[((k * c + ch) * h + r) * w + col];
        pixels[static_cast<std::size_t>((top + r) * gw + left + col)] = to_byte(acc / static_cast<double>(c));
      }
    }
  }
  return pgm_bytes(pixels, gh, gw);
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace kpp
