#include "kpp/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace kpp {
namespace {

constexpr char kMagic[4] = {'K', 'P', 'P', '1'};
constexpr const char* kMetaPrefix = "meta.";

template <class T>
void put_le(std::string& out, T value) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(value);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw std::runtime_error("checkpoint truncated at byte " + std::to_string(pos_) + ": need " + std::to_string(n) +
                               " more bytes, have " + std::to_string(bytes_.size() - pos_));
    }
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

Tensor vector_tensor(const std::vector<Index>& values) {
  Tensor t({static_cast<Index>(values.size())});
  for (std::size_t i = 0; i < values.size(); ++i) t[static_cast<Index>(i)] = static_cast<double>(values[i]);
  return t;
}

std::map<std::string, Tensor> config_tensors(const ModelConfig& c) {
  std::map<std::string, Tensor> meta;
  auto m = [&](const char* key, Tensor t) { meta.emplace(std::string(kMetaPrefix) + key, std::move(t)); };
  m("image", vector_tensor({c.image_channels, c.image_height, c.image_width}));
  m("encoder_channels", vector_tensor(c.encoder_channels));
  m("embed_dim", vector_tensor({c.embed_dim}));
  m("tsm", vector_tensor({c.tsm ? 1 : 0}));
  m("memory", vector_tensor({c.memory_channels, c.memory_height, c.memory_width}));
  m("writer_channels", vector_tensor(c.writer_channels));
  m("trace", vector_tensor({c.trace_height, c.trace_width}));
  m("reads", vector_tensor({c.reads}));
  m("latent", vector_tensor({c.latent}));
  m("prior_channels", vector_tensor(c.prior_channels));
  m("decoder_channels", vector_tensor(c.decoder_channels));
  m("no_memory", vector_tensor({c.no_memory ? 1 : 0}));
  m("likelihood", Tensor({2}, {c.likelihood == Likelihood::gaussian ? 1.0 : 0.0, c.gaussian_sigma}));
  m("zero_init_heads", vector_tensor({c.zero_init_heads ? 1 : 0}));
  return meta;
}

ModelConfig config_from(const std::map<std::string, Tensor>& records) {
  auto get = [&](const char* key, Index expected_size = -1) -> const Tensor& {
    auto it = records.find(std::string(kMetaPrefix) + key);
    if (it == records.end()) throw std::runtime_error(std::string("checkpoint missing meta.") + key);
    if (expected_size >= 0 && it->second.size() != expected_size) {
      throw std::runtime_error(std::string("checkpoint meta.") + key + " has wrong size");
    }
    return it->second;
  };
  auto list = [&](const char* key) {
    const Tensor& t = get(key);
    std::vector<Index> v;
    for (Index i = 0; i < t.size(); ++i) v.push_back(static_cast<Index>(t[i]));
    return v;
  };
  auto scalar = [&](const char* key) { return static_cast<Index>(get(key, 1)[0]); };

  ModelConfig c;
  const Tensor& image = get("image", 3);
  c.image_channels = static_cast<Index>(image[0]);
  c.image_height = static_cast<Index>(image[1]);
  c.image_width = static_cast<Index>(image[2]);
  c.encoder_channels = list("encoder_channels");
  c.embed_dim = scalar("embed_dim");
  c.tsm = scalar("tsm") != 0;
  const Tensor& memory = get("memory", 3);
  c.memory_channels = static_cast<Index>(memory[0]);
  c.memory_height = static_cast<Index>(memory[1]);
  c.memory_width = static_cast<Index>(memory[2]);
  c.writer_channels = list("writer_channels");
  const Tensor& trace = get("trace", 2);
  c.trace_height = static_cast<Index>(trace[0]);
  c.trace_width = static_cast<Index>(trace[1]);
  c.reads = scalar("reads");
  c.latent = scalar("latent");
  c.prior_channels = list("prior_channels");
  c.decoder_channels = list("decoder_channels");
  c.no_memory = scalar("no_memory") != 0;
  const Tensor& likelihood = get("likelihood", 2);
  c.likelihood = likelihood[0] != 0.0 ? Likelihood::gaussian : Likelihood::bernoulli;
  c.gaussian_sigma = likelihood[1];
  c.zero_init_heads = scalar("zero_init_heads") != 0;
  return c;
}

void append_record(std::string& out, const std::string& name, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  for (Index i = 0; i < t.size(); ++i) put_le<double>(out, t[i]);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::string bytes(kMagic, sizeof(kMagic));
  for (const auto& [name, t] : config_tensors(params.config)) append_record(bytes, name, t);
  for (const auto& [name, t] : params.tensors) append_record(bytes, name, t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  Reader reader(std::string(std::istreambuf_iterator<char>(in), {}));
  if (reader.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("not a KPP1 checkpoint: " + path.string());
  }

  std::map<std::string, Tensor> records;
  while (!reader.done()) {
    const std::size_t at = reader.offset();
    const auto name = reader.get_string(reader.get<std::uint32_t>());
    const auto rank = reader.get<std::uint32_t>();
    if (rank > 8) throw std::runtime_error("checkpoint record at byte " + std::to_string(at) + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<Index>(reader.get<std::uint64_t>()));
    Tensor t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = reader.get<double>();
    if (!records.emplace(name, std::move(t)).second) {
      throw std::runtime_error("checkpoint has duplicate tensor '" + name + "'");
    }
  }

  ModelParams params{config_from(records), {}};
  params.config.validate();
  for (const auto& spec : parameter_specs(params.config)) {
    auto it = records.find(spec.name);
    if (it == records.end()) throw std::runtime_error("checkpoint missing parameter '" + spec.name + "'");
    if (it->second.shape() != spec.shape) {
      throw std::runtime_error("checkpoint parameter '" + spec.name + "' has shape " + to_string(it->second.shape()) +
                               ", expected " + to_string(spec.shape));
    }
    params.tensors.emplace(spec.name, std::move(it->second));
    records.erase(it);
  }
  for (const auto& [name, t] : records) {
    if (!name.starts_with(kMetaPrefix)) throw std::runtime_error("checkpoint has unexpected tensor '" + name + "'");
  }
  return params;
}

}  // namespace kpp
