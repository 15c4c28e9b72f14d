#include "morphvae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace morphvae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::string& what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw CheckpointError("checkpoint truncated reading " + what);
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::string& what) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint truncated reading " + what);
  return s;
}

}  // namespace

template <typename T>
Checkpoint Checkpoint::from_model(const Model<T>& model, const TrainConfig& config, const TransformRegistry& registry,
                                  std::map<std::string, std::string> meta) {
  Checkpoint c;
  c.config = config;
  c.config.model = model.config();
  c.config.latent_dim = model.config().latent_dim;
  c.config.precision = sizeof(T) == 8 ? 64 : 32;
  c.precision = c.config.precision;
  c.registry_table = registry.table();
  c.meta = std::move(meta);
  for (const auto& p : model.params()) c.params.push_back({p.name, p.value.template cast<double>()});
  return c;
}

template <typename T>
Model<T> Checkpoint::to_model() const {
  std::vector<NamedTensor<T>> ps;
  ps.reserve(params.size());
  for (const auto& p : params) ps.push_back({p.name, p.value.cast<T>()});
  return Model<T>(config.model, std::move(ps));
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  std::ostringstream header;
  header << ckpt.config.to_text() << "[registry]\n" << ckpt.registry_table << "[meta]\n";
  for (const auto& [k, v] : ckpt.meta) header << k << '=' << v << '\n';
  const std::string h = header.str();

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(os, ckpt.precision == 64 ? 8 : 4);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
      if (ckpt.precision == 64) {
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      } else {
        std::vector<float> f(t.values().begin(), t.values().end());
        os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
      }
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path.string() + ": not a checkpoint");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kVersion) throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  const auto hlen = get<std::uint64_t>(is, "header length");
  if (hlen > (1u << 24)) throw CheckpointError(path.string() + ": implausible header length");
  const std::string header = get_string(is, hlen, "header");

  Checkpoint c;
  const auto reg = header.find("[registry]\n");
  const auto meta = header.find("[meta]\n");
  if (reg == std::string::npos || meta == std::string::npos || meta < reg) {
    throw CheckpointError(path.string() + ": malformed header");
  }
  try {
    c.config = TrainConfig::parse(header.substr(0, reg));
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  c.precision = c.config.precision;
  c.registry_table = header.substr(reg + 11, meta - reg - 11);
  std::istringstream ms(header.substr(meta + 7));
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) c.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }

  const auto count = get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = get<std::uint32_t>(is, "name length");
    std::string name = get_string(is, nlen, "tensor name");
    const auto dtype = get<std::uint8_t>(is, name + " dtype");
    if (dtype != 4 && dtype != 8) throw CheckpointError(name + ": unknown dtype " + std::to_string(dtype));
    const auto rank = get<std::uint32_t>(is, name + " rank");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is, name + " dims");
    const std::size_t n = numel(shape);
    std::vector<double> values(n);
    if (dtype == 8) {
      if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * 8))) {
        throw CheckpointError(name + ": truncated payload");
      }
    } else {
      std::vector<float> f(n);
      if (!is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * 4))) {
        throw CheckpointError(name + ": truncated payload");
      }
      values.assign(f.begin(), f.end());
    }
    c.params.push_back({std::move(name), Tensor<double>(std::move(shape), std::move(values))});
  }
  return c;
}

template Checkpoint Checkpoint::from_model(const Model<float>&, const TrainConfig&, const TransformRegistry&,
                                           std::map<std::string, std::string>);
template Checkpoint Checkpoint::from_model(const Model<double>&, const TrainConfig&, const TransformRegistry&,
                                           std::map<std::string, std::string>);
template Model<float> Checkpoint::to_model() const;
template Model<double> Checkpoint::to_model() const;

}  // namespace morphvae
