#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphvae/augment.hpp"
#include "morphvae/model.hpp"
#include "morphvae/train.hpp"

namespace morphvae {

namespace fs = std::filesystem;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Self-describing parameter container.
///
/// Layout (little-endian):
///   "MVAECKPT" u32 version
///   u64 header length, header text (TrainConfig key=value lines, then
///     "[registry]" table rows, then "[meta]" key=value lines)
///   u32 tensor count; per tensor: u32 name length, name, u8 dtype (4 = f32,
///     8 = f64), u32 rank, u64 dims[rank], row-major payload
struct Checkpoint {
  TrainConfig config;
  std::string registry_table;
  std::map<std::string, std::string> meta;
  int precision = 32;
  /// Held widened to double; written back in `precision`, so float
  /// payloads round-trip bit-exactly.
  std::vector<NamedTensor<double>> params;

  template <typename T>
  static Checkpoint from_model(const Model<T>& model, const TrainConfig& config, const TransformRegistry& registry,
                               std::map<std::string, std::string> meta = {});
  template <typename T>
  Model<T> to_model() const;
  TransformRegistry registry() const { return TransformRegistry::parse_table(registry_table); }
  std::size_t latent_dim() const { return config.model.latent_dim; }
};

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

}  // namespace morphvae
