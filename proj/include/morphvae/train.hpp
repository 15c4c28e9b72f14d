#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "morphvae/augment.hpp"
#include "morphvae/dataio.hpp"
#include "morphvae/model.hpp"
#include "morphvae/objective.hpp"

namespace morphvae {

namespace fs = std::filesystem;

/// Malformed or incomplete key=value configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t latent_dim = 64;
  double beta = 0.01;
  double gamma = 5.0;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 128;
  std::size_t epochs = 20;
  std::size_t subset = 0;  // 0 = full training split
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1;  // epochs
  double clip_norm = 100.0;
  bool two_branch = true;  // false: plain VAE mode
  int precision = 32;      // 32 or 64
  ModelConfig model{};

  /// Plain-VAE baseline: single branch, beta = 1, gamma = 0.
  static TrainConfig plain_vae(TrainConfig base);

  /// Parses `key = value` lines with `#` comments. latent_dim is required;
  /// every other key defaults. Unknown keys and bad values raise ConfigError.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const fs::path& path);
  std::string to_text() const;
  void validate() const;
  ElboWeights weights() const { return {beta, gamma, two_branch}; }
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<NamedTensor<T>>& params);
};

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam descent step. grads[i] pairs with params[i].
template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamHyper& hyper);

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  ElboBreakdown terms;
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::vector<double> epoch_mean_total;
  fs::path final_checkpoint;
};

/// Raised when any ELBO term or gradient turns non-finite.
class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(std::size_t step, const fs::path& last_good, const std::string& what);
  std::size_t step() const { return step_; }
  const fs::path& last_good() const { return last_good_; }

 private:
  std::size_t step_;
  fs::path last_good_;
};

struct TrainHooks {
  /// Called after every optimizer step.
  std::function<void(const StepLog&)> on_step;
  /// Called after each epoch with the epoch index and mean weighted total.
  std::function<void(std::size_t, double)> on_epoch;
};

/// Runs Adam ascent on the weighted ELBO. When out_dir is set, writes
/// checkpoints every checkpoint_every epochs, a final checkpoint and the
/// training-log CSV there. The model is updated in place.
template <typename T>
TrainResult train(Model<T>& model, const TrainConfig& config, const LabeledSet& data,
                  const TransformRegistry& registry, const std::optional<fs::path>& out_dir = std::nullopt,
                  const TrainHooks& hooks = {});

/// Model sized for the config with the config's init seed.
template <typename T>
Model<T> initial_model(const TrainConfig& config, const TransformRegistry& registry);

std::string training_log_header();
std::string training_log_row(const StepLog& s);

}  // namespace morphvae
