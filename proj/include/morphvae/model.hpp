#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "morphvae/autodiff.hpp"
#include "morphvae/rng.hpp"
#include "morphvae/tensor.hpp"

namespace morphvae {

/// Network sizes. Defaults are the 28x28 MNIST architecture; tests shrink
/// image_size and widths for 64-bit gradient checks.
struct ModelConfig {
  std::size_t image_size = 28;
  std::vector<std::size_t> conv_channels{32, 64, 128};
  std::size_t kernel = 3;
  std::size_t latent_dim = 64;
  std::vector<std::size_t> transition_hidden{256, 256};
  std::size_t num_transforms = 12;
  double log_variance_min = -10.0;
  double log_variance_max = 10.0;

  /// Spatial side after each encoder conv, starting with image_size.
  std::vector<std::size_t> spatial_sizes() const;
  void validate() const;
};

template <typename T>
struct DiagonalGaussian {
  Tensor<T> mean;
  Tensor<T> log_variance;
};

/// Graph-level Gaussian: both fields are nodes of one Graph.
template <typename T>
struct GaussianVar {
  Var<T> mean;
  Var<T> log_variance;

  DiagonalGaussian<T> value() const { return {mean.value(), log_variance.value()}; }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Encoder, decoder and latent transition network. One parameter set serves
/// both branches of a triple.
template <typename T>
class Model {
 public:
  /// Parameters of this model inserted into a Graph, in params() order.
  class Binding {
   public:
    Graph<T>& graph() const { return *graph_; }
    Var<T> at(std::size_t i) const { return vars_.at(i); }
    std::span<const Var<T>> vars() const { return vars_; }

   private:
    friend class Model;
    Graph<T>* graph_ = nullptr;
    std::vector<Var<T>> vars_;
  };

  /// Fan-in-scaled uniform weights from the seeded generator; zero biases.
  Model(ModelConfig config, std::uint64_t init_seed);
  /// Adopts existing parameters; names and shapes must match the config.
  Model(ModelConfig config, std::vector<NamedTensor<T>> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }
  std::vector<NamedTensor<T>>& mutable_params() { return params_; }
  std::size_t index_of(const std::string& name) const;

  /// trainable = true makes every parameter a leaf that receives adjoints.
  Binding bind(Graph<T>& g, bool trainable) const;

  /// q(z|x). images: (n, 1, S, S).
  GaussianVar<T> encode(const Binding& b, Var<T> images) const;
  /// Pre-sigmoid decoder output (n, 1, S, S).
  Var<T> decode_logits(const Binding& b, Var<T> z) const;
  /// Per-pixel Bernoulli probabilities (n, 1, S, S).
  Var<T> decode(const Binding& b, Var<T> z) const { return sigmoid(decode_logits(b, z)); }
  /// p(z2 | z1, a) from concat(z1, one_hot(a)).
  GaussianVar<T> transition(const Binding& b, Var<T> z1, std::span<const std::size_t> transform_ids) const;

  // Inference conveniences (no adjoints), processed in chunks.
  DiagonalGaussian<T> encode(const Tensor<T>& images, std::size_t chunk = 500) const;
  Tensor<T> decode(const Tensor<T>& z) const;
  DiagonalGaussian<T> transition(const Tensor<T>& z1, std::span<const std::size_t> transform_ids) const;

 private:
  Var<T> param(const Binding& b, const std::string& name) const { return b.at(index_of(name)); }
  Var<T> dense(const Binding& b, Var<T> x, const std::string& prefix) const;
  GaussianVar<T> gaussian_heads(const Binding& b, Var<T> h, const std::string& prefix) const;
  std::vector<NamedTensor<T>> layout() const;

  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
};

/// z = mean + exp(log_variance / 2) * eps with eps ~ N(0, I) drawn row-major
/// from rng. eps is a constant of the graph.
template <typename T>
Var<T> reparameterize(const GaussianVar<T>& g, Rng& rng);

template <typename T>
Tensor<T> reparameterize(const DiagonalGaussian<T>& g, Rng& rng);

/// (n, count) one-hot rows; ContractError on ids >= count.
template <typename T>
Tensor<T> one_hot(std::span<const std::size_t> ids, std::size_t count);

}  // namespace morphvae
