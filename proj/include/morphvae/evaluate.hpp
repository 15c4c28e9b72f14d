#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "morphvae/augment.hpp"
#include "morphvae/checkpoint.hpp"
#include "morphvae/dataio.hpp"
#include "morphvae/model.hpp"

namespace morphvae {

/// Worker-thread cap: MORPHVAE_THREADS if set and positive, else the
/// hardware concurrency.
std::size_t worker_threads();

/// Encoder means as an (n, d) matrix. Chunks run on worker threads and are
/// written to disjoint rows, so the result does not depend on the thread
/// count.
template <typename T>
Tensor<double> embed(const Model<T>& model, const ImageBatch& images);
/// Same, from a checkpoint; throws ContractError if expected_dim is nonzero
/// and differs from the checkpoint's latent dimension.
Tensor<double> embed(const Checkpoint& ckpt, const ImageBatch& images, std::size_t expected_dim = 0);

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeReport {
  std::string algorithm;
  std::size_t latent_dim = 0;
  double train_accuracy = 0;
  double test_accuracy = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t iterations = 0;
  double gradient_norm = 0;
  std::string source = "measured";
};

struct ProbeOptions {
  std::size_t max_iterations = 5000;
  double tolerance = 1e-6;  // on the gradient 2-norm
  bool standardize = true;  // z-score features with train statistics
  std::size_t num_classes = 10;
};

/// Multinomial logistic regression (one linear layer + softmax, mean
/// cross-entropy, no regularization), zero-initialized and fit full-batch
/// with L-BFGS. The fit is deterministic; seed is accepted for interface
/// symmetry with the other evaluators and is otherwise unused.
ProbeReport linear_probe(const Tensor<double>& train_x, std::span<const std::uint8_t> train_y,
                         const Tensor<double>& test_x, std::span<const std::uint8_t> test_y, std::uint64_t seed,
                         const ProbeOptions& options = {}, const std::string& algorithm = "probe");

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaBasis {
  std::vector<double> mean;               // length D
  Tensor<double> components;              // (k, D), orthonormal rows
  std::vector<double> explained_variance; // eigenvalues of the covariance, descending

  std::size_t k() const { return components.dim(0); }
  Tensor<double> project(const Tensor<double>& x) const;  // (n, D) -> (n, k)
  Tensor<double> reconstruct(const Tensor<double>& projected) const;  // (n, k) -> (n, D)
};

/// Top-k principal axes of the rows of x (n, D): mean-centered covariance
/// eigenvectors, each signed so its largest-magnitude coordinate is positive.
PcaBasis pca(const Tensor<double>& x, std::size_t k);
/// Flattened images as an (n, pixels) matrix.
Tensor<double> flatten(const ImageBatch& images);
/// Mean squared reconstruction error per row.
double reconstruction_error(const PcaBasis& basis, const Tensor<double>& x);

// ---------------------------------------------------------------------------
// Orbits
// ---------------------------------------------------------------------------

struct OrbitTrace {
  std::size_t digit = 0;
  std::size_t image_index = 0;
  Tensor<double> points;  // (steps, d)
  double step_length = 0; // mean consecutive-point distance
};

inline constexpr std::size_t kOrbitSteps = 120;
inline constexpr double kOrbitStepDegrees = 3.0;

/// Test-set index of the first image of each class 0..9, scanning the set
/// in the order of the seeded permutation.
std::vector<std::size_t> orbit_digits(const LabeledSet& set, std::uint64_t seed);

/// Rotations 0, 3, ..., 357 degrees of each chosen image, encoded to means.
template <typename T>
std::vector<OrbitTrace> orbits(const Model<T>& model, const LabeledSet& set, std::span<const std::size_t> indices);

/// Root-mean-square distance of the rows of x from their centroid.
double latent_spread(const Tensor<double>& x);
/// Mean row norm of x.
double mean_norm(const Tensor<double>& x);

// ---------------------------------------------------------------------------
// Commutativity
// ---------------------------------------------------------------------------

struct CommutativityReport {
  std::vector<double> per_transform;  // normalized mean residual per id
  double overall = 0;                 // mean of per_transform
  double latent_scale = 0;            // mean latent norm of the set
};

/// encode: images -> (n, d) means; transition: (means, id) -> (n, d) means.
using EncodeFn = std::function<Tensor<double>(const ImageBatch&)>;
using TransitionFn = std::function<Tensor<double>(const Tensor<double>&, std::size_t)>;

/// Mean over images of ||transition(encode(x), a) - encode(a(x))||, divided
/// by the mean latent norm of encode(x), for every a in the registry.
CommutativityReport commutativity_residual(const EncodeFn& encode, const TransitionFn& transition,
                                           const ImageBatch& set, const TransformRegistry& registry);

template <typename T>
CommutativityReport commutativity_residual(const Model<T>& model, const ImageBatch& set,
                                           const TransformRegistry& registry);

}  // namespace morphvae
