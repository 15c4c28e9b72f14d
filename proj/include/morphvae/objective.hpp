#pragma once

#include <string>

#include "morphvae/augment.hpp"
#include "morphvae/model.hpp"

namespace morphvae {

/// Terms of the triple ELBO, each batch-averaged.
struct ElboBreakdown {
  double recon_x1 = 0;       // log p(x1 | z1)
  double recon_x2 = 0;       // log p(a(x1) | z2)
  double kl_prior = 0;       // KL(q(z1|x1) || N(0, I))
  double kl_transition = 0;  // KL(q(z2|x2) || p(z2 | z1, a))
  double log_prior_a = 0;    // log p(a); constant under a fixed prior
  double weighted_total = 0;

  static std::string csv_header();
  std::string csv_row() const;
};

/// beta weighs the prior KL, gamma the transition KL. two_branch = false is
/// the plain single-image VAE objective recon_x1 - beta * kl_prior.
struct ElboWeights {
  double beta = 0.01;
  double gamma = 5.0;
  bool two_branch = true;
};

inline constexpr double kProbabilityClamp = 1e-6;

/// Per-row 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2), averaged over rows.
template <typename T> Var<T> kl_standard_normal(const GaussianVar<T>& q);
/// Per-row KL(q || p) between diagonal Gaussians, averaged over rows.
template <typename T> Var<T> kl_diag_gaussians(const GaussianVar<T>& q, const GaussianVar<T>& p);
/// Per-image sum of x log y + (1 - x) log(1 - y), y clamped to
/// [1e-6, 1 - 1e-6], averaged over the batch.
template <typename T> Var<T> bernoulli_loglik(Var<T> probabilities, Var<T> targets);
/// Same quantity from pre-sigmoid logits: x l - softplus(l). No clamp.
template <typename T> Var<T> bernoulli_loglik_logits(Var<T> logits, Var<T> targets);

template <typename T> double kl_standard_normal(const DiagonalGaussian<T>& q);
template <typename T> double kl_diag_gaussians(const DiagonalGaussian<T>& q, const DiagonalGaussian<T>& p);
template <typename T> double bernoulli_loglik(const Tensor<T>& probabilities, const Tensor<T>& targets);

template <typename T>
struct ElboGraph {
  ElboBreakdown terms;
  Var<T> weighted_total;  // scalar node to maximize
};

/// Wires encode(x1) -> z1, encode(x2) -> z2, transition(z1, a), decode(z1),
/// decode(z2). Noise for z1 then z2 is drawn from rng in row-major order.
template <typename T>
ElboGraph<T> elbo(const Model<T>& model, const typename Model<T>::Binding& binding, const TripleBatch& triple,
                  const TransformRegistry& registry, const ElboWeights& weights, Rng& rng);

/// Value-only evaluation of the same objective.
template <typename T>
ElboBreakdown elbo(const Model<T>& model, const TripleBatch& triple, const TransformRegistry& registry,
                   const ElboWeights& weights, Rng& rng);

}  // namespace morphvae
