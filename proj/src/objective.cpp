#include "morphvae/objective.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace morphvae {

std::string ElboBreakdown::csv_header() {
  return "recon_x1,recon_x2,kl_prior,kl_transition,log_prior_a,weighted_total";
}

std::string ElboBreakdown::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << recon_x1 << ',' << recon_x2 << ',' << kl_prior << ',' << kl_transition << ',' << log_prior_a << ','
     << weighted_total;
  return os.str();
}

namespace {

template <typename T>
std::vector<std::size_t> trailing_axes(const Var<T>& v) {
  std::vector<std::size_t> axes(v.shape().size() - 1);
  std::iota(axes.begin(), axes.end(), std::size_t{1});
  return axes;
}

template <typename T>
Var<T> batch_mean_of_row_sums(Var<T> per_element) {
  return mean(sum(per_element, trailing_axes(per_element)));
}

template <typename T>
Var<T> as_var(Graph<T>& g, const Tensor<T>& t) {
  return g.constant(t);
}

}  // namespace

template <typename T>
Var<T> kl_standard_normal(const GaussianVar<T>& q) {
  // mu^2 + exp(lv) - 1 - lv
  Var<T> e = square(q.mean) + exp(q.log_variance) - q.log_variance;
  return scale(batch_mean_of_row_sums(add_scalar(e, T(-1))), T(0.5));
}

template <typename T>
Var<T> kl_diag_gaussians(const GaussianVar<T>& q, const GaussianVar<T>& p) {
  if (q.mean.shape() != p.mean.shape()) throw ShapeError("kl_diag_gaussians", q.mean.shape(), p.mean.shape());
  // 1/2 (lvp - lvq) + (exp(lvq) + (mq - mp)^2) / (2 exp(lvp)) - 1/2
  Var<T> ratio = exp(q.log_variance - p.log_variance);
  Var<T> gap = square(q.mean - p.mean) * exp(-p.log_variance);
  Var<T> e = (p.log_variance - q.log_variance) + ratio + gap;
  return scale(batch_mean_of_row_sums(add_scalar(e, T(-1))), T(0.5));
}

template <typename T>
Var<T> bernoulli_loglik(Var<T> probabilities, Var<T> targets) {
  if (probabilities.shape() != targets.shape()) throw ShapeError("bernoulli_loglik", probabilities.shape(), targets.shape());
  const T eps = static_cast<T>(kProbabilityClamp);
  Var<T> p = clamp(probabilities, eps, T(1) - eps);
  Var<T> one_minus_x = add_scalar(-targets, T(1));
  Var<T> one_minus_p = add_scalar(-p, T(1));
  return batch_mean_of_row_sums(targets * log(p) + one_minus_x * log(one_minus_p));
}

template <typename T>
Var<T> bernoulli_loglik_logits(Var<T> logits, Var<T> targets) {
  if (logits.shape() != targets.shape()) throw ShapeError("bernoulli_loglik_logits", logits.shape(), targets.shape());
  return batch_mean_of_row_sums(targets * logits - softplus(logits));
}

template <typename T>
double kl_standard_normal(const DiagonalGaussian<T>& q) {
  Graph<T> g;
  g.set_recording(false);
  return kl_standard_normal(GaussianVar<T>{as_var(g, q.mean), as_var(g, q.log_variance)}).value().item();
}

template <typename T>
double kl_diag_gaussians(const DiagonalGaussian<T>& q, const DiagonalGaussian<T>& p) {
  Graph<T> g;
  g.set_recording(false);
  return kl_diag_gaussians(GaussianVar<T>{as_var(g, q.mean), as_var(g, q.log_variance)},
                           GaussianVar<T>{as_var(g, p.mean), as_var(g, p.log_variance)})
      .value()
      .item();
}

template <typename T>
double bernoulli_loglik(const Tensor<T>& probabilities, const Tensor<T>& targets) {
  Graph<T> g;
  g.set_recording(false);
  return bernoulli_loglik(as_var(g, probabilities), as_var(g, targets)).value().item();
}

template <typename T>
ElboGraph<T> elbo(const Model<T>& model, const typename Model<T>::Binding& binding, const TripleBatch& triple,
                  const TransformRegistry& registry, const ElboWeights& weights, Rng& rng) {
  if (weights.beta < 0 || weights.gamma < 0) throw ContractError("elbo: beta and gamma must be non-negative");
  Graph<T>& g = binding.graph();
  Var<T> x1 = g.constant(triple.x1.as<T>());
  GaussianVar<T> q1 = model.encode(binding, x1);
  Var<T> z1 = reparameterize(q1, rng);
  Var<T> recon1 = bernoulli_loglik_logits(model.decode_logits(binding, z1), x1);
  Var<T> kl1 = kl_standard_normal(q1);
  Var<T> total = recon1 - scale(kl1, static_cast<T>(weights.beta));

  ElboGraph<T> out;
  out.terms.recon_x1 = recon1.value().item();
  out.terms.kl_prior = kl1.value().item();

  if (weights.two_branch) {
    if (triple.transform_ids.size() != triple.x1.size() || triple.x2.size() != triple.x1.size()) {
      throw ContractError("elbo: triple parts have different lengths");
    }
    double log_prior = 0.0;
    for (std::size_t id : triple.transform_ids) log_prior += std::log(registry.prior().at(id));
    log_prior /= static_cast<double>(triple.transform_ids.size());

    Var<T> x2 = g.constant(triple.x2.as<T>());
    GaussianVar<T> q2 = model.encode(binding, x2);
    Var<T> z2 = reparameterize(q2, rng);
    Var<T> recon2 = bernoulli_loglik_logits(model.decode_logits(binding, z2), x2);
    GaussianVar<T> p2 = model.transition(binding, z1, triple.transform_ids);
    Var<T> kl2 = kl_diag_gaussians(q2, p2);
    total = add_scalar(total + recon2 - scale(kl2, static_cast<T>(weights.gamma)), static_cast<T>(log_prior));

    out.terms.recon_x2 = recon2.value().item();
    out.terms.kl_transition = kl2.value().item();
    out.terms.log_prior_a = log_prior;
  }
  out.terms.weighted_total = total.value().item();
  out.weighted_total = total;
  return out;
}

template <typename T>
ElboBreakdown elbo(const Model<T>& model, const TripleBatch& triple, const TransformRegistry& registry,
                   const ElboWeights& weights, Rng& rng) {
  Graph<T> g;
  g.set_recording(false);
  auto b = model.bind(g, false);
  return elbo(model, b, triple, registry, weights, rng).terms;
}

#define MORPHVAE_INSTANTIATE(T)                                                                                   \
  template Var<T> kl_standard_normal(const GaussianVar<T>&);                                                      \
  template Var<T> kl_diag_gaussians(const GaussianVar<T>&, const GaussianVar<T>&);                                \
  template Var<T> bernoulli_loglik(Var<T>, Var<T>);                                                               \
  template Var<T> bernoulli_loglik_logits(Var<T>, Var<T>);                                                        \
  template double kl_standard_normal(const DiagonalGaussian<T>&);                                                 \
  template double kl_diag_gaussians(const DiagonalGaussian<T>&, const DiagonalGaussian<T>&);                      \
  template double bernoulli_loglik(const Tensor<T>&, const Tensor<T>&);                                           \
  template ElboGraph<T> elbo(const Model<T>&, const Model<T>::Binding&, const TripleBatch&,                       \
                             const TransformRegistry&, const ElboWeights&, Rng&);                                 \
  template ElboBreakdown elbo(const Model<T>&, const TripleBatch&, const TransformRegistry&, const ElboWeights&, \
                              Rng&);

MORPHVAE_INSTANTIATE(float)
MORPHVAE_INSTANTIATE(double)

#undef MORPHVAE_INSTANTIATE

}  // namespace morphvae
