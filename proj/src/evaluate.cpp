#include "morphvae/evaluate.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <limits>
#include <numeric>
#include <thread>

namespace morphvae {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const Mat>;
using Vec = Eigen::VectorXd;

MapC as_matrix(const Tensor<double>& t) {
  if (t.rank() != 2) throw ShapeError("matrix view", t.shape(), Shape{});
  return MapC(t.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

Tensor<double> from_matrix(const Mat& m) {
  return Tensor<double>({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                        std::vector<double>(m.data(), m.data() + m.size()));
}

}  // namespace

std::size_t worker_threads() {
  if (const char* env = std::getenv("MORPHVAE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

template <typename T>
Tensor<double> embed(const Model<T>& model, const ImageBatch& images) {
  images.validate();
  const std::size_t n = images.size();
  const std::size_t d = model.config().latent_dim;
  const std::size_t px = images.pixels();
  constexpr std::size_t chunk = 500;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<double> out(n * d);

  auto work = [&](std::size_t first_chunk, std::size_t stride) {
    for (std::size_t c = first_chunk; c < chunks; c += stride) {
      const std::size_t lo = c * chunk;
      const std::size_t m = std::min(chunk, n - lo);
      std::vector<T> buf(m * px);
      const float* src = images.images.data() + lo * px;
      std::copy(src, src + m * px, buf.begin());
      Tensor<T> x({m, 1, images.rows(), images.cols()}, std::move(buf));
      const auto q = model.encode(x, chunk);
      std::copy(q.mean.values().begin(), q.mean.values().end(), out.begin() + static_cast<std::ptrdiff_t>(lo * d));
    }
  };
  const std::size_t threads = std::min(worker_threads(), std::max<std::size_t>(1, chunks));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  }
  return Tensor<double>({n, d}, std::move(out));
}

Tensor<double> embed(const Checkpoint& ckpt, const ImageBatch& images, std::size_t expected_dim) {
  if (expected_dim != 0 && expected_dim != ckpt.latent_dim()) {
    throw ContractError("embed: checkpoint latent dim " + std::to_string(ckpt.latent_dim()) + " != expected " +
                        std::to_string(expected_dim));
  }
  if (images.rows() != ckpt.config.model.image_size || images.cols() != ckpt.config.model.image_size) {
    throw ContractError("embed: image size does not match checkpoint");
  }
  if (ckpt.precision == 64) return embed(ckpt.to_model<double>(), images);
  return embed(ckpt.to_model<float>(), images);
}

// ---------------------------------------------------------------------------

namespace {

struct Softmax {
  const Mat& x;  // (n, d) standardized features
  std::vector<std::uint8_t> y;
  std::size_t classes;

  // theta = [W (d x C) row-major | b (C)]
  double operator()(const Vec& theta, Vec& grad) const {
    const auto n = x.rows();
    const auto d = x.cols();
    const auto C = static_cast<Eigen::Index>(classes);
    Eigen::Map<const Mat> W(theta.data(), d, C);
    Eigen::Map<const Eigen::RowVectorXd> b(theta.data() + d * C, C);
    Mat logits = x * W;
    logits.rowwise() += b;
    double loss = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto row = logits.row(i);
      const double mx = row.maxCoeff();
      row.array() -= mx;
      const double lse = std::log(row.array().exp().sum());
      loss += lse - row(y[static_cast<std::size_t>(i)]);
      row = (row.array() - lse).exp();
      row(y[static_cast<std::size_t>(i)]) -= 1.0;
    }
    logits /= static_cast<double>(n);
    grad.resize(theta.size());
    Eigen::Map<Mat> gW(grad.data(), d, C);
    gW.noalias() = x.transpose() * logits;
    Eigen::Map<Eigen::RowVectorXd>(grad.data() + d * C, C) = logits.colwise().sum();
    return loss / static_cast<double>(n);
  }
};

struct LbfgsResult {
  Vec theta;
  std::size_t iterations = 0;
  double gradient_norm = 0;
};

template <typename F>
LbfgsResult lbfgs(const F& f, Vec theta, std::size_t max_iterations, double tolerance, std::size_t memory = 10) {
  Vec g;
  double fx = f(theta, g);
  std::deque<Vec> S, Y;
  std::deque<double> rho;
  LbfgsResult r;
  Vec g_new, theta_new;
  for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
    if (g.norm() <= tolerance) break;
    // Two-loop recursion.
    Vec q = g;
    std::vector<double> alpha(S.size());
    for (std::size_t i = S.size(); i-- > 0;) {
      alpha[i] = rho[i] * S[i].dot(q);
      q -= alpha[i] * Y[i];
    }
    if (!S.empty()) q *= S.back().dot(Y.back()) / Y.back().squaredNorm();
    for (std::size_t i = 0; i < S.size(); ++i) {
      const double beta = rho[i] * Y[i].dot(q);
      q += (alpha[i] - beta) * S[i];
    }
    Vec dir = -q;
    double slope = g.dot(dir);
    if (slope >= 0) {
      dir = -g;
      slope = -g.squaredNorm();
      S.clear();
      Y.clear();
      rho.clear();
    }
    double step = S.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    double f_new = 0;
    bool accepted = false;
    for (int k = 0; k < 40; ++k) {
      theta_new = theta + step * dir;
      f_new = f(theta_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    Vec s = theta_new - theta;
    Vec yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * yv.squaredNorm()) {
      S.push_back(std::move(s));
      Y.push_back(std::move(yv));
      rho.push_back(1.0 / sy);
      if (S.size() > memory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
    }
    theta.swap(theta_new);
    g.swap(g_new);
    fx = f_new;
  }
  r.gradient_norm = g.norm();
  r.theta = std::move(theta);
  return r;
}

}  // namespace

ProbeReport linear_probe(const Tensor<double>& train_x, std::span<const std::uint8_t> train_y,
                         const Tensor<double>& test_x, std::span<const std::uint8_t> test_y, std::uint64_t /*seed*/,
                         const ProbeOptions& options, const std::string& algorithm) {
  if (train_x.rank() != 2 || test_x.rank() != 2 || train_x.dim(1) != test_x.dim(1)) {
    throw ShapeError("linear_probe", train_x.shape(), test_x.shape());
  }
  if (train_x.dim(0) != train_y.size() || test_x.dim(0) != test_y.size()) {
    throw ContractError("linear_probe: feature and label counts differ");
  }
  const std::size_t C = options.num_classes;
  std::vector<std::size_t> counts(C, 0);
  for (auto l : train_y) {
    if (l >= C) throw ContractError("linear_probe: label out of range");
    ++counts[l];
  }
  for (auto l : test_y) {
    if (l >= C) throw ContractError("linear_probe: label out of range");
  }
  if (std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) < 2) {
    throw ContractError("linear_probe: training labels contain a single class");
  }

  const auto d = static_cast<Eigen::Index>(train_x.dim(1));
  Mat xtr = as_matrix(train_x);
  Mat xte = as_matrix(test_x);
  if (options.standardize) {
    const Eigen::RowVectorXd mu = xtr.colwise().mean();
    xtr.rowwise() -= mu;
    xte.rowwise() -= mu;
    Eigen::RowVectorXd sd = (xtr.array().square().colwise().sum() / static_cast<double>(xtr.rows())).sqrt();
    for (Eigen::Index j = 0; j < d; ++j) {
      if (sd(j) < 1e-12) sd(j) = 1.0;
    }
    xtr.array().rowwise() /= sd.array();
    xte.array().rowwise() /= sd.array();
  }

  Softmax f{xtr, std::vector<std::uint8_t>(train_y.begin(), train_y.end()), C};
  const auto Ci = static_cast<Eigen::Index>(C);
  auto fit = lbfgs(f, Vec::Zero(d * Ci + Ci), options.max_iterations, options.tolerance);

  Eigen::Map<const Mat> W(fit.theta.data(), d, Ci);
  Eigen::Map<const Eigen::RowVectorXd> b(fit.theta.data() + d * Ci, Ci);
  auto predict = [&](const Mat& x) {
    Mat logits = x * W;
    logits.rowwise() += b;
    std::vector<std::size_t> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::Index arg = 0;
      logits.row(i).maxCoeff(&arg);  // first maximum wins ties
      out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arg);
    }
    return out;
  };

  ProbeReport r;
  r.algorithm = algorithm;
  r.latent_dim = static_cast<std::size_t>(d);
  r.iterations = fit.iterations;
  r.gradient_norm = fit.gradient_norm;
  const auto ptr = predict(xtr);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ptr.size(); ++i) hit += ptr[i] == train_y[i];
  r.train_accuracy = static_cast<double>(hit) / static_cast<double>(ptr.size());
  r.confusion.assign(C, std::vector<std::size_t>(C, 0));
  const auto pte = predict(xte);
  hit = 0;
  for (std::size_t i = 0; i < pte.size(); ++i) {
    hit += pte[i] == test_y[i];
    ++r.confusion[test_y[i]][pte[i]];
  }
  r.test_accuracy = pte.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pte.size());
  return r;
}

// ---------------------------------------------------------------------------

Tensor<double> PcaBasis::project(const Tensor<double>& x) const {
  const auto X = as_matrix(x);
  const auto P = as_matrix(components);
  if (X.cols() != P.cols()) throw ShapeError("pca project", x.shape(), components.shape());
  const Eigen::Map<const Eigen::RowVectorXd> mu(mean.data(), static_cast<Eigen::Index>(mean.size()));
  Mat out = (X.rowwise() - mu) * P.transpose();
  return from_matrix(out);
}

Tensor<double> PcaBasis::reconstruct(const Tensor<double>& projected) const {
  const auto Z = as_matrix(projected);
  const auto P = as_matrix(components);
  if (Z.cols() != P.rows()) throw ShapeError("pca reconstruct", projected.shape(), components.shape());
  const Eigen::Map<const Eigen::RowVectorXd> mu(mean.data(), static_cast<Eigen::Index>(mean.size()));
  Mat out = Z * P;
  out.rowwise() += mu;
  return from_matrix(out);
}

PcaBasis pca(const Tensor<double>& x, std::size_t k) {
  const auto X = as_matrix(x);
  const auto n = static_cast<std::size_t>(X.rows());
  const auto D = static_cast<std::size_t>(X.cols());
  if (k == 0 || k > std::min(n, D)) {
    throw ContractError("pca: k=" + std::to_string(k) + " exceeds min(n, D)=" + std::to_string(std::min(n, D)));
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  // Covariance accumulated in row blocks to bound the centered copy.
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(X.cols(), X.cols());
  constexpr Eigen::Index block = 4096;
  for (Eigen::Index r = 0; r < X.rows(); r += block) {
    const Eigen::Index m = std::min(block, X.rows() - r);
    const Eigen::MatrixXd c = X.middleRows(r, m).rowwise() - mu;
    cov.selfadjointView<Eigen::Lower>().rankUpdate(c.transpose());
  }
  cov.triangularView<Eigen::StrictlyUpper>() = cov.transpose();
  cov /= static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericalFault("pca: eigen-decomposition failed");

  PcaBasis b;
  b.mean.assign(mu.data(), mu.data() + D);
  std::vector<double> comp(k * D);
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::Index col = static_cast<Eigen::Index>(D - 1 - i);  // ascending eigenvalues
    Vec v = es.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    std::copy(v.data(), v.data() + D, comp.begin() + static_cast<std::ptrdiff_t>(i * D));
    b.explained_variance.push_back(std::max(0.0, es.eigenvalues()(col)));
  }
  b.components = Tensor<double>({k, D}, std::move(comp));
  return b;
}

Tensor<double> flatten(const ImageBatch& images) {
  images.validate();
  const auto& v = images.images.values();
  return Tensor<double>({images.size(), images.pixels()}, std::vector<double>(v.begin(), v.end()));
}

double reconstruction_error(const PcaBasis& basis, const Tensor<double>& x) {
  const Tensor<double> r = basis.reconstruct(basis.project(x));
  return (as_matrix(r) - as_matrix(x)).rowwise().squaredNorm().mean();
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> orbit_digits(const LabeledSet& set, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "orbits"));
  const auto order = rng.permutation(set.labels.size());
  std::vector<std::size_t> found(10, std::numeric_limits<std::size_t>::max());
  std::size_t missing = 10;
  for (std::size_t i : order) {
    const auto c = set.labels[i];
    if (c < 10 && found[c] == std::numeric_limits<std::size_t>::max()) {
      found[c] = i;
      if (--missing == 0) break;
    }
  }
  if (missing != 0) throw ContractError("orbit_digits: set lacks some digit classes");
  return found;
}

template <typename T>
std::vector<OrbitTrace> orbits(const Model<T>& model, const LabeledSet& set, std::span<const std::size_t> indices) {
  const ImageBatch& b = set.batch;
  const auto [cx, cy] = warp_center(b.rows(), b.cols());
  std::vector<OrbitTrace> out;
  for (std::size_t idx : indices) {
    const ImageBatch one = gather(b, std::vector<std::size_t>{idx});
    std::vector<float> frames;
    frames.reserve(kOrbitSteps * b.pixels());
    for (std::size_t s = 0; s < kOrbitSteps; ++s) {
      const Affine rot = Affine::rotation(kOrbitStepDegrees * static_cast<double>(s), cx, cy);
      const ImageBatch w = warp_affine(one, rot);
      frames.insert(frames.end(), w.images.values().begin(), w.images.values().end());
    }
    ImageBatch seq;
    seq.images = Tensor<float>({kOrbitSteps, 1, b.rows(), b.cols()}, std::move(frames));
    seq.ids.assign(kOrbitSteps, b.ids.empty() ? idx : b.ids[idx]);

    OrbitTrace t;
    t.digit = set.labels.at(idx);
    t.image_index = idx;
    t.points = embed(model, seq);
    const auto P = as_matrix(t.points);
    double total = 0;
    for (Eigen::Index i = 1; i < P.rows(); ++i) total += (P.row(i) - P.row(i - 1)).norm();
    t.step_length = total / static_cast<double>(P.rows() - 1);
    out.push_back(std::move(t));
  }
  return out;
}

double latent_spread(const Tensor<double>& x) {
  const auto X = as_matrix(x);
  const Eigen::RowVectorXd mu = X.colwise().mean();
  return std::sqrt((X.rowwise() - mu).rowwise().squaredNorm().mean());
}

double mean_norm(const Tensor<double>& x) { return as_matrix(x).rowwise().norm().mean(); }

// ---------------------------------------------------------------------------

CommutativityReport commutativity_residual(const EncodeFn& encode, const TransitionFn& transition,
                                           const ImageBatch& set, const TransformRegistry& registry) {
  CommutativityReport r;
  const Tensor<double> z = encode(set);
  r.latent_scale = mean_norm(z);
  const double scale = r.latent_scale > 0 ? r.latent_scale : 1.0;
  for (std::size_t a = 0; a < registry.size(); ++a) {
    const Tensor<double> predicted = transition(z, a);
    const Tensor<double> actual = encode(registry.apply(a, set));
    const double res = (as_matrix(predicted) - as_matrix(actual)).rowwise().norm().mean();
    r.per_transform.push_back(res / scale);
  }
  r.overall = r.per_transform.empty()
                  ? 0.0
                  : std::accumulate(r.per_transform.begin(), r.per_transform.end(), 0.0) /
                        static_cast<double>(r.per_transform.size());
  return r;
}

template <typename T>
CommutativityReport commutativity_residual(const Model<T>& model, const ImageBatch& set,
                                           const TransformRegistry& registry) {
  EncodeFn enc = [&](const ImageBatch& b) { return embed(model, b); };
  TransitionFn tr = [&](const Tensor<double>& z, std::size_t a) {
    const std::vector<std::size_t> ids(z.dim(0), a);
    const auto q = model.transition(z.cast<T>(), ids);
    return q.mean.template cast<double>();
  };
  return commutativity_residual(enc, tr, set, registry);
}

template Tensor<double> embed(const Model<float>&, const ImageBatch&);
template Tensor<double> embed(const Model<double>&, const ImageBatch&);
template std::vector<OrbitTrace> orbits(const Model<float>&, const LabeledSet&, std::span<const std::size_t>);
template std::vector<OrbitTrace> orbits(const Model<double>&, const LabeledSet&, std::span<const std::size_t>);
template CommutativityReport commutativity_residual(const Model<float>&, const ImageBatch&, const TransformRegistry&);
template CommutativityReport commutativity_residual(const Model<double>&, const ImageBatch&, const TransformRegistry&);

}  // namespace morphvae
