#include "morphvae/model.hpp"

#include <algorithm>
#include <cmath>

namespace morphvae {

std::vector<std::size_t> ModelConfig::spatial_sizes() const {
  std::vector<std::size_t> s{image_size};
  const std::size_t pad = kernel / 2;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    s.push_back((s.back() + 2 * pad - kernel) / 2 + 1);
  }
  return s;
}

void ModelConfig::validate() const {
  if (image_size < 2) throw ContractError("ModelConfig: image_size too small");
  if (conv_channels.empty()) throw ContractError("ModelConfig: need at least one conv layer");
  if (kernel == 0 || kernel % 2 == 0) throw ContractError("ModelConfig: kernel must be odd");
  if (latent_dim == 0) throw ContractError("ModelConfig: latent_dim must be positive");
  if (num_transforms == 0) throw ContractError("ModelConfig: num_transforms must be positive");
  if (!(log_variance_min < log_variance_max)) throw ContractError("ModelConfig: bad log-variance clamp");
  for (std::size_t c : conv_channels) {
    if (c == 0) throw ContractError("ModelConfig: zero conv width");
  }
  for (std::size_t h : transition_hidden) {
    if (h == 0) throw ContractError("ModelConfig: zero transition width");
  }
  for (std::size_t s : spatial_sizes()) {
    if (s == 0) throw ContractError("ModelConfig: image_size too small for conv stack");
  }
}

template <typename T>
Tensor<T> one_hot(std::span<const std::size_t> ids, std::size_t count) {
  Tensor<T> out(Shape{ids.size(), count}, T(0));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= count) {
      throw ContractError("transform id " + std::to_string(ids[i]) + " outside 0.." + std::to_string(count - 1));
    }
    out[i * count + ids[i]] = T(1);
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::layout() const {
  const auto& c = config_;
  const std::size_t k = c.kernel;
  const auto sizes = c.spatial_sizes();
  std::vector<NamedTensor<T>> p;
  auto add = [&](std::string name, Shape shape) { p.push_back({std::move(name), Tensor<T>(std::move(shape))}); };

  std::size_t in = 1;
  for (std::size_t i = 0; i < c.conv_channels.size(); ++i) {
    const std::string n = "enc.conv" + std::to_string(i);
    add(n + ".w", {c.conv_channels[i], in, k, k});
    add(n + ".b", {1, c.conv_channels[i], 1, 1});
    in = c.conv_channels[i];
  }
  const std::size_t flat = c.conv_channels.back() * sizes.back() * sizes.back();
  add("enc.mean.w", {flat, c.latent_dim});
  add("enc.mean.b", {1, c.latent_dim});
  add("enc.logvar.w", {flat, c.latent_dim});
  add("enc.logvar.b", {1, c.latent_dim});

  add("dec.fc.w", {c.latent_dim, flat});
  add("dec.fc.b", {1, flat});
  for (std::size_t j = 0; j < c.conv_channels.size(); ++j) {
    const std::size_t layer = c.conv_channels.size() - 1 - j;
    const std::size_t from = c.conv_channels[layer];
    const std::size_t to = layer == 0 ? 1 : c.conv_channels[layer - 1];
    const std::string n = "dec.deconv" + std::to_string(j);
    add(n + ".w", {from, to, k, k});
    add(n + ".b", {1, to, 1, 1});
  }

  std::size_t width = c.latent_dim + c.num_transforms;
  for (std::size_t i = 0; i < c.transition_hidden.size(); ++i) {
    const std::string n = "trans.fc" + std::to_string(i);
    add(n + ".w", {width, c.transition_hidden[i]});
    add(n + ".b", {1, c.transition_hidden[i]});
    width = c.transition_hidden[i];
  }
  add("trans.mean.w", {width, c.latent_dim});
  add("trans.mean.b", {1, c.latent_dim});
  add("trans.logvar.w", {width, c.latent_dim});
  add("trans.logvar.b", {1, c.latent_dim});
  return p;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  params_ = layout();
  Rng rng(derive_seed(init_seed, "init"));
  for (auto& [name, t] : params_) {
    if (name.ends_with(".b")) continue;
    const Shape s = t.shape();
    // Dense weights are (in, out); conv weights are (out, in, k, k) and
    // transposed-conv weights are (in, out, k, k).
    std::size_t fan_in = 0;
    if (s.size() == 2) {
      fan_in = s[0];
    } else if (name.starts_with("dec.deconv")) {
      fan_in = s[0] * s[2] * s[3];
    } else {
      fan_in = s[1] * s[2] * s[3];
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

template <typename T>
Model<T>::Model(ModelConfig config, std::vector<NamedTensor<T>> params) : config_(std::move(config)) {
  config_.validate();
  const auto expected = layout();
  if (params.size() != expected.size()) {
    throw ContractError("Model: expected " + std::to_string(expected.size()) + " parameter tensors, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (params[i].name != expected[i].name || params[i].value.shape() != expected[i].value.shape()) {
      throw ContractError("Model: parameter " + std::to_string(i) + " is " + params[i].name + " " +
                          to_string(params[i].value.shape()) + ", expected " + expected[i].name + " " +
                          to_string(expected[i].value.shape()));
    }
  }
  params_ = std::move(params);
}

template <typename T>
std::size_t Model<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw ContractError("Model: no parameter named " + name);
}

template <typename T>
typename Model<T>::Binding Model<T>::bind(Graph<T>& g, bool trainable) const {
  Binding b;
  b.graph_ = &g;
  b.vars_.reserve(params_.size());
  for (const auto& p : params_) b.vars_.push_back(trainable ? g.leaf(p.value) : g.constant(p.value));
  return b;
}

template <typename T>
Var<T> Model<T>::dense(const Binding& b, Var<T> x, const std::string& prefix) const {
  return matmul(x, param(b, prefix + ".w")) + param(b, prefix + ".b");
}

template <typename T>
GaussianVar<T> Model<T>::gaussian_heads(const Binding& b, Var<T> h, const std::string& prefix) const {
  const T lo = static_cast<T>(config_.log_variance_min), hi = static_cast<T>(config_.log_variance_max);
  return {dense(b, h, prefix + ".mean"), clamp(dense(b, h, prefix + ".logvar"), lo, hi)};
}

template <typename T>
GaussianVar<T> Model<T>::encode(const Binding& b, Var<T> images) const {
  const Shape s = images.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != config_.image_size || s[3] != config_.image_size) {
    throw ShapeError("encode", s, Shape{s.empty() ? 1 : s[0], 1, config_.image_size, config_.image_size});
  }
  const std::size_t pad = config_.kernel / 2;
  Var<T> h = images;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    const std::string n = "enc.conv" + std::to_string(i);
    h = relu(conv2d(h, param(b, n + ".w"), 2, pad) + param(b, n + ".b"));
  }
  h = reshape(h, Shape{s[0], numel(h.shape()) / s[0]});
  return gaussian_heads(b, h, "enc");
}

template <typename T>
Var<T> Model<T>::decode_logits(const Binding& b, Var<T> z) const {
  const Shape s = z.shape();
  if (s.size() != 2 || s[1] != config_.latent_dim) {
    throw ShapeError("decode", s, Shape{s.empty() ? 1 : s[0], config_.latent_dim});
  }
  const auto sizes = config_.spatial_sizes();
  const std::size_t pad = config_.kernel / 2;
  const std::size_t layers = config_.conv_channels.size();
  Var<T> h = relu(dense(b, z, "dec.fc"));
  h = reshape(h, Shape{s[0], config_.conv_channels.back(), sizes.back(), sizes.back()});
  for (std::size_t j = 0; j < layers; ++j) {
    const std::size_t out = sizes[layers - 1 - j];
    const std::string n = "dec.deconv" + std::to_string(j);
    h = conv2d_transpose(h, param(b, n + ".w"), 2, pad, out, out) + param(b, n + ".b");
    if (j + 1 < layers) h = relu(h);
  }
  return h;
}

template <typename T>
GaussianVar<T> Model<T>::transition(const Binding& b, Var<T> z1, std::span<const std::size_t> transform_ids) const {
  const Shape s = z1.shape();
  if (s.size() != 2 || s[1] != config_.latent_dim || s[0] != transform_ids.size()) {
    throw ShapeError("transition", s, Shape{transform_ids.size(), config_.latent_dim});
  }
  Var<T> code = b.graph().constant(one_hot<T>(transform_ids, config_.num_transforms));
  Var<T> h = concat<T>({z1, code}, 1);
  for (std::size_t i = 0; i < config_.transition_hidden.size(); ++i) {
    h = relu(dense(b, h, "trans.fc" + std::to_string(i)));
  }
  return gaussian_heads(b, h, "trans");
}

template <typename T>
DiagonalGaussian<T> Model<T>::encode(const Tensor<T>& images, std::size_t chunk) const {
  const std::size_t n = images.dim(0);
  const std::size_t per = images.size() / n;
  const std::size_t d = config_.latent_dim;
  DiagonalGaussian<T> out{Tensor<T>(Shape{n, d}), Tensor<T>(Shape{n, d})};
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Shape cs = images.shape();
    cs[0] = m;
    std::vector<T> part(images.data() + start * per, images.data() + (start + m) * per);
    Graph<T> g;
    g.set_recording(false);
    auto b = bind(g, false);
    auto q = encode(b, g.constant(Tensor<T>(cs, std::move(part))));
    std::copy_n(q.mean.value().data(), m * d, out.mean.data() + start * d);
    std::copy_n(q.log_variance.value().data(), m * d, out.log_variance.data() + start * d);
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::decode(const Tensor<T>& z) const {
  Graph<T> g;
  g.set_recording(false);
  auto b = bind(g, false);
  return decode(b, g.constant(z)).value();
}

template <typename T>
DiagonalGaussian<T> Model<T>::transition(const Tensor<T>& z1, std::span<const std::size_t> transform_ids) const {
  Graph<T> g;
  g.set_recording(false);
  auto b = bind(g, false);
  return transition(b, g.constant(z1), transform_ids).value();
}

template <typename T>
Var<T> reparameterize(const GaussianVar<T>& g, Rng& rng) {
  Tensor<T> eps(g.mean.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = static_cast<T>(rng.normal());
  Var<T> noise = g.mean.graph->constant(std::move(eps));
  return g.mean + exp(scale(g.log_variance, T(0.5))) * noise;
}

template <typename T>
Tensor<T> reparameterize(const DiagonalGaussian<T>& g, Rng& rng) {
  Tensor<T> z(g.mean.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T eps = static_cast<T>(rng.normal());
    z[i] = g.mean[i] + std::exp(g.log_variance[i] * T(0.5)) * eps;
  }
  return z;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> one_hot<float>(std::span<const std::size_t>, std::size_t);
template Tensor<double> one_hot<double>(std::span<const std::size_t>, std::size_t);
template Var<float> reparameterize(const GaussianVar<float>&, Rng&);
template Var<double> reparameterize(const GaussianVar<double>&, Rng&);
template Tensor<float> reparameterize(const DiagonalGaussian<float>&, Rng&);
template Tensor<double> reparameterize(const DiagonalGaussian<double>&, Rng&);

}  // namespace morphvae
