#include <gtest/gtest.h>

#include <cmath>

#include "morphvae/model.hpp"
#include "morphvae/objective.hpp"
#include "support.hpp"

using namespace morphvae;
using namespace morphvae::testing;

namespace {

ModelConfig toy(std::size_t latent = 4) {
  ModelConfig c;
  c.image_size = 8;
  c.conv_channels = {3, 4};
  c.latent_dim = latent;
  c.transition_hidden = {6};
  c.num_transforms = 12;
  return c;
}

Tensor<double> images_of(const ImageBatch& b) { return b.images.cast<double>(); }

}  // namespace

TEST(ModelConfig, SpatialSizesHalveWithCeil) {
  ModelConfig c;
  EXPECT_EQ(c.spatial_sizes(), (std::vector<std::size_t>{28, 14, 7, 4}));
  EXPECT_EQ(toy().spatial_sizes(), (std::vector<std::size_t>{8, 4, 2}));
  ModelConfig bad;
  bad.latent_dim = 0;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Model, DefaultArchitectureParameterShapes) {
  const Model<float> m(ModelConfig{}, 0);
  auto shape = [&](const std::string& n) { return m.params().at(m.index_of(n)).value.shape(); };
  EXPECT_EQ(shape("enc.conv0.w"), (Shape{32, 1, 3, 3}));
  EXPECT_EQ(shape("enc.conv1.w"), (Shape{64, 32, 3, 3}));
  EXPECT_EQ(shape("enc.conv2.w"), (Shape{128, 64, 3, 3}));
  EXPECT_EQ(shape("enc.mean.w"), (Shape{128 * 4 * 4, 64}));
  // one-hot of the twelve transforms is appended to z1
  EXPECT_EQ(shape("trans.fc0.w"), (Shape{64 + 12, 256}));
  EXPECT_EQ(shape("trans.fc1.w"), (Shape{256, 256}));
  EXPECT_EQ(shape("trans.mean.w"), (Shape{256, 64}));
  EXPECT_THROW(m.index_of("nope"), ContractError);
}

TEST(Model, InitIsSeededFanInUniformWithZeroBiases) {
  const Model<double> a(toy(), 3), b(toy(), 3), c(toy(), 4);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& p = a.params()[i];
    EXPECT_EQ(p.value, b.params()[i].value) << p.name;
    differs = differs || !(p.value == c.params()[i].value);
    const bool bias = p.name.ends_with(".b");
    std::size_t fan_in = 1;
    if (p.name.starts_with("enc.conv")) fan_in = p.value.dim(1) * p.value.dim(2) * p.value.dim(3);
    else if (p.name.starts_with("dec.deconv")) fan_in = p.value.dim(0) * p.value.dim(2) * p.value.dim(3);
    else fan_in = p.value.dim(0);
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (double v : p.value.values()) {
      if (bias) {
        EXPECT_EQ(v, 0.0) << p.name;
      } else {
        EXPECT_LE(std::abs(v), bound) << p.name;
      }
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Model, AdoptingParamsChecksNamesAndShapes) {
  const Model<double> a(toy(), 1);
  auto params = a.params();
  EXPECT_NO_THROW(Model<double>(toy(), params));
  params[0].value = Tensor<double>(Shape{1, 1, 1, 1});
  EXPECT_THROW(Model<double>(toy(), params), ContractError);
  params = a.params();
  params[1].name = "renamed";
  EXPECT_THROW(Model<double>(toy(), params), ContractError);
}

TEST(Encode, ShapesAndIdenticalRows) {
  const Model<double> m(toy(), 2);
  ImageBatch b = random_images(3, 8, 5);
  for (std::size_t p = 0; p < 64; ++p) b.images[2 * 64 + p] = b.images[p];
  const auto q = m.encode(images_of(b));
  EXPECT_EQ(q.mean.shape(), (Shape{3, 4}));
  EXPECT_EQ(q.log_variance.shape(), (Shape{3, 4}));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(q.mean[j], q.mean[8 + j]);
    EXPECT_EQ(q.log_variance[j], q.log_variance[8 + j]);
  }
}

TEST(Encode, FreshModelFiniteAndClamped) {
  const Model<float> m(ModelConfig{}, 7);
  const auto q = m.encode(random_images(16, 28, 6).images.cast<float>());
  EXPECT_TRUE(q.mean.all_finite());
  for (float v : q.log_variance.values()) {
    EXPECT_GE(v, -10.0f);
    EXPECT_LE(v, 10.0f);
  }
}

TEST(Encode, RejectsWrongImageSize) {
  const Model<double> m(toy(), 2);
  EXPECT_THROW(m.encode(random_images(2, 6, 1).images.cast<double>()), ShapeError);
}

TEST(Encode, ChunkingDoesNotChangeResult) {
  const Model<double> m(toy(), 2);
  const auto x = random_images(7, 8, 8).images.cast<double>();
  const auto a = m.encode(x, 3).mean, b = m.encode(x, 500).mean;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Reparameterize, VanishingNoiseAtClampFloor) {
  DiagonalGaussian<double> g{Tensor<double>::from({1, 3}, {0.5, -1, 2}), Tensor<double>({1, 3}, -10.0)};
  Rng rng(1), ref(1);
  const auto z = reparameterize(g, rng);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(std::abs(z[i] - g.mean[i]), std::exp(-5.0) * std::abs(ref.normal()) + 1e-15);
}

TEST(Reparameterize, MonteCarloMeanWithinThreeSigma) {
  DiagonalGaussian<double> g{Tensor<double>::from({1, 2}, {0.3, -2}), Tensor<double>::from({1, 2}, {0.0, 1.0})};
  Rng rng(2);
  const int n = 100000;
  double s0 = 0, s1 = 0;
  for (int i = 0; i < n; ++i) {
    const auto z = reparameterize(g, rng);
    s0 += z[0];
    s1 += z[1];
  }
  EXPECT_NEAR(s0 / n, 0.3, 3 * 1.0 / std::sqrt(n));
  EXPECT_NEAR(s1 / n, -2, 3 * std::exp(0.5) / std::sqrt(n));
}

TEST(Reparameterize, SameSeedSameSample) {
  DiagonalGaussian<double> g{Tensor<double>(Shape{4, 3}, 0.1), Tensor<double>(Shape{4, 3}, 0.2)};
  Rng a(9), b(9);
  EXPECT_EQ(reparameterize(g, a), reparameterize(g, b));
}

TEST(Reparameterize, GradientReachesMeanAndLogVariance) {
  Graph<double> gr;
  auto mu = gr.leaf(Tensor<double>::from({1, 2}, {0.1, 0.2}));
  auto lv = gr.leaf(Tensor<double>::from({1, 2}, {0.3, -0.4}));
  Rng rng(3), ref(3);
  const double e0 = ref.normal(), e1 = ref.normal();
  auto z = reparameterize(GaussianVar<double>{mu, lv}, rng);
  gr.backward(sum(z));
  EXPECT_EQ(mu.grad().values(), (std::vector<double>{1, 1}));
  EXPECT_NEAR(lv.grad()[0], 0.5 * std::exp(0.15) * e0, 1e-12);
  EXPECT_NEAR(lv.grad()[1], 0.5 * std::exp(-0.2) * e1, 1e-12);
}

TEST(Decode, ShapeRangeAndDeterminism) {
  const Model<double> m(toy(), 4);
  Tensor<double> z = Tensor<double>::from({3, 4}, {0.1, 0.2, 0.3, 0.4, -1, 2, 0, 1, 0.1, 0.2, 0.3, 0.4});
  const auto y = m.decode(z);
  EXPECT_EQ(y.shape(), (Shape{3, 1, 8, 8}));
  for (double v : y.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (std::size_t p = 0; p < 64; ++p) EXPECT_EQ(y[p], y[128 + p]);
  EXPECT_THROW(m.decode(Tensor<double>(Shape{3, 5})), ShapeError);
}

TEST(Decode, FullSizeOutput) {
  const Model<float> m(ModelConfig{}, 1);
  EXPECT_EQ(m.decode(Tensor<float>(Shape{2, 64})).shape(), (Shape{2, 1, 28, 28}));
}

TEST(Transition, OneHotAndDeterminism) {
  const auto oh = one_hot<double>(std::vector<std::size_t>{0, 11, 5}, 12);
  EXPECT_EQ(oh.shape(), (Shape{3, 12}));
  EXPECT_EQ(oh[0], 1.0);
  EXPECT_EQ(oh[12 + 11], 1.0);
  EXPECT_EQ(oh[24 + 5], 1.0);
  double total = 0;
  for (double v : oh.values()) total += v;
  EXPECT_EQ(total, 3.0);
  EXPECT_THROW(one_hot<double>(std::vector<std::size_t>{12}, 12), ContractError);

  const Model<double> m(toy(), 5);
  const Tensor<double> z = Tensor<double>(Shape{2, 4}, 0.7);
  const std::vector<std::size_t> same{3, 3};
  const auto p = m.transition(z, same);
  EXPECT_EQ(p.mean.shape(), (Shape{2, 4}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(p.mean[j], p.mean[4 + j]);
}

TEST(Transition, DistinctIdsGiveDistinctOutputs) {
  ModelConfig c = toy();
  c.transition_hidden = {64};
  const Model<double> m(c, 6);
  Rng rng(7);
  Tensor<double> z(Shape{1, 4});
  for (auto& v : z.span()) v = rng.normal();
  std::vector<Tensor<double>> outs;
  for (std::size_t a = 0; a < 12; ++a) outs.push_back(m.transition(z, std::vector<std::size_t>{a}).mean);
  for (std::size_t a = 0; a < 12; ++a)
    for (std::size_t b = a + 1; b < 12; ++b) EXPECT_FALSE(outs[a] == outs[b]) << a << " vs " << b;
  EXPECT_THROW(m.transition(z, std::vector<std::size_t>{12}), ContractError);
}

TEST(SharedParameters, SecondBranchGradientTouchesEncoder) {
  const Model<double> m(toy(), 8);
  Graph<double> g;
  auto b = m.bind(g, true);
  auto x2 = g.constant(random_images(2, 8, 9).images.cast<double>());
  auto q2 = m.encode(b, x2);
  g.backward(bernoulli_loglik_logits(m.decode_logits(b, q2.mean), x2));
  const auto& gw = g.grad(b.at(m.index_of("enc.conv0.w")));
  double norm = 0;
  for (double v : gw.values()) norm += v * v;
  EXPECT_GT(norm, 0.0);

  // one Adam-free step along that gradient moves the x1 encoding too
  Model<double> moved = m;
  auto& w = moved.mutable_params()[m.index_of("enc.conv0.w")].value;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += 1e-2 * gw[i];
  const auto x1 = random_images(2, 8, 10).images.cast<double>();
  EXPECT_FALSE(m.encode(x1).mean == moved.encode(x1).mean);
}

namespace {

// Central-difference check of every parameter tensor of a scalar objective
// built by `loss` from a bound model. Noise is re-drawn from the same seed
// for every evaluation, so the objective is a deterministic function of the
// parameters.
double parameter_gradient_error(Model<double>& model, const std::function<Var<double>(const Model<double>&,
                                                                                        const Model<double>::Binding&)>& loss,
                                std::size_t coords_per_tensor, std::uint64_t seed) {
  Graph<double> g;
  auto b = model.bind(g, true);
  g.backward(loss(model, b));
  std::vector<Tensor<double>> analytic;
  for (const auto& v : b.vars()) analytic.push_back(g.grad(v));

  auto value = [&]() {
    Graph<double> h;
    h.set_recording(false);
    auto hb = model.bind(h, false);
    return loss(model, hb).value().item();
  };
  Rng pick(seed);
  double worst = 0;
  const double step = 1e-5;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& t = model.mutable_params()[i].value;
    for (std::size_t k = 0; k < std::min(coords_per_tensor, t.size()); ++k) {
      const std::size_t j = coords_per_tensor >= t.size() ? k : pick.below(t.size());
      const double orig = t[j];
      t[j] = orig + step;
      const double up = value();
      t[j] = orig - step;
      const double down = value();
      t[j] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > worst) worst = err;
    }
  }
  return worst;
}

}  // namespace

TEST(GradientCheck, EncodeReparameterizeDecodeToySize) {
  Model<double> m(toy(4), 11);
  const auto x = random_images(3, 8, 12).images.cast<double>();
  auto loss = [&](const Model<double>& mm, const Model<double>::Binding& b) {
    Graph<double>& g = b.graph();
    auto xv = g.constant(x);
    auto q = mm.encode(b, xv);
    Rng rng(13);
    auto z = reparameterize(q, rng);
    return bernoulli_loglik(mm.decode(b, z), xv);
  };
  EXPECT_LT(parameter_gradient_error(m, loss, 12, 14), 1e-4);
}

TEST(GradientCheck, TransitionNetwork) {
  Model<double> m(toy(4), 15);
  Rng r(16);
  Tensor<double> z(Shape{3, 4});
  for (auto& v : z.span()) v = r.normal();
  auto loss = [&](const Model<double>& mm, const Model<double>::Binding& b) {
    auto p = mm.transition(b, b.graph().constant(z), std::vector<std::size_t>{0, 4, 11});
    return sum(p.mean * p.mean) + sum(exp(p.log_variance));
  };
  EXPECT_LT(parameter_gradient_error(m, loss, 12, 17), 1e-4);
}
