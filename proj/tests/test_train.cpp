#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "morphvae/checkpoint.hpp"
#include "morphvae/train.hpp"
#include "support.hpp"

using namespace morphvae;
using namespace morphvae::testing;

namespace {

LabeledSet toy_set(std::size_t n, std::size_t side, std::uint64_t seed) {
  // blurry blobs: smoother than uniform noise, so a small model can learn them
  Rng rng(seed);
  LabeledSet s;
  s.batch = blank_images(n, side);
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(2, side - 2.0), cy = rng.uniform(2, side - 2.0);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
        s.batch.images[i * side * side + r * side + c] = static_cast<float>(std::exp(-d2 / 4));
      }
    }
    s.labels.push_back(static_cast<std::uint8_t>(i % 10));
  }
  return s;
}

TrainConfig small_config() {
  TrainConfig c = TrainConfig::parse(
      "latent_dim = 4\n"
      "image_size = 8\n"
      "conv_channels = 3,4\n"
      "transition_hidden = 6\n"
      "batch_size = 16\n"
      "epochs = 2\n"
      "seed = 7\n");
  return c;
}

std::string drop_last_column(const std::string& line) { return line.substr(0, line.rfind(',')); }

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Adam, MinimizesScalarQuadratic) {
  std::vector<NamedTensor<double>> w{{"w", Tensor<double>::from({1}, {0.0})}};
  auto state = AdamState<double>::zeros_like(w);
  const AdamHyper h{0.05, 0.9, 0.999, 1e-8};
  for (int i = 0; i < 1000; ++i) {
    std::vector<Tensor<double>> g{Tensor<double>::from({1}, {2 * (w[0].value[0] - 3)})};
    adam_step(w, g, state, h);
  }
  EXPECT_LT(std::abs(w[0].value[0] - 3), 0.01);
  EXPECT_EQ(state.step, 1000u);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  std::vector<NamedTensor<double>> w{{"w", Tensor<double>::from({3}, {1, 1, 1})}};
  auto state = AdamState<double>::zeros_like(w);
  adam_step(w, {Tensor<double>::from({3}, {0.5, -20, 0})}, state, AdamHyper{0.1, 0.9, 0.999, 1e-8});
  EXPECT_NEAR(w[0].value[0], 0.9, 1e-6);
  EXPECT_NEAR(w[0].value[1], 1.1, 1e-6);
  EXPECT_EQ(w[0].value[2], 1.0);
}

TEST(Adam, MatchesScalarReferenceOverSeveralSteps) {
  std::vector<NamedTensor<double>> w{{"w", Tensor<double>::from({1}, {0.4})}};
  auto state = AdamState<double>::zeros_like(w);
  double p = 0.4, m = 0, v = 0;
  const std::vector<double> gs{0.3, -1.2, 0.05, 2.0, -0.7};
  for (std::size_t t = 1; t <= gs.size(); ++t) {
    adam_step(w, {Tensor<double>::from({1}, {gs[t - 1]})}, state, AdamHyper{});
    m = 0.9 * m + 0.1 * gs[t - 1];
    v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
    p -= 1e-3 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w[0].value[0], p, 1e-15);
  }
}

TEST(Adam, RejectsMismatchedGradients) {
  std::vector<NamedTensor<double>> w{{"w", Tensor<double>(Shape{2})}};
  auto state = AdamState<double>::zeros_like(w);
  EXPECT_THROW(adam_step(w, {Tensor<double>(Shape{3})}, state, AdamHyper{}), ShapeError);
}

TEST(ClipGlobalNorm, RescalesOnlyAboveThreshold) {
  std::vector<Tensor<double>> g{Tensor<double>::from({2}, {30, 40}), Tensor<double>::from({1}, {0})};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 100.0), 50.0);
  EXPECT_EQ(g[0].values(), (std::vector<double>{30, 40}));
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 50.0);
  EXPECT_NEAR(g[0][0], 6, 1e-12);
  EXPECT_NEAR(g[0][1], 8, 1e-12);
}

TEST(TrainConfig, MissingLatentDimIsNamed) {
  try {
    TrainConfig::parse("beta = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("latent_dim"), std::string::npos);
  }
}

TEST(TrainConfig, UnknownDuplicateAndMalformedKeysRejected) {
  EXPECT_THROW(TrainConfig::parse("latent_dim = 2\nlerning_rate = 1\n"), ConfigError);
  EXPECT_THROW(TrainConfig::parse("latent_dim = 2\nlatent_dim = 3\n"), ConfigError);
  EXPECT_THROW(TrainConfig::parse("latent_dim = 2\nbeta\n"), ConfigError);
  EXPECT_THROW(TrainConfig::parse("latent_dim = two\n"), ConfigError);
  EXPECT_THROW(TrainConfig::parse("latent_dim = 2\nbeta = -1\n"), ConfigError);
  EXPECT_THROW(TrainConfig::parse("latent_dim = 2\nmode = both\n"), ConfigError);
}

TEST(TrainConfig, DefaultsAndTextRoundTrip) {
  const TrainConfig c = TrainConfig::parse("# comment\nlatent_dim = 2  # trailing\nmode = vae\n");
  EXPECT_EQ(c.latent_dim, 2u);
  EXPECT_EQ(c.model.latent_dim, 2u);
  EXPECT_DOUBLE_EQ(c.beta, 0.01);
  EXPECT_DOUBLE_EQ(c.gamma, 5.0);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.epochs, 20u);
  EXPECT_FALSE(c.two_branch);
  EXPECT_EQ(TrainConfig::parse(c.to_text()).to_text(), c.to_text());
}

TEST(TrainConfig, PlainVaeBaseline) {
  const TrainConfig c = TrainConfig::plain_vae(small_config());
  EXPECT_FALSE(c.two_branch);
  EXPECT_EQ(c.beta, 1.0);
  EXPECT_EQ(c.gamma, 0.0);
  EXPECT_EQ(c.latent_dim, 4u);
}

TEST(Train, SmokeRunImprovesAndWritesArtifacts) {
  TempDir dir;
  const auto data = toy_set(512, 8, 1);
  TrainConfig c = small_config();
  c.latent_dim = c.model.latent_dim = 8;
  c.learning_rate = 3e-3;
  const auto registry = TransformRegistry::default_registry();
  auto model = initial_model<float>(c, registry);
  const auto r = train(model, c, data, registry, dir.path());
  ASSERT_EQ(r.epoch_mean_total.size(), 2u);
  EXPECT_GT(r.epoch_mean_total[1], r.epoch_mean_total[0]);
  EXPECT_EQ(r.log.size(), 2u * 32u);
  EXPECT_TRUE(fs::exists(dir / "checkpoint-epoch-001.mvck"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint-epoch-002.mvck"));
  EXPECT_EQ(r.final_checkpoint, dir / "final.mvck");
  const auto log = lines_of(dir / "train_log.csv");
  ASSERT_EQ(log.size(), 1u + 64u);
  EXPECT_EQ(log[0], training_log_header());
}

TEST(Train, DoublePrecisionRunsAreBitIdentical) {
  TempDir a, b;
  const auto data = toy_set(96, 8, 2);
  TrainConfig c = small_config();
  c.precision = 64;
  const auto registry = TransformRegistry::default_registry();
  auto m1 = initial_model<double>(c, registry);
  auto m2 = initial_model<double>(c, registry);
  train(m1, c, data, registry, a.path());
  train(m2, c, data, registry, b.path());
  EXPECT_EQ(read_bytes(a / "final.mvck"), read_bytes(b / "final.mvck"));
  const auto la = lines_of(a / "train_log.csv"), lb = lines_of(b / "train_log.csv");
  ASSERT_EQ(la.size(), lb.size());
  // the last column is wall-clock time
  for (std::size_t i = 1; i < la.size(); ++i) EXPECT_EQ(drop_last_column(la[i]), drop_last_column(lb[i]));
}

TEST(Train, DifferentSeedsDiverge) {
  const auto data = toy_set(64, 8, 3);
  TrainConfig c = small_config();
  c.epochs = 1;
  const auto registry = TransformRegistry::default_registry();
  auto m1 = initial_model<double>(c, registry);
  c.seed = 8;
  auto m2 = initial_model<double>(c, registry);
  train(m2, c, data, registry);
  c.seed = 7;
  train(m1, c, data, registry);
  EXPECT_FALSE(m1.params()[0].value == m2.params()[0].value);
}

TEST(Train, PlainVaeTrajectoryMatchesHandRolledLoop) {
  const auto data = toy_set(80, 8, 4);
  TrainConfig c = TrainConfig::plain_vae(small_config());
  c.epochs = 2;
  c.subset = 48;  // three batches of 16 per epoch
  const auto registry = TransformRegistry::default_registry();
  auto trained = initial_model<double>(c, registry);
  train(trained, c, data, registry);

  // independent loop: subset, batch order and noise from the documented
  // streams, plain ELBO gradients, hand-written Adam
  auto model = initial_model<double>(c, registry);
  Rng perm(derive_seed(c.seed, "subset"));
  auto keep = perm.permutation(data.size());
  keep.resize(c.subset);
  const ImageBatch subset = gather(data.batch, keep);
  const BatchStream stream(c.subset, c.batch_size, derive_seed(c.seed, "batches"));
  Rng noise(derive_seed(c.seed, "noise"));
  std::vector<std::vector<double>> m, v;
  for (const auto& p : model.params()) {
    m.emplace_back(p.value.size(), 0.0);
    v.emplace_back(p.value.size(), 0.0);
  }
  int t = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    for (const auto& idx : stream.epoch(epoch)) {
      ++t;
      Graph<double> g;
      auto b = model.bind(g, true);
      auto x = g.constant(gather(subset, idx).images.cast<double>());
      auto q = model.encode(b, x);
      auto z = reparameterize(q, noise);
      auto loss = kl_standard_normal(q) - bernoulli_loglik_logits(model.decode_logits(b, z), x);
      g.backward(loss);
      double sq = 0;
      for (const auto& var : b.vars())
        for (double gv : g.grad(var).values()) sq += gv * gv;
      const double f = std::sqrt(sq) > 100 ? 100 / std::sqrt(sq) : 1.0;
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        auto& p = model.mutable_params()[i].value;
        const auto& gr = g.grad(b.at(i));
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double gj = gr[j] * f;
          m[i][j] = 0.9 * m[i][j] + 0.1 * gj;
          v[i][j] = 0.999 * v[i][j] + 0.001 * gj * gj;
          p[j] -= 1e-3 * (m[i][j] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i][j] / (1 - std::pow(0.999, t))) + 1e-8);
        }
      }
    }
  }
  ASSERT_EQ(t, 6);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& a = model.params()[i].value;
    const auto& b = trained.params()[i].value;
    for (std::size_t j = 0; j < a.size(); ++j) ASSERT_NEAR(a[j], b[j], 1e-6) << model.params()[i].name;
  }
}

TEST(Train, DivergenceRaisesTrainingFaultNamingLastCheckpoint) {
  TempDir dir;
  const auto data = toy_set(64, 8, 5);
  TrainConfig c = small_config();
  c.epochs = 50;
  c.learning_rate = 1e4;
  c.clip_norm = 1e30;
  c.model.log_variance_max = 1e6;
  const auto registry = TransformRegistry::default_registry();
  auto model = initial_model<double>(c, registry);
  try {
    train(model, c, data, registry, dir.path());
    FAIL() << "expected TrainingFault";
  } catch (const TrainingFault& e) {
    EXPECT_GT(e.step(), 0u) << e.what();
    EXPECT_TRUE(e.last_good().empty() || fs::exists(e.last_good())) << e.what();
  }
}

TEST(Checkpoint, RoundTripFloatIsBitExact) {
  TempDir dir;
  TrainConfig c = small_config();
  const auto registry = TransformRegistry::default_registry();
  const auto model = initial_model<float>(c, registry);
  save_checkpoint(Checkpoint::from_model(model, c, registry, {{"epoch", "3"}}), dir / "m.mvck");
  const Checkpoint r = load_checkpoint(dir / "m.mvck");
  EXPECT_EQ(r.precision, 32);
  EXPECT_EQ(r.meta.at("epoch"), "3");
  EXPECT_EQ(r.config.to_text(), c.to_text());
  EXPECT_EQ(r.registry().table(), registry.table());
  const auto back = r.to_model<float>();
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    EXPECT_EQ(back.params()[i].name, model.params()[i].name);
    EXPECT_EQ(back.params()[i].value, model.params()[i].value);
  }
  save_checkpoint(r, dir / "again.mvck");
  EXPECT_EQ(read_bytes(dir / "m.mvck"), read_bytes(dir / "again.mvck"));
}

TEST(Checkpoint, DoublePayloadRoundTrips) {
  TempDir dir;
  TrainConfig c = small_config();
  c.precision = 64;
  const auto registry = TransformRegistry::default_registry();
  const auto model = initial_model<double>(c, registry);
  save_checkpoint(Checkpoint::from_model(model, c, registry), dir / "m.mvck");
  const auto back = load_checkpoint(dir / "m.mvck").to_model<double>();
  for (std::size_t i = 0; i < model.params().size(); ++i) EXPECT_EQ(back.params()[i].value, model.params()[i].value);
}

TEST(Checkpoint, CorruptFilesRejected) {
  TempDir dir;
  EXPECT_THROW(load_checkpoint(dir / "missing.mvck"), CheckpointError);
  write_bytes(dir / "bad.mvck", {'N', 'O', 'T', 'A', 'C', 'K', 'P', 'T', 1, 0, 0, 0});
  EXPECT_THROW(load_checkpoint(dir / "bad.mvck"), CheckpointError);

  const TrainConfig c = small_config();
  const auto registry = TransformRegistry::default_registry();
  save_checkpoint(Checkpoint::from_model(initial_model<float>(c, registry), c, registry), dir / "ok.mvck");
  auto bytes = read_bytes(dir / "ok.mvck");
  bytes.resize(bytes.size() - 5);
  write_bytes(dir / "short.mvck", bytes);
  EXPECT_THROW(load_checkpoint(dir / "short.mvck"), CheckpointError);
}
