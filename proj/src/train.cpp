#include "morphvae/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "morphvae/checkpoint.hpp"

namespace morphvae {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename U>
U parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  U v{};
  if (!(is >> v) || !is.eof()) throw ConfigError("config key " + key + ": cannot parse '" + value + "'");
  return v;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key " + key + ": empty list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

TrainConfig TrainConfig::plain_vae(TrainConfig base) {
  base.two_branch = false;
  base.beta = 1.0;
  base.gamma = 0.0;
  return base;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config key " + key + " given twice");

    if (key == "latent_dim") {
      c.latent_dim = parse_number<std::size_t>(key, value);
    } else if (key == "beta") {
      c.beta = parse_number<double>(key, value);
    } else if (key == "gamma") {
      c.gamma = parse_number<double>(key, value);
    } else if (key == "learning_rate") {
      c.learning_rate = parse_number<double>(key, value);
    } else if (key == "adam_beta1") {
      c.adam_beta1 = parse_number<double>(key, value);
    } else if (key == "adam_beta2") {
      c.adam_beta2 = parse_number<double>(key, value);
    } else if (key == "adam_epsilon") {
      c.adam_epsilon = parse_number<double>(key, value);
    } else if (key == "batch_size") {
      c.batch_size = parse_number<std::size_t>(key, value);
    } else if (key == "epochs") {
      c.epochs = parse_number<std::size_t>(key, value);
    } else if (key == "subset") {
      c.subset = parse_number<std::size_t>(key, value);
    } else if (key == "seed") {
      c.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "checkpoint_every") {
      c.checkpoint_every = parse_number<std::size_t>(key, value);
    } else if (key == "clip_norm") {
      c.clip_norm = parse_number<double>(key, value);
    } else if (key == "mode") {
      if (value == "triple") {
        c.two_branch = true;
      } else if (value == "vae") {
        c.two_branch = false;
      } else {
        throw ConfigError("config key mode: expected 'triple' or 'vae', got '" + value + "'");
      }
    } else if (key == "precision") {
      c.precision = parse_number<int>(key, value);
    } else if (key == "image_size") {
      c.model.image_size = parse_number<std::size_t>(key, value);
    } else if (key == "conv_channels") {
      c.model.conv_channels = parse_list(key, value);
    } else if (key == "kernel") {
      c.model.kernel = parse_number<std::size_t>(key, value);
    } else if (key == "transition_hidden") {
      c.model.transition_hidden = parse_list(key, value);
    } else if (key == "num_transforms") {
      c.model.num_transforms = parse_number<std::size_t>(key, value);
    } else if (key == "log_variance_min") {
      c.model.log_variance_min = parse_number<double>(key, value);
    } else if (key == "log_variance_max") {
      c.model.log_variance_max = parse_number<double>(key, value);
    } else {
      throw ConfigError("unknown config key " + key);
    }
  }
  if (!seen.count("latent_dim")) throw ConfigError("missing required config key latent_dim");
  c.model.latent_dim = c.latent_dim;
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "latent_dim=" << latent_dim << '\n'
     << "mode=" << (two_branch ? "triple" : "vae") << '\n'
     << "beta=" << beta << '\n'
     << "gamma=" << gamma << '\n'
     << "learning_rate=" << learning_rate << '\n'
     << "adam_beta1=" << adam_beta1 << '\n'
     << "adam_beta2=" << adam_beta2 << '\n'
     << "adam_epsilon=" << adam_epsilon << '\n'
     << "batch_size=" << batch_size << '\n'
     << "epochs=" << epochs << '\n'
     << "subset=" << subset << '\n'
     << "seed=" << seed << '\n'
     << "checkpoint_every=" << checkpoint_every << '\n'
     << "clip_norm=" << clip_norm << '\n'
     << "precision=" << precision << '\n'
     << "image_size=" << model.image_size << '\n'
     << "conv_channels=" << join(model.conv_channels) << '\n'
     << "kernel=" << model.kernel << '\n'
     << "transition_hidden=" << join(model.transition_hidden) << '\n'
     << "num_transforms=" << model.num_transforms << '\n'
     << "log_variance_min=" << model.log_variance_min << '\n'
     << "log_variance_max=" << model.log_variance_max << '\n';
  return os.str();
}

void TrainConfig::validate() const {
  if (latent_dim == 0) throw ConfigError("latent_dim must be positive");
  if (beta < 0 || gamma < 0) throw ConfigError("beta and gamma must be non-negative");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("adam_beta1 and adam_beta2 must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0)) throw ConfigError("adam_epsilon must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  try {
    ModelConfig m = model;
    m.latent_dim = latent_dim;
    m.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const std::vector<NamedTensor<T>>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.first.emplace_back(p.value.shape(), T(0));
    s.second.emplace_back(p.value.shape(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamHyper& hyper) {
  if (grads.size() != params.size() || state.first.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                     " gradients, " + std::to_string(state.first.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) throw ShapeError("adam_step", params[i].value.shape(), grads[i].shape());
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta2, t)));
  const T lr = static_cast<T>(hyper.learning_rate), eps = static_cast<T>(hyper.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i].value;
    Tensor<T>& m = state.first[i];
    Tensor<T>& v = state.second[i];
    const Tensor<T>& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] * c1;
      const T vhat = v[j] * c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= f;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainingFault::TrainingFault(std::size_t step, const fs::path& last_good, const std::string& what)
    : std::runtime_error("numerical fault at step " + std::to_string(step) + ": " + what +
                         (last_good.empty() ? std::string(" (no checkpoint written yet)")
                                            : " (last good checkpoint: " + last_good.string() + ")")),
      step_(step),
      last_good_(last_good) {}

std::string training_log_header() { return "step,epoch," + ElboBreakdown::csv_header() + ",wall_seconds"; }

std::string training_log_row(const StepLog& s) {
  std::ostringstream os;
  os << s.step << ',' << s.epoch << ',' << s.terms.csv_row() << ',' << std::fixed << std::setprecision(3)
     << s.wall_seconds;
  return os.str();
}

template <typename T>
Model<T> initial_model(const TrainConfig& config, const TransformRegistry& registry) {
  ModelConfig mc = config.model;
  mc.latent_dim = config.latent_dim;
  mc.num_transforms = registry.size();
  return Model<T>(mc, config.seed);
}

template <typename T>
TrainResult train(Model<T>& model, const TrainConfig& config, const LabeledSet& data, const TransformRegistry& registry,
                  const std::optional<fs::path>& out_dir, const TrainHooks& hooks) {
  config.validate();
  if (config.two_branch && model.config().num_transforms != registry.size()) {
    throw ContractError("train: model expects " + std::to_string(model.config().num_transforms) +
                        " transforms, registry has " + std::to_string(registry.size()));
  }
  const LabeledSet subset = training_subset(data, config.subset, config.seed);
  const BatchStream stream(subset.size(), config.batch_size, derive_seed(config.seed, "batches"));
  Rng triple_rng(derive_seed(config.seed, "triples"));
  Rng noise_rng(derive_seed(config.seed, "noise"));
  AdamState<T> state = AdamState<T>::zeros_like(model.params());
  const AdamHyper hyper{config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon};
  const ElboWeights weights = config.weights();

  std::ofstream log_file;
  if (out_dir) {
    fs::create_directories(*out_dir);
    log_file.open(*out_dir / "train_log.csv");
    log_file << training_log_header() << '\n';
  }

  TrainResult result;
  fs::path last_good;
  auto save = [&](const fs::path& path, std::size_t epoch) {
    auto ck = Checkpoint::from_model(model, config, registry,
                                     {{"epoch", std::to_string(epoch)}, {"step", std::to_string(state.step)}});
    save_checkpoint(ck, path);
    last_good = path;
  };

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_total = 0.0;
    std::size_t epoch_count = 0;
    for (const auto& indices : stream.epoch(epoch)) {
      const std::size_t step = state.step + 1;
      const ImageBatch images = gather(subset.batch, indices);
      TripleBatch triple = config.two_branch ? sample_triple(registry, images, triple_rng) : TripleBatch{images, {}, {}};

      std::vector<Tensor<T>> grads;
      ElboBreakdown terms;
      try {
        Graph<T> g;
        auto binding = model.bind(g, true);
        auto eg = elbo(model, binding, triple, registry, weights, noise_rng);
        terms = eg.terms;
        g.backward(scale(eg.weighted_total, T(-1)));
        grads.reserve(model.params().size());
        for (const auto& v : binding.vars()) grads.push_back(g.grad(v));
      } catch (const NumericalFault& e) {
        throw TrainingFault(step, last_good, e.what());
      }
      const double norm = clip_global_norm(grads, config.clip_norm);
      if (!std::isfinite(norm)) throw TrainingFault(step, last_good, "non-finite gradient norm");
      adam_step(model.mutable_params(), grads, state, hyper);

      StepLog entry{step, epoch, terms,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      epoch_total += terms.weighted_total * static_cast<double>(indices.size());
      epoch_count += indices.size();
      if (log_file.is_open()) log_file << training_log_row(entry) << '\n';
      if (hooks.on_step) hooks.on_step(entry);
      result.log.push_back(entry);
    }
    const double epoch_mean = epoch_total / static_cast<double>(epoch_count);
    result.epoch_mean_total.push_back(epoch_mean);
    if (hooks.on_epoch) hooks.on_epoch(epoch, epoch_mean);
    if (out_dir && (epoch + 1) % config.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint-epoch-" << std::setw(3) << std::setfill('0') << (epoch + 1) << ".mvck";
      save(*out_dir / name.str(), epoch + 1);
    }
  }
  if (out_dir) {
    result.final_checkpoint = *out_dir / "final.mvck";
    save(result.final_checkpoint, config.epochs);
  }
  return result;
}

#define MORPHVAE_INSTANTIATE(T)                                                                                       \
  template struct AdamState<T>;                                                                                       \
  template void adam_step(std::vector<NamedTensor<T>>&, const std::vector<Tensor<T>>&, AdamState<T>&,                 \
                          const AdamHyper&);                                                                          \
  template double clip_global_norm(std::vector<Tensor<T>>&, double);                                                  \
  template Model<T> initial_model(const TrainConfig&, const TransformRegistry&);                                      \
  template TrainResult train(Model<T>&, const TrainConfig&, const LabeledSet&, const TransformRegistry&,              \
                             const std::optional<fs::path>&, const TrainHooks&);

MORPHVAE_INSTANTIATE(float)
MORPHVAE_INSTANTIATE(double)

#undef MORPHVAE_INSTANTIATE

}  // namespace morphvae
