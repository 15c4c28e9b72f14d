// morphvae command-line driver: ingest, train, eval, orbits.
//
// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical fault.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "morphvae/checkpoint.hpp"
#include "morphvae/dataio.hpp"
#include "morphvae/evaluate.hpp"
#include "morphvae/report.hpp"
#include "morphvae/train.hpp"

namespace fs = std::filesystem;
using namespace morphvae;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kData = 3, kFault = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::pair<std::string, std::string>> data_checksums(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const char* f : {MnistFiles::kTrainImages, MnistFiles::kTrainLabels, MnistFiles::kTestImages,
                        MnistFiles::kTestLabels}) {
    out.emplace_back(sha256_file(dir / f), f);
  }
  return out;
}

std::optional<fs::path> resolve_data(const std::string& flag) {
  if (!flag.empty()) return fs::path(flag);
  if (const char* env = std::getenv("MORPHVAE_DATA")) return fs::path(env);
  return std::nullopt;
}

// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string raw, out;
};

int run_ingest(const IngestArgs& a) {
  const fs::path raw = a.raw, out = a.out;
  const ChecksumManifest pinned = pinned_mnist_checksums();

  if (fs::exists(out / kChecksumFile)) {
    try {
      const auto existing = ChecksumManifest::read(out / kChecksumFile);
      bool same = existing.entries.size() == pinned.entries.size();
      for (const auto& [sha, file] : pinned.entries) {
        const std::string* e = existing.find(file);
        same = same && e && *e == sha;
      }
      if (same) {
        existing.verify(out);
        std::cout << "cache at " << out << " is up to date\n";
        return kOk;
      }
    } catch (const DataError&) {
      // stale or damaged cache: rebuild
    }
  }

  for (const auto& [sha, file] : pinned.entries) {
    const fs::path p = raw / file;
    if (!fs::exists(p)) throw DataError("missing " + p.string());
    const std::string got = sha256_file(p);
    if (got != sha) throw DataError("checksum mismatch for " + p.string() + ": expected " + sha + ", got " + got);
  }
  const LabeledSet train = load_idx(raw / MnistFiles::kTrainImages, raw / MnistFiles::kTrainLabels);
  const LabeledSet test = load_idx(raw / MnistFiles::kTestImages, raw / MnistFiles::kTestLabels);
  if (train.size() != 60000 || test.size() != 10000) {
    throw DataError("unexpected item counts " + std::to_string(train.size()) + "/" + std::to_string(test.size()));
  }

  fs::create_directories(out);
  write_idx(train, out / MnistFiles::kTrainImages, out / MnistFiles::kTrainLabels);
  write_idx(test, out / MnistFiles::kTestImages, out / MnistFiles::kTestLabels);
  // The cache must reproduce the published bytes.
  pinned.verify(out);
  pinned.write(out / kChecksumFile);

  RunManifest m;
  m.command = "ingest";
  m.extra["raw"] = fs::absolute(raw).string();
  m.extra["train_items"] = std::to_string(train.size());
  m.extra["test_items"] = std::to_string(test.size());
  m.data_checksums = pinned.entries;
  for (const auto& [_, f] : pinned.entries) m.artifacts.push_back(f);
  m.artifacts.push_back(kChecksumFile);
  append_manifest(out, m);
  std::cout << "ingested " << train.size() << " training and " << test.size() << " test images into " << out << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, replay, data, out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig config;
  std::optional<RunManifest> replay;
  if (!a.replay.empty()) {
    const auto all = read_manifests(a.replay);
    for (const auto& m : all) {
      if (m.command == "train") replay = m;
    }
    if (!replay) throw ConfigError(a.replay + " holds no train entry");
    config = TrainConfig::parse(replay->config_text);
  } else if (!a.config.empty()) {
    config = TrainConfig::load(a.config);
  } else {
    throw UsageError("train needs --config or --replay");
  }
  if (a.seed) config.seed = *a.seed;
  config.validate();

  const fs::path data_dir = a.data;
  const Dataset data = load_mnist(data_dir);
  const auto checksums = data_checksums(data_dir);
  if (replay) {
    for (const auto& entry : replay->data_checksums) {
      bool found = false;
      for (const auto& c : checksums) found = found || c == entry;
      if (!found) throw DataError("data file " + entry.second + " differs from the replayed manifest");
    }
  }

  TransformRegistry registry = TransformRegistry::default_registry();
  if (replay && !replay->registry_table.empty()) registry = TransformRegistry::parse_table(replay->registry_table);

  const fs::path out = a.out;
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  if (!a.quiet) {
    hooks.on_epoch = [&](std::size_t e, double mean) {
      std::cout << "epoch " << e + 1 << "/" << config.epochs << "  mean objective " << mean << "  ("
                << seconds_since(t0) << " s)\n"
                << std::flush;
    };
  }

  TrainResult result;
  if (config.precision == 64) {
    auto model = initial_model<double>(config, registry);
    result = train(model, config, data.train, registry, out, hooks);
  } else {
    auto model = initial_model<float>(config, registry);
    result = train(model, config, data.train, registry, out, hooks);
  }

  RunManifest m;
  m.command = "train";
  m.config_text = config.to_text();
  m.registry_table = registry.table();
  m.seeds["master"] = std::to_string(config.seed);
  for (const char* s : {"init", "subset", "batches", "triples", "noise"}) {
    m.seeds[s] = std::to_string(derive_seed(config.seed, s));
  }
  m.data_checksums = checksums;
  m.extra["data"] = fs::absolute(data_dir).string();
  m.extra["wall_seconds"] = std::to_string(seconds_since(t0));
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().extension() == ".mvck" || e.path().filename() == "train_log.csv") {
      m.artifacts.push_back(e.path().filename().string());
    }
  }
  std::sort(m.artifacts.begin(), m.artifacts.end());
  append_manifest(out, m);
  std::cout << "final checkpoint " << result.final_checkpoint.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out, baselines, vae_checkpoint;
  std::optional<std::uint64_t> seed;
};

std::vector<std::string> parse_baselines(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item != "pca" && item != "vae") throw UsageError("unknown baseline '" + item + "' (expected pca, vae)");
    out.push_back(item);
  }
  return out;
}

ProbeReport probe_checkpoint(const Checkpoint& ck, const Dataset& data, std::uint64_t seed, const std::string& name,
                             Tensor<double>* test_embedding = nullptr) {
  const Tensor<double> tr = embed(ck, data.train.batch);
  const Tensor<double> te = embed(ck, data.test.batch);
  if (test_embedding) *test_embedding = te;
  return linear_probe(tr, data.train.labels, te, data.test.labels, seed, {}, name);
}

int run_eval(const EvalArgs& a) {
  const auto baselines = parse_baselines(a.baselines);
  if (a.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto data_dir = resolve_data(a.data);
  if (!data_dir) throw UsageError("--data is required (or set MORPHVAE_DATA)");
  const Dataset data = load_mnist(*data_dir);
  const std::uint64_t seed = a.seed.value_or(ck.config.seed);
  const std::size_t d = ck.latent_dim();
  const fs::path out = a.out;
  fs::create_directories(out);

  std::vector<ProbeReport> rows;
  Tensor<double> ours_test;
  const std::string ours_name = ck.config.two_branch ? "ours" : "vae";
  rows.push_back(probe_checkpoint(ck, data, seed, ours_name, &ours_test));
  std::cout << ours_name << " d=" << d << " test accuracy " << rows.back().test_accuracy << '\n';

  RunManifest m;
  m.command = "eval";
  m.config_text = ck.config.to_text();
  m.registry_table = ck.registry_table;
  m.seeds["eval"] = std::to_string(seed);
  m.data_checksums = data_checksums(*data_dir);
  m.extra["checkpoint"] = fs::absolute(a.checkpoint).string();

  for (const auto& b : baselines) {
    if (b == "pca") {
      const Tensor<double> xtr = flatten(data.train.batch);
      const PcaBasis basis = pca(xtr, d);
      const Tensor<double> ptr = basis.project(xtr);
      const Tensor<double> pte = basis.project(flatten(data.test.batch));
      rows.push_back(linear_probe(ptr, data.train.labels, pte, data.test.labels, seed, {}, "pca"));
      if (d == 2) {
        write_scatter_csv(out / "scatter_pca.csv", pte, data.test.labels);
        m.artifacts.push_back("scatter_pca.csv");
      }
    } else if (b == "vae") {
      Checkpoint vae;
      if (!a.vae_checkpoint.empty()) {
        vae = load_checkpoint(a.vae_checkpoint);
        m.extra["vae_checkpoint"] = fs::absolute(a.vae_checkpoint).string();
      } else {
        // Same budget, seed and architecture, single-branch objective.
        const TrainConfig vc = TrainConfig::plain_vae(ck.config);
        const TransformRegistry registry = ck.registry();
        std::cout << "training plain-VAE baseline (" << vc.epochs << " epochs)\n" << std::flush;
        TrainResult r;
        if (vc.precision == 64) {
          auto model = initial_model<double>(vc, registry);
          r = train(model, vc, data.train, registry, out / "vae");
        } else {
          auto model = initial_model<float>(vc, registry);
          r = train(model, vc, data.train, registry, out / "vae");
        }
        vae = load_checkpoint(r.final_checkpoint);
        m.artifacts.push_back("vae/final.mvck");
      }
      if (vae.latent_dim() != d) throw UsageError("vae checkpoint latent dim differs from the evaluated model");
      rows.push_back(probe_checkpoint(vae, data, seed, "vae"));
    }
    std::cout << rows.back().algorithm << " d=" << d << " test accuracy " << rows.back().test_accuracy << '\n';
  }
  write_probe_csv(out / "report.csv", rows);
  m.artifacts.push_back("report.csv");

  if (d == 2) {
    write_scatter_csv(out / "scatter.csv", ours_test, data.test.labels);
    m.artifacts.push_back("scatter.csv");
  }

  if (ck.config.two_branch) {
    const std::size_t n = std::min<std::size_t>(1000, data.test.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const ImageBatch subset = gather(data.test.batch, idx);
    const TransformRegistry registry = ck.registry();
    const CommutativityReport c = ck.precision == 64
                                      ? commutativity_residual(ck.to_model<double>(), subset, registry)
                                      : commutativity_residual(ck.to_model<float>(), subset, registry);
    std::ofstream os(out / "commutativity.csv");
    os << "transform_id,kind,normalized_residual\n";
    for (std::size_t i = 0; i < c.per_transform.size(); ++i) {
      os << i << ',' << registry.spec(i).kind_name() << ',' << c.per_transform[i] << '\n';
    }
    os << "overall,," << c.overall << '\n';
    m.artifacts.push_back("commutativity.csv");
    std::cout << "commutativity residual " << c.overall << '\n';
  }
  append_manifest(out, m);
  return kOk;
}

// ---------------------------------------------------------------------------

struct OrbitArgs {
  std::string checkpoint, data, out;
  std::optional<std::uint64_t> seed;
};

template <typename T>
int orbits_for(const Model<T>& model, const Checkpoint& ck, const Dataset& data, std::uint64_t seed,
               const fs::path& out, RunManifest& m) {
  const auto digits = orbit_digits(data.test, seed);
  auto traces = orbits(model, data.test, digits);
  const Tensor<double> test_z = embed(model, data.test.batch);
  const double spread = latent_spread(test_z);
  const double norm = mean_norm(test_z);

  write_orbit_csv(out / "orbits.csv", traces);
  {
    std::ofstream os(out / "smoothness.csv");
    os << std::setprecision(10) << "digit,image_index,step_length,normalized_by_spread,normalized_by_norm\n";
    for (const auto& t : traces) {
      os << t.digit << ',' << t.image_index << ',' << t.step_length << ',' << t.step_length / spread << ','
         << t.step_length / norm << '\n';
    }
  }

  SvgPlot plot;
  plot.title = "latent orbits, d=" + std::to_string(ck.latent_dim());
  Tensor<double> scatter = test_z;
  if (ck.latent_dim() != 2) {
    const PcaBasis basis = pca(embed(model, data.train.batch), 2);
    scatter = basis.project(test_z);
    for (auto& t : traces) t.points = basis.project(t.points);
    plot.title += " (first two principal components)";
  }
  plot.points = scatter;
  plot.labels = data.test.labels;
  for (const auto& t : traces) plot.polylines.emplace_back(static_cast<std::uint8_t>(t.digit), t.points);
  std::ofstream(out / "orbits.svg") << render_svg(plot);
  write_scatter_csv(out / "scatter.csv", scatter, data.test.labels);
  m.artifacts = {"orbits.csv", "orbits.svg", "scatter.csv", "smoothness.csv"};
  return kOk;
}

int run_orbits(const OrbitArgs& a) {
  if (a.checkpoint.empty()) throw UsageError("--checkpoint must not be empty");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto data_dir = resolve_data(a.data);
  if (!data_dir) throw UsageError("--data is required (or set MORPHVAE_DATA)");
  const Dataset data = load_mnist(*data_dir);
  const std::uint64_t seed = a.seed.value_or(ck.config.seed);
  const fs::path out = a.out;
  fs::create_directories(out);

  RunManifest m;
  m.command = "orbits";
  m.config_text = ck.config.to_text();
  m.registry_table = ck.registry_table;
  m.seeds["orbit_digits"] = std::to_string(seed);
  m.data_checksums = data_checksums(*data_dir);
  m.extra["checkpoint"] = fs::absolute(a.checkpoint).string();
  const int rc = ck.precision == 64 ? orbits_for(ck.to_model<double>(), ck, data, seed, out, m)
                                    : orbits_for(ck.to_model<float>(), ck, data, seed, out, m);
  append_manifest(out, m);
  std::cout << "wrote orbits for 10 digits to " << out << '\n';
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformation-conditioned VAE: training and evaluation on MNIST"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  IngestArgs ingest;
  auto* ci = app.add_subcommand("ingest", "Verify raw MNIST IDX files and write a checksummed cache");
  ci->add_option("--raw", ingest.raw, "Directory with the four uncompressed IDX files")->required();
  ci->add_option("--out", ingest.out, "Cache directory")->required();

  TrainArgs tr;
  std::uint64_t tr_seed = 0;
  auto* ct = app.add_subcommand("train", "Train a model");
  auto* cfg_opt = ct->add_option("--config", tr.config, "key=value config file");
  ct->add_option("--replay", tr.replay, "Re-run the train entry of a manifest")->excludes(cfg_opt);
  ct->add_option("--data", tr.data, "MNIST directory")->required();
  ct->add_option("--out", tr.out, "Output directory")->required();
  auto* tr_seed_opt = ct->add_option("--seed", tr_seed, "Override the master seed");
  ct->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalArgs ev;
  std::uint64_t ev_seed = 0;
  auto* ce = app.add_subcommand("eval", "Linear-probe report for a checkpoint and baselines");
  ce->add_option("--checkpoint", ev.checkpoint, "Checkpoint to evaluate")->required();
  ce->add_option("--data", ev.data, "MNIST directory (default $MORPHVAE_DATA)");
  ce->add_option("--baselines", ev.baselines, "Comma-separated: pca,vae");
  ce->add_option("--vae-checkpoint", ev.vae_checkpoint, "Use this plain-VAE checkpoint instead of training one");
  ce->add_option("--out", ev.out, "Output directory")->required();
  auto* ev_seed_opt = ce->add_option("--seed", ev_seed, "Override the evaluation seed");

  OrbitArgs ob;
  std::uint64_t ob_seed = 0;
  auto* co = app.add_subcommand("orbits", "Latent orbits of ten digits under full rotation");
  co->add_option("--checkpoint", ob.checkpoint, "Checkpoint")->required();
  co->add_option("--data", ob.data, "MNIST directory (default $MORPHVAE_DATA)");
  co->add_option("--out", ob.out, "Output directory")->required();
  auto* ob_seed_opt = co->add_option("--seed", ob_seed, "Override the digit-selection seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  if (*tr_seed_opt) tr.seed = tr_seed;
  if (*ev_seed_opt) ev.seed = ev_seed;
  if (*ob_seed_opt) ob.seed = ob_seed;

  try {
    if (*ci) return run_ingest(ingest);
    if (*ct) return run_train(tr);
    if (*ce) return run_eval(ev);
    if (*co) return run_orbits(ob);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const IdxError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const TrainingFault& e) {
    std::cerr << e.what() << '\n';
    return kFault;
  } catch (const NumericalFault& e) {
    std::cerr << "numerical fault: " << e.what() << '\n';
    return kFault;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
