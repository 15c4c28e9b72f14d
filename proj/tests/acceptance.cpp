// Acceptance run on full MNIST. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion outside --known-gap fails.
//
//   acceptance --data DIR [--work DIR] [--criteria 1,2,...] [--reuse]
//              [--known-gap N ...]

#include <CLI11.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "morphvae/checkpoint.hpp"
#include "morphvae/dataio.hpp"
#include "morphvae/evaluate.hpp"
#include "morphvae/train.hpp"

namespace fs = std::filesystem;
using namespace morphvae;

namespace {

// Pinned targets and tolerances.
constexpr double kPcaD2Target = 44.7, kPcaD2Tolerance = 3.0, kPcaD2CpuLimit = 5 * 60.0;
constexpr double kPcaD64Target = 91.7, kPcaD64Tolerance = 1.5, kPcaD64CpuLimit = 10 * 60.0;
constexpr double kVaeFloor = 93.0;
constexpr double kOrderingMargin = 1.0;
constexpr std::size_t kOrderingSeedsNeeded = 2;
constexpr double kOrderingCpuLimit = 4 * 3600.0;
constexpr double kD2Slack = 1.0;
constexpr double kCommutativityRatio = 0.5;
constexpr std::size_t kCommutativityImages = 1000;
constexpr std::size_t kOrbitDigitsNeeded = 8;

constexpr std::size_t kDeskSubset = 20000;
constexpr std::size_t kDeskEpochs = 20;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string pct(double fraction) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * fraction << "%";
  return os.str();
}

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

class Reporter {
 public:
  explicit Reporter(std::set<int> known) : known_(std::move(known)) {}

  void report(int id, bool pass, const std::string& detail) {
    verdicts_.push_back({id, pass, detail});
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail
              << (!pass && known_.count(id) ? "  [known gap]" : "") << std::endl;
  }
  void info(const std::string& line) { std::cout << "  " << line << std::endl; }

  int exit_code() const {
    for (const auto& v : verdicts_) {
      if (!v.pass && !known_.count(v.id)) return 1;
    }
    return 0;
  }

 private:
  std::set<int> known_;
  std::vector<Verdict> verdicts_;
};

// ---------------------------------------------------------------------------
// Criterion 8: invariant gates, run from the unit-test binaries.

struct Gate {
  const char* what;
  const char* binary;
  const char* filter;
};

const std::vector<Gate> kGates{
    {"gradient checks (64-bit, rel. err < 1e-4)", "test_numerics", "GradientCheck.*:Ops/UnaryGradient.*:Adjoint.*"},
    {"model gradient checks", "test_model", "GradientCheck.*"},
    {"ELBO gradient check", "test_objective", "ElboTest.GradientMatchesFiniteDifferences"},
    {"KL analytic vs Monte-Carlo and non-negativity", "test_objective", "KlStandardNormal.*:KlDiagGaussians.*"},
    {"transform composition laws", "test_augment",
     "Compose.ShiftUpThreeTwiceIsShiftUpSix:Compose.AssociativeAndIdentityNeutral"},
    {"IDX round trip", "test_dataio", "WriteIdx.*"},
    {"64-bit determinism", "test_train", "Train.DoublePrecisionRunsAreBitIdentical:Checkpoint.*"},
    {"manifest replay", "test_cli", "Cli.TrainReplayEvalAndOrbitsEndToEnd"},
};

bool run_gates(Reporter& rep, const fs::path& test_dir) {
  bool all = true;
  std::vector<std::string> failed;
  for (const auto& g : kGates) {
    const std::string cmd = (test_dir / g.binary).string() + " --gtest_filter='" + g.filter + "' >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    rep.info(std::string(ok ? "ok   " : "FAIL ") + g.what + " (" + g.binary + " " + g.filter + ")");
    if (!ok) {
      all = false;
      failed.push_back(g.what);
    }
  }
  std::string detail = all ? "all invariant gates pass" : "failed gates:";
  for (const auto& f : failed) detail += " [" + f + "]";
  rep.report(8, all, detail);
  return all;
}

// ---------------------------------------------------------------------------
// Trained models.

struct RunResult {
  std::string name;
  TrainConfig config;
  Model<float> initial;
  Model<float> trained;
  double train_cpu_seconds = 0;
  bool reused = false;
  std::vector<double> epoch_means;
};

TrainConfig desk_config(std::size_t latent_dim, std::uint64_t seed, bool plain) {
  std::ostringstream text;
  text << "latent_dim = " << latent_dim << "\nsubset = " << kDeskSubset << "\nepochs = " << kDeskEpochs
       << "\nseed = " << seed << "\ncheckpoint_every = " << kDeskEpochs << "\n";
  TrainConfig c = TrainConfig::parse(text.str());
  return plain ? TrainConfig::plain_vae(c) : c;
}

RunResult run_training(const std::string& name, const TrainConfig& config, const Dataset& data,
                       const TransformRegistry& registry, const fs::path& work, bool reuse) {
  const fs::path dir = work / name;
  RunResult r{name, config, initial_model<float>(config, registry), initial_model<float>(config, registry), 0, false, {}};
  const fs::path cpu_file = dir / "train_cpu_seconds.txt";
  if (reuse && fs::exists(dir / "final.mvck") && fs::exists(cpu_file)) {
    const Checkpoint ck = load_checkpoint(dir / "final.mvck");
    if (ck.config.to_text() == config.to_text()) {
      r.trained = ck.to_model<float>();
      std::ifstream(cpu_file) >> r.train_cpu_seconds;
      r.reused = true;
      return r;
    }
  }
  fs::remove_all(dir);
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t e, double mean) {
    std::cout << "  [" << name << "] epoch " << e + 1 << "/" << config.epochs << " mean objective " << num(mean, 6)
              << std::endl;
  };
  const double t0 = cpu_seconds();
  const auto result = train(r.trained, config, data.train, registry, dir, hooks);
  r.train_cpu_seconds = cpu_seconds() - t0;
  r.epoch_means = result.epoch_mean_total;
  std::ofstream(cpu_file) << std::setprecision(10) << r.train_cpu_seconds << '\n';
  return r;
}

double probe_accuracy(const Model<float>& model, const Dataset& data, const std::string& name) {
  const Tensor<double> tr = embed(model, data.train.batch);
  const Tensor<double> te = embed(model, data.test.batch);
  return linear_probe(tr, data.train.labels, te, data.test.labels, 0, {}, name).test_accuracy;
}

ImageBatch first_test_images(const Dataset& data, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, data.test.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return gather(data.test.batch, idx);
}

// Mean consecutive-point distance of each digit's orbit over the spread of
// the model's test embeddings.
std::vector<double> orbit_smoothness(const Model<float>& model, const Dataset& data, std::uint64_t seed) {
  const auto digits = orbit_digits(data.test, seed);
  const double spread = latent_spread(embed(model, data.test.batch));
  std::vector<double> out;
  for (const auto& t : orbits(model, data.test, digits)) out.push_back(t.step_length / spread);
  return out;
}

std::set<int> parse_ids(const std::string& s) {
  std::set<int> ids;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) ids.insert(std::stoi(tok));
  }
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria on full MNIST"};
  std::string data_dir, work_dir = (fs::temp_directory_path() / "morphvae-acceptance").string();
  std::string criteria = "1,2,3,4,5,6,7,8";
  std::vector<int> known_gaps;
  bool reuse = false;
  app.add_option("--data", data_dir, "MNIST directory")->required();
  app.add_option("--work", work_dir, "Directory for trained runs");
  app.add_option("--criteria", criteria, "Comma-separated criteria to evaluate");
  app.add_option("--known-gap", known_gaps, "Criteria whose failure does not fail the run");
  app.add_flag("--reuse", reuse, "Reuse finished runs in --work with identical configs");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted = parse_ids(criteria);
  Reporter rep(std::set<int>(known_gaps.begin(), known_gaps.end()));
  const fs::path tests = fs::canonical("/proc/self/exe").parent_path();

  bool gates = true;
  if (wanted.count(8)) {
    std::cout << "== invariant gates" << std::endl;
    gates = run_gates(rep, tests);
  }
  auto blocked = [&](int id) {
    if (gates) return false;
    rep.report(id, false, "not evaluated: invariant gates failed");
    return true;
  };

  const Dataset data = load_mnist(data_dir);
  const TransformRegistry registry = TransformRegistry::default_registry();

  for (const auto& [id, k, target, tol, limit] :
       {std::tuple{1, std::size_t{2}, kPcaD2Target, kPcaD2Tolerance, kPcaD2CpuLimit},
        std::tuple{2, std::size_t{64}, kPcaD64Target, kPcaD64Tolerance, kPcaD64CpuLimit}}) {
    if (!wanted.count(id) || blocked(id)) continue;
    std::cout << "== PCA d=" << k << std::endl;
    const double t0 = cpu_seconds();
    const auto basis = pca(flatten(data.train.batch), k);
    const auto r = linear_probe(basis.project(flatten(data.train.batch)), data.train.labels,
                                basis.project(flatten(data.test.batch)), data.test.labels, 0, {}, "pca");
    const double cpu = cpu_seconds() - t0;
    const double acc = 100.0 * r.test_accuracy;
    const bool ok = std::abs(acc - target) <= tol && cpu < limit;
    rep.report(id, ok,
               "PCA d=" + std::to_string(k) + " probe " + pct(r.test_accuracy) + " (target " + num(target) + " +/- " +
                   num(tol) + "), cpu " + num(cpu, 3) + " s (limit " + num(limit, 4) + " s)");
  }

  const bool need64 = wanted.count(3) || wanted.count(4) || wanted.count(6) || wanted.count(7);
  const bool need2 = wanted.count(5);
  if (!gates || (!need64 && !need2)) {
    for (int id : {3, 4, 5, 6, 7}) {
      if (wanted.count(id)) blocked(id);
    }
    return rep.exit_code();
  }

  // Desk-budget runs: ours and plain VAE at d=64 for every seed, d=2 for the first.
  std::map<std::string, RunResult> runs;
  std::map<std::string, double> accuracy;
  auto run = [&](const std::string& name, std::size_t d, std::uint64_t seed, bool plain) -> RunResult& {
    if (!runs.count(name)) {
      std::cout << "== training " << name << std::endl;
      auto r = run_training(name, desk_config(d, seed, plain), data, registry, work_dir, reuse);
      accuracy[name] = probe_accuracy(r.trained, data, name);
      rep.info(name + ": probe " + pct(accuracy[name]) + ", train cpu " + num(r.train_cpu_seconds, 5) + " s" +
               (r.reused ? " (reused)" : ""));
      runs.emplace(name, std::move(r));
    }
    return runs.at(name);
  };
  auto name_of = [](bool plain, std::size_t d, std::uint64_t seed) {
    return std::string(plain ? "vae" : "ours") + "-d" + std::to_string(d) + "-s" + std::to_string(seed);
  };

  if (need64) {
    for (std::uint64_t s : kSeeds) {
      run(name_of(false, 64, s), 64, s, false);
      if (wanted.count(3) || wanted.count(4)) run(name_of(true, 64, s), 64, s, true);
    }
  }

  if (wanted.count(3)) {
    const double acc = accuracy.at(name_of(true, 64, kSeeds[0]));
    std::string others;
    for (std::size_t i = 1; i < kSeeds.size(); ++i) others += " " + pct(accuracy.at(name_of(true, 64, kSeeds[i])));
    rep.report(3, 100 * acc >= kVaeFloor,
               "plain VAE d=64 (seed " + std::to_string(kSeeds[0]) + ") probe " + pct(acc) + " (floor " +
                   num(kVaeFloor) + "%); other seeds:" + others);
  }

  if (wanted.count(4)) {
    std::size_t wins = 0;
    double cpu = 0;
    std::string detail;
    for (std::uint64_t s : kSeeds) {
      const double ours = accuracy.at(name_of(false, 64, s)), vae = accuracy.at(name_of(true, 64, s));
      const bool win = 100 * (ours - vae) >= kOrderingMargin;
      wins += win;
      cpu += runs.at(name_of(false, 64, s)).train_cpu_seconds + runs.at(name_of(true, 64, s)).train_cpu_seconds;
      detail += " seed " + std::to_string(s) + ": " + pct(ours) + " vs " + pct(vae) + (win ? " (+)" : " (-)") + ";";
    }
    rep.report(4, wins >= kOrderingSeedsNeeded && cpu <= kOrderingCpuLimit,
               "ours - VAE >= " + num(kOrderingMargin) + " on " + std::to_string(wins) + "/" +
                   std::to_string(kSeeds.size()) + " seeds (need " + std::to_string(kOrderingSeedsNeeded) + ");" +
                   detail + " combined train cpu " + num(cpu, 5) + " s (limit " + num(kOrderingCpuLimit, 5) + " s)");
  }

  if (wanted.count(5)) {
    const double ours = accuracy.at(run(name_of(false, 2, kSeeds[0]), 2, kSeeds[0], false).name);
    const double vae = accuracy.at(run(name_of(true, 2, kSeeds[0]), 2, kSeeds[0], true).name);
    rep.report(5, 100 * ours >= 100 * vae - kD2Slack,
               "d=2 ours " + pct(ours) + " vs plain VAE " + pct(vae) + " (need ours >= VAE - " + num(kD2Slack) + ")");
  }

  if (wanted.count(6)) {
    const ImageBatch subset = first_test_images(data, kCommutativityImages);
    bool all = true;
    std::string detail;
    for (std::uint64_t s : kSeeds) {
      const RunResult& r = runs.at(name_of(false, 64, s));
      const double init = commutativity_residual(r.initial, subset, registry).overall;
      const double trained = commutativity_residual(r.trained, subset, registry).overall;
      const bool ok = trained <= kCommutativityRatio * init;
      all = all && ok;
      detail += " seed " + std::to_string(s) + ": " + num(trained) + " vs init " + num(init) + " (ratio " +
                num(trained / init, 3) + ");";
    }
    rep.report(6, all, "trained/init commutativity residual <= " + num(kCommutativityRatio) + " per seed;" + detail);
  }

  if (wanted.count(7)) {
    const RunResult& r = runs.at(name_of(false, 64, kSeeds[0]));
    const auto before = orbit_smoothness(r.initial, data, kSeeds[0]);
    const auto after = orbit_smoothness(r.trained, data, kSeeds[0]);
    std::size_t better = 0;
    std::string detail;
    for (std::size_t i = 0; i < before.size(); ++i) {
      better += after[i] < before[i];
      detail += " " + std::to_string(i) + ":" + num(after[i], 3) + "/" + num(before[i], 3);
    }
    rep.report(7, better >= kOrbitDigitsNeeded,
               "orbit step/spread smaller after training for " + std::to_string(better) + "/10 digits (need " +
                   std::to_string(kOrbitDigitsNeeded) + "); trained/untrained by digit:" + detail);
  }

  // Training-health notes (not criteria).
  for (const auto& [name, r] : runs) {
    if (r.epoch_means.size() >= 5) {
      std::string m;
      for (std::size_t e = 0; e < 5; ++e) m += " " + num(r.epoch_means[e], 6);
      rep.info(name + " first five epoch means:" + m);
    }
  }
  return rep.exit_code();
}
