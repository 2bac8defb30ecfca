// Acceptance checks at full desk scale. Prints one PASS/FAIL line per
// criterion and exits nonzero if any fails.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "grad_suite.hpp"
#include "oracles.hpp"
#include "xcr/xcr.hpp"

using namespace xcr;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Verdict {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Verdict& v) {
  std::printf("%s %2d %s: %s\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str());
  std::fflush(stdout);
  failures += !v.pass;
}

template <class F>
void criterion(int id, const char* name, F&& f) {
  try {
    report(id, name, f());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("error: ") + e.what()});
  }
}

// ---- 1-4: properties --------------------------------------------------------------------

Verdict gradient_suite() {
  auto t0 = Clock::now();
  double prim = 0, comp = 0;
  std::string worst;
  for (const auto& c : gradsuite::primitive_cases())
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      double e = grad_check(c.f, gradsuite::random_tensor(c.shape, seed * 31, c.lo, c.hi));
      if (e > prim) prim = e, worst = c.name;
    }
  comp = gradsuite::small_cnn_grad_error();
  for (const auto& [name, e] : gradsuite::ib_loss_grad_errors()) comp = std::max(comp, e);
  double secs = seconds_since(t0);
  return {prim < 1e-5 && comp < 1e-4 && secs < 120.0,
          "primitives max " + fmt("%.2e", prim) + " (" + worst + "), composites max " + fmt("%.2e", comp) + ", " +
              fmt("%.1f", secs) + " s"};
}

Verdict gumbel_max_law() {
  RngStream rng(20240607);
  Tensor logp = Tensor::vector({std::log(0.7), std::log(0.3)});
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    Tensor c = concrete_weights(logp, sample_gumbel({2}, rng), 0.1);
    hits += c[0] > c[1];
  }
  double f = double(hits) / n, tol = 3 * std::sqrt(0.21 / n);
  return {std::fabs(f - 0.7) <= tol, "frequency " + fmt("%.5f", f) + ", allowed 0.7 +/- " + fmt("%.5f", tol)};
}

Verdict metric_oracles() {
  RngStream rng(31337);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t n = 1 + rng.uniform_int(200), k = 2 + rng.uniform_int(19);
    PredictionSet p = oracle::random_set(rng, n, k, 0.2 + 4.0 * rng.uniform());
    worst = std::max({worst, std::fabs(ece(p, 15) - oracle::ece(p.probs, p.labels, 15)),
                      std::fabs(nll(p) - oracle::nll(p.probs, p.labels)),
                      std::fabs(brier(p) - oracle::brier(p.probs, p.labels))});
  }
  std::vector<int> y(100);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = int(i % 10);
  PredictionSet u{Tensor({100, 10}, 0.1), y};
  double nll_err = std::fabs(nll(u) - std::log(10.0)), brier_err = std::fabs(brier(u) - 0.9);
  return {worst <= 1e-12 && nll_err <= 1e-12 && brier_err <= 1e-12,
          "max oracle gap " + fmt("%.1e", worst) + " over 1000 sets; uniform-10 nll gap " + fmt("%.1e", nll_err) +
              ", brier gap " + fmt("%.1e", brier_err)};
}

Verdict kl_closed_form() {
  RngStream rng(4242);
  double worst = 0, min_nonuniform = 1.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t d = 2 + rng.uniform_int(100);
    std::vector<double> p(d);
    double s = 0;
    for (auto& v : p) s += v = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
    if (s == 0) continue;
    for (auto& v : p) v /= s;
    double kl = kl_to_uniform(p.data(), d);
    worst = std::max(worst, std::fabs(kl - oracle::kl_to_uniform(p)));
    bool uniform = std::all_of(p.begin(), p.end(), [&](double v) { return v == p[0]; });
    if (!uniform) min_nonuniform = std::min(min_nonuniform, kl);
  }
  double at_uniform = 0;
  for (std::size_t d : {1, 2, 10, 64, 1000}) {
    std::vector<double> u(d, 1.0 / double(d));
    at_uniform = std::max(at_uniform, std::fabs(kl_to_uniform(u.data(), d)));
  }
  return {worst <= 1e-12 && at_uniform <= 1e-12 && min_nonuniform > 0.0,
          "max gap " + fmt("%.1e", worst) + ", |kl| at uniform " + fmt("%.1e", at_uniform) +
              ", smallest non-uniform kl " + fmt("%.2e", min_nonuniform)};
}

// ---- 5-10: trained models ---------------------------------------------------------------

struct Mean {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) { sum += v, ++n; }
  double value() const { return n ? sum / double(n) : std::nan(""); }
};

ExperimentConfig load_sample(const std::string& samples, const std::string& name) {
  return parse_config(read_file(samples + "/" + name));
}

/// Fresh timed run of the whole pipeline.
double timed_run(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::remove_all(dir);
  auto t0 = Clock::now();
  run_experiment(cfg, dir);
  return seconds_since(t0);
}

Verdict planted_recovery(const ExperimentConfig& cfg, const fs::path& run) {
  const PlantedSpec spec = cfg.dataset.planted(cfg.ib.patch_size);
  const std::size_t k = cfg.ib.k, d = spec.patches();
  Mean learned, random;
  double var_sum = 0;
  std::size_t items = 0;
  for (auto seed : cfg.seeds) {
    SplitResult data = load_splits(cfg, seed);
    ModelParams sel = load_checkpoint((seed_dir(run, seed) / "selector.ckpt").string());
    auto masks = hard_topk_rows(selector_logits(sel, data.test.images, cfg.ib.patch_size), k);
    RngStream rng = RngStream(seed).split("random-baseline");
    Mean l, r;
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const auto& planted = spec.informative[std::size_t(data.test.labels[i])];
      HardMask rnd = random_khot(d, k, rng);
      double hit = 0, rhit = 0;
      for (auto j : planted) hit += masks[i].bits[j], rhit += rnd.bits[j];
      const double m = double(planted.size());
      l.add(hit / m), r.add(rhit / m);
      // Hypergeometric variance of the recovered fraction.
      var_sum += double(k) * (m / double(d)) * (1 - m / double(d)) * double(d - k) / double(d - 1) / (m * m);
      ++items;
    }
    learned.add(l.value()), random.add(r.value());
  }
  const double expect = double(k) / double(d);
  const double sigma = std::sqrt(var_sum / double(items)) / std::sqrt(double(items));
  const bool ok = learned.value() >= 0.8 && std::fabs(random.value() - expect) <= 3 * sigma &&
                  learned.value() >= 10 * random.value();
  return {ok, "learned " + fmt("%.4f", learned.value()) + ", random " + fmt("%.4f", random.value()) + " (expected " +
                  fmt("%.4f", expect) + " +/- " + fmt("%.4f", 3 * sigma) + "), ratio " +
                  fmt("%.1f", learned.value() / random.value())};
}

struct VariantSummary {
  Mean clean, corrupted, fidelity, sufficiency;
};

std::map<std::string, VariantSummary> summarize(const fs::path& run) {
  LoadedRun r = load_run(run);
  // variant -> seed -> mean corrupted accuracy
  std::map<std::string, std::map<std::uint64_t, Mean>> corrupted;
  std::map<std::string, VariantSummary> out;
  for (const auto& row : r.rows) {
    if (row.key.temperature_scaled) continue;
    auto& s = out[row.key.variant];
    if (row.key.corruption == "none") {
      s.clean.add(*row.accuracy);
      s.fidelity.add(*row.fidelity);
      s.sufficiency.add(*row.sufficiency);
    } else {
      corrupted[row.key.variant][row.key.seed].add(*row.accuracy);
    }
  }
  for (auto& [variant, seeds] : corrupted)
    for (auto& [seed, m] : seeds) out[variant].corrupted.add(m.value());
  return out;
}

Verdict corrupted_accuracy(const fs::path& run, double secs) {
  auto s = summarize(run);
  const auto &v = s.at("vanilla"), &x = s.at("xcr");
  double gain = x.corrupted.value() - v.corrupted.value(), clean_gap = x.clean.value() - v.clean.value();
  bool ok = gain >= 0.02 && std::fabs(clean_gap) <= 0.02 && secs < 1800.0;
  return {ok, "corrupted " + fmt("%.4f", v.corrupted.value()) + " -> " + fmt("%.4f", x.corrupted.value()) + " (" +
                  fmt("%+.2f", 100 * gain) + " points), clean " + fmt("%.4f", v.clean.value()) + " -> " +
                  fmt("%.4f", x.clean.value()) + ", runtime " + fmt("%.1f", secs / 60) + " min"};
}

Verdict explanation_quality(const fs::path& run) {
  auto s = summarize(run);
  const auto &v = s.at("vanilla"), &x = s.at("xcr");
  bool ok = x.fidelity.value() > v.fidelity.value() && x.sufficiency.value() < v.sufficiency.value();
  return {ok, "fidelity " + fmt("%.4f", v.fidelity.value()) + " -> " + fmt("%.4f", x.fidelity.value()) +
                  ", sufficiency " + fmt("%.3e", v.sufficiency.value()) + " -> " + fmt("%.3e", x.sufficiency.value())};
}

Verdict vanilla_reduction(const ExperimentConfig& cfg, const fs::path& run) {
  const std::uint64_t seed = cfg.seeds.front();
  SplitResult data = load_splits(cfg, seed);
  ModelParams sel = load_checkpoint((seed_dir(run, seed) / "selector.ckpt").string());
  TrainConfig tc = cfg.train_for(seed);
  tc.counterfactual_weight = 0.0;
  ClassifierResult a = train_vanilla(init_blackbox(data.train, seed), data.train, &data.val, tc);
  ClassifierResult b = retrain_blackbox(init_blackbox(data.train, seed), data.train, &data.val, sel, cfg.ib, tc);
  std::size_t differing = 0, total = 0;
  for (std::size_t t = 0; t < a.model.count(); ++t)
    for (std::size_t i = 0; i < a.model.tensors[t].size(); ++i, ++total)
      differing += std::bit_cast<std::uint64_t>(a.model.tensors[t][i]) != std::bit_cast<std::uint64_t>(b.model.tensors[t][i]);
  bool same_history = history_csv(a.history) == history_csv(b.history);
  return {differing == 0 && same_history, std::to_string(differing) + " of " + std::to_string(total) +
                                              " parameters differ bitwise, histories " +
                                              (same_history ? "identical" : "differ") + " (" +
                                              std::to_string(tc.epochs) + " epochs, seed " + std::to_string(seed) + ")"};
}

Verdict temperature_protocol(const std::vector<std::pair<ExperimentConfig, fs::path>>& runs, const fs::path& work) {
  std::size_t fits = 0, worse = 0, unmatched = 0;
  double max_gain = 0;
  std::vector<fs::path> dirs;
  for (const auto& [cfg, run] : runs) {
    dirs.push_back(run);
    for (auto seed : cfg.seeds) {
      SplitResult data = load_splits(cfg, seed);
      for (const char* variant : {"vanilla", "xcr"}) {
        ModelParams m = load_checkpoint((seed_dir(run, seed) / (std::string(variant) + ".ckpt")).string());
        Tensor logits = forward(m, data.val.images);
        double t = fit_temperature(logits, data.val.labels);
        double before = nll_at_temperature(logits, data.val.labels, 1.0);
        double after = nll_at_temperature(logits, data.val.labels, t);
        ++fits;
        worse += after > before;
        max_gain = std::max(max_gain, before - after);
      }
    }
    std::set<std::tuple<std::string, std::string, std::string, int, std::uint64_t>> plain, scaled;
    for (const auto& row : load_run(run).rows)
      (row.key.temperature_scaled ? scaled : plain)
          .insert({row.key.variant, row.key.split, row.key.corruption, row.key.severity, row.key.seed});
    for (const auto& k : plain) unmatched += !scaled.count(k);
    for (const auto& k : scaled) unmatched += !plain.count(k);
  }
  auto rep = emit_report(dirs, work / "report");
  std::string table = read_file((work / "report" / "corrupted.csv").string());
  bool both = table.find(",vanilla,0,") != std::string::npos && table.find(",vanilla,1,") != std::string::npos &&
              table.find(",xcr,0,") != std::string::npos && table.find(",xcr,1,") != std::string::npos;
  return {worse == 0 && unmatched == 0 && both && fits > 0,
          std::to_string(worse) + " of " + std::to_string(fits) + " fits worsened validation nll (largest gain " +
              fmt("%.4f", max_gain) + "), " + std::to_string(unmatched) + " metric rows without a scaled twin, report " +
              (both ? "has" : "lacks") + " both variants"};
}

Verdict determinism(const ExperimentConfig& cfg, const fs::path& work) {
  fs::path a = work / "determinism_a", b = work / "determinism_b";
  fs::remove_all(a), fs::remove_all(b);
  run_experiment(cfg, a);
  run_experiment(parse_config(read_file((a / "manifest.txt").string())), b);
  std::size_t compared = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    fs::path other = b / fs::relative(e.path(), a);
    ++compared;
    differ += !fs::exists(other) || read_file(e.path().string()) != read_file(other.string());
  }
  return {compared > 0 && differ == 0,
          std::to_string(compared) + " CSVs compared after re-running from the manifest, " + std::to_string(differ) +
              " differ"};
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Acceptance checks"};
  std::string work = "acceptance_work", samples = XCR_SAMPLES;
  app.add_option("--work", work, "scratch directory for runs");
  app.add_option("--samples", samples, "directory holding default.cfg, retrain.cfg and quick.cfg");
  CLI11_PARSE(app, argc, argv);
  const fs::path w(work);
  fs::create_directories(w);

  criterion(1, "gradient suite", gradient_suite);
  criterion(2, "Gumbel-max law", gumbel_max_law);
  criterion(3, "metric oracles", metric_oracles);
  criterion(4, "KL closed form", kl_closed_form);

  // Explainer-quality checks use the default run (k = 4, one patch per
  // planted location); the corrupted-accuracy check uses the k = 8 run.
  ExperimentConfig def, ret;
  double ret_secs = -1;
  std::string setup_error;
  try {
    def = load_sample(samples, "default.cfg");
    ret = load_sample(samples, "retrain.cfg");
    std::printf("training default run (k = %zu) ...\n", def.ib.k);
    std::fflush(stdout);
    double def_secs = timed_run(def, w / "default");
    std::printf("  done in %.1f min\ntraining retrain run (k = %zu) ...\n", def_secs / 60, ret.ib.k);
    std::fflush(stdout);
    ret_secs = timed_run(ret, w / "retrain");
    std::printf("  done in %.1f min\n", ret_secs / 60);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_runs = [&](auto f) {
    return [&, f] {
      if (!setup_error.empty()) return Verdict{false, "runs failed: " + setup_error};
      return f();
    };
  };

  criterion(5, "planted-feature recovery", needs_runs([&] { return planted_recovery(def, w / "default"); }));
  criterion(6, "corrupted accuracy", needs_runs([&] { return corrupted_accuracy(w / "retrain", ret_secs); }));
  criterion(7, "explanation quality", needs_runs([&] { return explanation_quality(w / "default"); }));
  criterion(8, "vanilla reduction", needs_runs([&] { return vanilla_reduction(def, w / "default"); }));
  criterion(9, "temperature protocol",
            needs_runs([&] { return temperature_protocol({{def, w / "default"}, {ret, w / "retrain"}}, w); }));
  criterion(10, "determinism", [&] { return determinism(load_sample(samples, "quick.cfg"), w); });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures ? 1 : 0;
}
