#pragma once

// Run directories: per-seed training stages, evaluation, grids, and the
// seed-averaged report with SVG curves.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "xcr/config.hpp"
#include "xcr/corruptions.hpp"
#include "xcr/data_io.hpp"
#include "xcr/explainer.hpp"
#include "xcr/metrics.hpp"
#include "xcr/training.hpp"

#ifndef XCR_CODE_VERSION
#define XCR_CODE_VERSION "0.1.0"
#endif

namespace xcr {

namespace fs = std::filesystem;

inline constexpr const char* kCodeVersion = XCR_CODE_VERSION;

// ---- parallel jobs ------------------------------------------------------------------------

/// Worker cap from XCR_THREADS (positive integer), else the hardware concurrency.
inline std::size_t worker_limit() {
  if (const char* env = std::getenv("XCR_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw ConfigError("XCR_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(0..n-1) on up to worker_limit() threads; rethrows the first failure.
inline void run_jobs(std::size_t n, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = std::min(n, worker_limit());
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

// ---- artifacts ------------------------------------------------------------------------------

inline fs::path seed_dir(const fs::path& run, std::uint64_t seed) { return run / ("seed_" + std::to_string(seed)); }

inline void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  write_file(p.string(), s);
}

inline const std::vector<std::string>& history_header() {
  static const std::vector<std::string> h{"epoch",   "learning_rate",  "train_loss",  "val_loss",
                                          "train_acc", "val_acc", "train_acc_expl", "val_acc_expl"};
  return h;
}

inline std::string history_csv(const History& h) {
  std::string out = join_csv(history_header()) + "\n";
  for (const auto& r : h.epochs)
    out += join_csv({std::to_string(r.epoch), format_double(r.learning_rate), format_double(r.train_loss),
                     format_double(r.val_loss), format_double(r.train_acc), format_double(r.val_acc),
                     format_double(r.train_acc_expl), format_double(r.val_acc_expl)}) +
           "\n";
  return out;
}

inline History parse_history_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || split_csv(line) != history_header()) throw IoError("history csv: unexpected header");
  History h;
  auto num = [](const std::string& s) { return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s); };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != history_header().size()) throw IoError("history csv: bad row '" + line + "'");
    h.epochs.push_back({std::stoull(f[0]), num(f[1]), num(f[2]), num(f[3]), num(f[4]), num(f[5]), num(f[6]), num(f[7])});
  }
  return h;
}

/// The resolved config plus the code version; feeding it back as a config
/// reproduces the run.
inline std::string manifest_text(const ExperimentConfig& cfg) {
  ConfigEntries e = to_entries(cfg);
  e["manifest.code_version"] = kCodeVersion;
  return to_text(e);
}

// ---- data ---------------------------------------------------------------------------------------

/// Train/val/test for one seed. Synthetic data is regenerated per seed on the
/// fixed layout; file sources are loaded and re-split per seed.
inline SplitResult load_splits(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& d = cfg.dataset;
  Dataset all;
  switch (d.source) {
    case DataSource::Synthetic:
      all = synth_planted_dataset(d.planted(cfg.ib.patch_size), RngStream(seed).split("dataset"));
      break;
    case DataSource::Native: all = load_dataset(d.path); break;
    case DataSource::Idx: all = load_idx_dataset(d.path, d.labels_path, d.classes); break;
    case DataSource::Cifar: all = load_cifar_binary(d.path, d.classes); break;
  }
  all.validate();
  PatchGrid::for_images(all.images, cfg.ib.patch_size);
  return split_dataset(all, d.split, seed);
}

// ---- stages -------------------------------------------------------------------------------------

struct StageContext {
  const ExperimentConfig& cfg;
  fs::path run;
  std::uint64_t seed;
  SplitResult data;
};

inline void stage_train_explainer(const StageContext& c) {
  ExplainerModel m = train_explainer(c.data.train, &c.data.val, c.cfg.ib, c.cfg.train_for(c.seed, true));
  fs::path dir = seed_dir(c.run, c.seed);
  fs::create_directories(dir);
  save_checkpoint((dir / "selector.ckpt").string(), m.selector);
  save_checkpoint((dir / "approximator.ckpt").string(), m.approximator);
  write_text(dir / "history_explainer.csv", history_csv(m.history));
}

inline void stage_vanilla(const StageContext& c) {
  TrainConfig tc = c.cfg.train_for(c.seed);
  ClassifierResult r = train_vanilla(init_blackbox(c.data.train, c.seed), c.data.train, &c.data.val, tc);
  fs::path dir = seed_dir(c.run, c.seed);
  fs::create_directories(dir);
  save_checkpoint((dir / "vanilla.ckpt").string(), r.model);
  write_text(dir / "history_vanilla.csv", history_csv(r.history));
}

inline ModelParams load_selector(const fs::path& dir) {
  fs::path p = dir / "selector.ckpt";
  if (!fs::exists(p)) throw IoError("missing " + p.string() + " (run train-explainer first)");
  return load_checkpoint(p.string());
}

inline void stage_retrain(const StageContext& c) {
  fs::path dir = seed_dir(c.run, c.seed);
  ModelParams selector = load_selector(dir);
  ClassifierResult r = retrain_blackbox(init_blackbox(c.data.train, c.seed), c.data.train, &c.data.val, selector,
                                        c.cfg.ib, c.cfg.train_for(c.seed));
  save_checkpoint((dir / "xcr.ckpt").string(), r.model);
  write_text(dir / "history_xcr.csv", history_csv(r.history));
}

inline std::vector<CorruptedSet> corruption_suite(const StageContext& c) {
  return build_corruption_suite(c.data.test, c.cfg.eval.corruptions, c.cfg.eval.severities,
                                RngStream(c.seed).split("corruptions").next_u64());
}

inline void stage_corrupt(const StageContext& c) {
  fs::path dir = seed_dir(c.run, c.seed) / "corrupted";
  fs::create_directories(dir);
  for (const auto& s : corruption_suite(c)) save_dataset((dir / s.file_name()).string(), s.data);
}

/// Rows for one classifier: clean test (calibration plus explanation metrics)
/// and each corrupted set, unscaled and, when enabled, temperature-scaled.
inline std::vector<MetricsReport> evaluate_model(const StageContext& c, const std::string& variant,
                                                 const ModelParams& model, const ModelParams* selector,
                                                 const std::vector<CorruptedSet>& suite) {
  const auto& ev = c.cfg.eval;
  std::vector<double> temps{1.0};
  if (ev.apply_temperature) temps.push_back(fit_temperature(forward(model, c.data.val.images), c.data.val.labels));

  const Tensor& x = c.data.test.images;
  Tensor clean_logits = forward(model, x);
  Tensor tx, logp;
  Tensor expl_logits;
  if (selector) {
    logp = selector_logits(*selector, x, c.cfg.ib.patch_size);
    tx = explain(*selector, x, c.cfg.ib);
    expl_logits = forward(model, tx);
  }
  std::vector<Tensor> corrupted_logits;
  for (const auto& s : suite) corrupted_logits.push_back(forward(model, s.data.images));

  std::vector<MetricsReport> rows;
  for (std::size_t ti = 0; ti < temps.size(); ++ti) {
    const double t = temps[ti];
    const bool scaled = ti == 1;
    auto probs = [&](const Tensor& logits) { return softmax(scale_logits(logits, t)); };

    MetricsReport clean;
    clean.key = {variant, "test", "none", 0, c.seed, scaled};
    clean.temperature = t;
    fill_calibration(clean, {probs(clean_logits), c.data.test.labels}, ev.ece_bins);
    if (selector && c.data.test.size()) {
      Classifier f = [&](const Tensor& in) { return probs(forward(model, in)); };
      PredictedClass base = predicted_class(probs(clean_logits));
      std::vector<double> e = probs_of(probs(expl_logits), base.cls);
      clean.sufficiency = sufficiency(f, x, logp, ev.sufficiency_s, PatchGrid::for_images(x, c.cfg.ib.patch_size));
      clean.avg_drop = average_drop(base.prob, e);
      clean.avg_increase = average_increase(base.prob, e);
      auto a = argmax_rows(clean_logits), b = argmax_rows(expl_logits);
      std::size_t same = 0;
      for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
      clean.fidelity = static_cast<double>(same) / static_cast<double>(a.size());
    }
    clean.validate();
    rows.push_back(clean);

    for (std::size_t si = 0; si < suite.size(); ++si) {
      MetricsReport r;
      r.key = {variant, "test", corruption_name(suite[si].kind), suite[si].severity, c.seed, scaled};
      r.temperature = t;
      fill_calibration(r, {probs(corrupted_logits[si]), suite[si].data.labels}, ev.ece_bins);
      r.validate();
      rows.push_back(r);
    }
  }
  return rows;
}

/// Evaluates whichever of vanilla.ckpt / xcr.ckpt exist in the seed directory.
/// Corrupted sets are read from corrupted/ when present, else rebuilt.
inline std::vector<MetricsReport> stage_evaluate(const StageContext& c) {
  fs::path dir = seed_dir(c.run, c.seed);
  std::vector<CorruptedSet> suite;
  if (fs::exists(dir / "corrupted")) {
    for (auto k : c.cfg.eval.corruptions)
      for (int s : c.cfg.eval.severities) {
        CorruptedSet cs{k, s, {}};
        cs.data = load_dataset((dir / "corrupted" / cs.file_name()).string());
        suite.push_back(std::move(cs));
      }
  } else {
    suite = corruption_suite(c);
  }
  std::optional<ModelParams> selector;
  if (fs::exists(dir / "selector.ckpt")) selector = load_selector(dir);
  std::vector<MetricsReport> rows;
  bool any = false;
  for (const char* variant : {"vanilla", "xcr"}) {
    fs::path p = dir / (std::string(variant) + ".ckpt");
    if (!fs::exists(p)) continue;
    any = true;
    auto r = evaluate_model(c, variant, load_checkpoint(p.string()), selector ? &*selector : nullptr, suite);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (!any) throw IoError("no vanilla.ckpt or xcr.ckpt in " + dir.string());
  return rows;
}

// ---- runs ---------------------------------------------------------------------------------------

enum class Stage { TrainExplainer, Vanilla, Retrain, Corrupt, Evaluate };

inline void write_metrics(const fs::path& run, const std::vector<std::vector<MetricsReport>>& per_seed) {
  std::vector<MetricsReport> rows;
  for (const auto& r : per_seed) rows.insert(rows.end(), r.begin(), r.end());
  std::ostringstream os;
  write_report_csv(os, rows);
  write_text(run / "metrics.csv", os.str());
}

/// Runs the given stages for every seed (seeds in parallel, up to
/// XCR_THREADS) and writes the manifest. Evaluate writes metrics.csv.
inline void run_stages(const ExperimentConfig& cfg, const fs::path& run, const std::vector<Stage>& stages) {
  fs::create_directories(run);
  write_text(run / "manifest.txt", manifest_text(cfg));
  std::vector<std::vector<MetricsReport>> rows(cfg.seeds.size());
  const bool evaluates = std::find(stages.begin(), stages.end(), Stage::Evaluate) != stages.end();
  run_jobs(cfg.seeds.size(), [&](std::size_t i) {
    StageContext c{cfg, run, cfg.seeds[i], load_splits(cfg, cfg.seeds[i])};
    for (Stage s : stages) switch (s) {
        case Stage::TrainExplainer: stage_train_explainer(c); break;
        case Stage::Vanilla: stage_vanilla(c); break;
        case Stage::Retrain: stage_retrain(c); break;
        case Stage::Corrupt: stage_corrupt(c); break;
        case Stage::Evaluate: rows[i] = stage_evaluate(c); break;
      }
  });
  if (evaluates) write_metrics(run, rows);
}

/// Explainer, vanilla twin, counterfactual retraining and evaluation.
inline void run_experiment(const ExperimentConfig& cfg, const fs::path& run) {
  run_stages(cfg, run, {Stage::TrainExplainer, Stage::Vanilla, Stage::Retrain, Stage::Evaluate});
}

// ---- grid ---------------------------------------------------------------------------------------

struct GridPoint {
  std::string name;  // e.g. "ib.beta=0.1_ib.k=16"
  ConfigEntries overrides;
};

/// Cartesian product over "key=v1,v2,..." axes; keys vary in sorted order.
inline std::vector<GridPoint> expand_grid(const std::vector<std::string>& params) {
  std::map<std::string, std::vector<std::string>> axes;
  for (const auto& p : params) {
    auto eq = p.find('=');
    std::string key = eq == std::string::npos ? "" : detail::trim(p.substr(0, eq));
    if (key.empty()) throw ConfigError("--param must look like key=v1,v2,... got '" + p + "'");
    auto values = detail::split_list(p.substr(eq + 1));
    if (values.empty()) throw ConfigError("--param " + key + " has no values");
    if (axes.count(key)) throw ConfigError("--param " + key + " given twice");
    axes[key] = values;
  }
  std::vector<GridPoint> points{{"", {}}};
  for (const auto& [key, values] : axes) {
    std::vector<GridPoint> next;
    for (const auto& pt : points)
      for (const auto& v : values) {
        GridPoint g = pt;
        g.name += (g.name.empty() ? "" : "_") + key + "=" + v;
        g.overrides[key] = v;
        next.push_back(std::move(g));
      }
    points = std::move(next);
  }
  return points;
}

/// One full experiment per grid point, each in its own sub-directory. Every
/// point is validated before any training starts.
inline std::vector<fs::path> run_grid(const std::string& base_text, const std::vector<std::string>& params,
                                      const fs::path& out) {
  auto points = expand_grid(params);
  std::vector<ExperimentConfig> cfgs;
  std::string errors;
  for (const auto& p : points) {
    try {
      cfgs.push_back(parse_config(base_text, p.overrides));
    } catch (const ConfigError& e) {
      errors += "\n[" + p.name + "] " + e.what();
    }
  }
  if (!errors.empty()) throw ConfigError("grid has invalid points:" + errors);
  std::vector<fs::path> dirs;
  for (const auto& p : points) dirs.push_back(out / (p.name.empty() ? "base" : p.name));
  // Sub-runs are the parallel unit; each keeps its seeds sequential.
  run_jobs(points.size(), [&](std::size_t i) {
    ExperimentConfig c = cfgs[i];
    fs::create_directories(dirs[i]);
    write_text(dirs[i] / "manifest.txt", manifest_text(c));
    std::vector<std::vector<MetricsReport>> rows;
    for (auto seed : c.seeds) {
      StageContext ctx{c, dirs[i], seed, load_splits(c, seed)};
      stage_train_explainer(ctx);
      stage_vanilla(ctx);
      stage_retrain(ctx);
      rows.push_back(stage_evaluate(ctx));
    }
    write_metrics(dirs[i], rows);
  });
  return dirs;
}

// ---- report -------------------------------------------------------------------------------------

struct LoadedRun {
  fs::path dir;
  std::string name;
  ExperimentConfig cfg;
  std::vector<MetricsReport> rows;
  std::map<std::string, std::vector<History>> histories;  // variant -> one per seed
};

inline LoadedRun load_run(const fs::path& dir) {
  LoadedRun r;
  r.dir = dir;
  r.name = dir.filename().string();
  if (r.name.empty()) r.name = dir.parent_path().filename().string();
  r.cfg = parse_config(read_file((dir / "manifest.txt").string()));
  std::istringstream is(read_file((dir / "metrics.csv").string()));
  r.rows = read_report_csv(is);
  for (auto seed : r.cfg.seeds)
    for (const char* v : {"explainer", "vanilla", "xcr"}) {
      fs::path p = seed_dir(dir, seed) / ("history_" + std::string(v) + ".csv");
      if (fs::exists(p)) r.histories[v].push_back(parse_history_csv(read_file(p.string())));
    }
  return r;
}

struct ReportResult {
  std::vector<fs::path> files;
  std::vector<std::string> warnings;
};

namespace detail {

/// Mean of the present values, NaN if none.
struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(const std::optional<double>& v) {
    if (v) sum += *v, ++n;
  }
  void add(double v) {
    if (!std::isnan(v)) sum += v, ++n;
  }
  double value() const { return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); }
};

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Series {
  std::string label;
  std::vector<double> y;  // one point per epoch; NaN gaps are skipped
};

inline std::string line_chart(const std::string& title, const std::string& ylabel, const std::vector<Series>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double W = 640, H = 400, left = 60, right = 180, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  std::size_t xmax = 1;
  for (const auto& s : series) {
    xmax = std::max(xmax, s.y.size());
    for (double v : s.y)
      if (!std::isnan(v)) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  }
  if (!std::isfinite(ymin)) ymin = 0.0, ymax = 1.0;
  if (ymax - ymin < 1e-12) ymin -= 0.5, ymax += 0.5;
  const double xspan = xmax > 1 ? static_cast<double>(xmax - 1) : 1.0;
  auto px = [&](double x) { return left + pw * x / xspan; };
  auto py = [&](double y) { return top + ph * (1.0 - (y - ymin) / (ymax - ymin)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << svg_num(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double v = ymin + (ymax - ymin) * i / 4.0;
    os << "<line x1=\"" << left - 4 << "\" y1=\"" << svg_num(py(v)) << "\" x2=\"" << left << "\" y2=\"" << svg_num(py(v))
       << "\" stroke=\"black\"/><text x=\"" << left - 6 << "\" y=\"" << svg_num(py(v) + 4) << "\" text-anchor=\"end\">"
       << svg_num(v) << "</text>\n";
  }
  const std::size_t step = std::max<std::size_t>(1, xmax / 10);
  for (std::size_t e = 0; e < xmax; e += step)
    os << "<text x=\"" << svg_num(px(static_cast<double>(e))) << "\" y=\"" << top + ph + 16
       << "\" text-anchor=\"middle\">" << e << "</text>\n";
  os << "<text x=\"" << svg_num(left + pw / 2) << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
  os << "<text x=\"16\" y=\"" << svg_num(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << svg_num(top + ph / 2) << ")\">" << ylabel << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* col = colors[i % std::size(colors)];
    const bool dashed = series[i].label.find("val") != std::string::npos;
    std::string pts;
    for (std::size_t e = 0; e < series[i].y.size(); ++e)
      if (!std::isnan(series[i].y[e]))
        pts += svg_num(px(static_cast<double>(e))) + "," + svg_num(py(series[i].y[e])) + " ";
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\"" << (dashed ? " stroke-dasharray=\"5,3\"" : "")
       << " points=\"" << pts << "\"/>\n";
    double ly = top + 10 + 16.0 * static_cast<double>(i);
    os << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << svg_num(ly) << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << svg_num(ly)
       << "\" stroke=\"" << col << "\" stroke-width=\"1.5\"" << (dashed ? " stroke-dasharray=\"5,3\"" : "") << "/>\n";
    os << "<text x=\"" << left + pw + 36 << "\" y=\"" << svg_num(ly + 4) << "\">" << series[i].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Seed-mean of one History field per epoch.
inline std::vector<double> mean_curve(const std::vector<History>& hs, double EpochRecord::*field) {
  std::size_t n = 0;
  for (const auto& h : hs) n = std::max(n, h.epochs.size());
  std::vector<double> out;
  for (std::size_t e = 0; e < n; ++e) {
    Mean m;
    for (const auto& h : hs)
      if (e < h.epochs.size()) m.add(h.epochs[e].*field);
    out.push_back(m.value());
  }
  return out;
}

}  // namespace detail

/// Seed-averaged tables and curves for a set of run directories.
/// Missing or unreadable runs are skipped with a warning; if none remain the
/// call fails before writing anything.
inline ReportResult emit_report(const std::vector<fs::path>& runs, const fs::path& out) {
  ReportResult res;
  std::vector<LoadedRun> loaded;
  for (const auto& dir : runs) {
    try {
      loaded.push_back(load_run(dir));
    } catch (const std::exception& e) {
      res.warnings.push_back("skipping run " + dir.string() + ": " + e.what());
    }
  }
  if (loaded.empty()) {
    std::string msg = "report: no readable runs among " + std::to_string(runs.size()) + " given";
    for (const auto& w : res.warnings) msg += "\n  " + w;
    throw IoError(msg);
  }
  // Aggregation must not depend on the order runs were listed in.
  std::sort(loaded.begin(), loaded.end(), [](const LoadedRun& a, const LoadedRun& b) {
    return a.name != b.name ? a.name < b.name : a.dir < b.dir;
  });

  using detail::Mean;
  const std::size_t nm = MetricsReport::metric_count();
  auto fmt = [](double v) { return format_double(v); };

  // Per-context means over seeds.
  std::string summary = "run,k,beta,mode,variant,split,corruption,severity,temperature_scaled,ece_bins,seeds";
  for (const char* m : MetricsReport::kMetricNames) summary += std::string(",") + m;
  summary += "\n";
  // Corrupted-data means (all kinds and severities), per variant and scaling.
  std::string calib = "run,k,beta,mode,variant,temperature_scaled,seeds,clean_accuracy,corrupted_accuracy,corrupted_ece,corrupted_nll,corrupted_brier\n";
  // Explanation metrics on clean, unscaled rows.
  std::string expl = "run,k,beta,mode,variant,seeds,sufficiency,avg_drop,avg_increase,fidelity\n";

  for (const auto& r : loaded) {
    const std::string prefix = r.name + "," + std::to_string(r.cfg.ib.k) + "," + format_double(r.cfg.ib.beta) + "," +
                               mode_name(r.cfg.ib.mode);
    struct Group {
      std::set<std::uint64_t> seeds;
      std::vector<Mean> m;
      std::size_t bins = 0;
    };
    std::vector<std::tuple<std::string, std::string, std::string, int, bool>> order;
    std::map<std::tuple<std::string, std::string, std::string, int, bool>, Group> groups;
    for (const auto& row : r.rows) {
      auto key = std::make_tuple(row.key.variant, row.key.split, row.key.corruption, row.key.severity,
                                 row.key.temperature_scaled);
      auto [it, fresh] = groups.try_emplace(key);
      if (fresh) order.push_back(key), it->second.m.resize(nm);
      it->second.seeds.insert(row.key.seed);
      it->second.bins = row.ece_bins;
      for (std::size_t i = 0; i < nm; ++i) it->second.m[i].add(*row.metric(i));
    }
    std::sort(order.begin(), order.end());
    for (const auto& key : order) {
      const Group& g = groups[key];
      summary += prefix + "," + std::get<0>(key) + "," + std::get<1>(key) + "," + std::get<2>(key) + "," +
                 std::to_string(std::get<3>(key)) + "," + (std::get<4>(key) ? "1" : "0") + "," + std::to_string(g.bins) +
                 "," + std::to_string(g.seeds.size());
      for (const auto& m : g.m) summary += "," + fmt(m.value());
      summary += "\n";
    }

    std::set<std::pair<std::string, bool>> variants;
    for (const auto& row : r.rows) variants.insert({row.key.variant, row.key.temperature_scaled});
    for (const auto& [variant, scaled] : variants) {
      // Seed-mean of per-seed means, so every seed weighs the same.
      std::map<std::uint64_t, std::array<Mean, 5>> per_seed;
      for (const auto& row : r.rows) {
        if (row.key.variant != variant || row.key.temperature_scaled != scaled) continue;
        auto& s = per_seed[row.key.seed];
        if (row.key.corruption == "none") {
          s[0].add(row.accuracy);
        } else {
          s[1].add(row.accuracy), s[2].add(row.ece), s[3].add(row.nll), s[4].add(row.brier);
        }
      }
      std::array<Mean, 5> total;
      for (const auto& [seed, s] : per_seed)
        for (std::size_t i = 0; i < 5; ++i) total[i].add(s[i].value());
      calib += prefix + "," + variant + "," + (scaled ? "1" : "0") + "," + std::to_string(per_seed.size());
      for (const auto& m : total) calib += "," + fmt(m.value());
      calib += "\n";
      if (!scaled) {
        std::array<Mean, 4> e;
        std::size_t seeds = 0;
        for (const auto& row : r.rows)
          if (row.key.variant == variant && !row.key.temperature_scaled && row.key.corruption == "none") {
            ++seeds;
            e[0].add(row.sufficiency), e[1].add(row.avg_drop), e[2].add(row.avg_increase), e[3].add(row.fidelity);
          }
        expl += prefix + "," + variant + "," + std::to_string(seeds);
        for (const auto& m : e) expl += "," + fmt(m.value());
        expl += "\n";
      }
    }
  }

  // Curves: one series per (mode, variant) and train/val.
  std::vector<detail::Series> loss, acc;
  for (const auto& r : loaded) {
    const std::string tag = (loaded.size() > 1 ? r.name + " " : std::string()) + mode_name(r.cfg.ib.mode);
    for (const auto& [variant, hs] : r.histories) {
      const std::string base = tag + " " + variant;
      loss.push_back({base + " train", detail::mean_curve(hs, &EpochRecord::train_loss)});
      loss.push_back({base + " val", detail::mean_curve(hs, &EpochRecord::val_loss)});
      if (variant == "explainer") {
        acc.push_back({base + " train", detail::mean_curve(hs, &EpochRecord::train_acc_expl)});
        acc.push_back({base + " val", detail::mean_curve(hs, &EpochRecord::val_acc_expl)});
      } else {
        acc.push_back({base + " train", detail::mean_curve(hs, &EpochRecord::train_acc)});
        acc.push_back({base + " val", detail::mean_curve(hs, &EpochRecord::val_acc)});
      }
    }
  }

  fs::create_directories(out);
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out / name, text);
    res.files.push_back(out / name);
  };
  emit("summary.csv", summary);
  emit("corrupted.csv", calib);
  emit("explanation.csv", expl);
  emit("loss_curves.svg", detail::line_chart("Training and validation loss", "loss", loss));
  emit("accuracy_curves.svg", detail::line_chart("Training and validation accuracy", "accuracy", acc));
  return res;
}

}  // namespace xcr
