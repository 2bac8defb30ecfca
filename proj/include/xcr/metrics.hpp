#pragma once

// Calibration metrics (accuracy, ECE, NLL, Brier), explanation metrics
// (sufficiency, average drop/increase, fidelity) and the report CSV.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "xcr/autodiff.hpp"
#include "xcr/explainer.hpp"
#include "xcr/format.hpp"

namespace xcr {

/// Maps a batch of images to class probabilities [B, classes].
using Classifier = std::function<Tensor(const Tensor&)>;

struct PredictionSet {
  Tensor probs;  // [N, classes], rows sum to 1
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return probs.dim(1); }

  static PredictionSet from_logits(const Tensor& logits, std::vector<int> labels) {
    return {softmax(logits), std::move(labels)};
  }

  void validate() const {
    if (probs.rank() != 2 || probs.dim(0) != labels.size())
      throw ContractError("PredictionSet: probs " + shape_str(probs.shape()) + " vs " + std::to_string(labels.size()) +
                          " labels");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes())
        throw ContractError("PredictionSet: label out of range at row " + std::to_string(i));
      double s = 0.0;
      for (std::size_t c = 0; c < classes(); ++c) s += probs[i * classes() + c];
      if (std::fabs(s - 1.0) > 1e-9) throw ContractError("PredictionSet: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
};

/// argmax with ties to the lowest index.
inline std::size_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& t) {
  std::vector<std::size_t> out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax_row(t.data() + i * t.dim(1), t.dim(1));
  return out;
}

inline double accuracy(const PredictionSet& p) {
  if (p.size() == 0) throw ContractError("accuracy: empty prediction set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    hits += argmax_row(p.probs.data() + i * p.classes(), p.classes()) == static_cast<std::size_t>(p.labels[i]);
  return static_cast<double>(hits) / static_cast<double>(p.size());
}

inline constexpr std::size_t kDefaultEceBins = 15;

/// Bin of a confidence among `bins` equal-width right-closed bins on (0, 1];
/// a confidence of exactly 0 goes to the first bin.
inline std::size_t confidence_bin(double conf, std::size_t bins) {
  if (conf <= 0.0) return 0;
  auto b = static_cast<std::size_t>(std::ceil(conf * static_cast<double>(bins)));
  b = std::clamp<std::size_t>(b, 1, bins) - 1;
  // ceil() can overshoot by one when conf*bins rounds up past an edge.
  if (b > 0 && conf <= static_cast<double>(b) / static_cast<double>(bins)) --b;
  if (b + 1 < bins && conf > static_cast<double>(b + 1) / static_cast<double>(bins)) ++b;
  return b;
}

inline double ece(const PredictionSet& p, std::size_t bins = kDefaultEceBins) {
  if (bins == 0) throw ContractError("ece: bins must be >= 1");
  if (p.size() == 0) throw ContractError("ece: empty prediction set");
  std::vector<double> conf(bins, 0.0), hit(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double* row = p.probs.data() + i * p.classes();
    std::size_t pred = argmax_row(row, p.classes());
    std::size_t b = confidence_bin(row[pred], bins);
    conf[b] += row[pred];
    hit[b] += pred == static_cast<std::size_t>(p.labels[i]) ? 1.0 : 0.0;
    ++count[b];
  }
  double total = 0.0;
  const auto n = static_cast<double>(p.size());
  for (std::size_t b = 0; b < bins; ++b) {
    if (!count[b]) continue;
    const auto nb = static_cast<double>(count[b]);
    total += (nb / n) * std::fabs(hit[b] / nb - conf[b] / nb);
  }
  return total;
}

inline constexpr double kProbFloor = 1e-12;

inline double nll(const PredictionSet& p) {
  if (p.size() == 0) throw ContractError("nll: empty prediction set");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    s -= std::log(std::max(kProbFloor, p.probs[i * p.classes() + static_cast<std::size_t>(p.labels[i])]));
  return s / static_cast<double>(p.size());
}

/// Multiclass Brier score, summed over classes.
inline double brier(const PredictionSet& p) {
  if (p.size() == 0) throw ContractError("brier: empty prediction set");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t c = 0; c < p.classes(); ++c) {
      double target = static_cast<std::size_t>(p.labels[i]) == c ? 1.0 : 0.0;
      double diff = p.probs[i * p.classes() + c] - target;
      s += diff * diff;
    }
  return s / static_cast<double>(p.size());
}

// ---- explanation metrics --------------------------------------------------------------

/// Probability assigned to each row's own argmax class and the index used.
struct PredictedClass {
  std::vector<std::size_t> cls;
  std::vector<double> prob;
};

inline PredictedClass predicted_class(const Tensor& probs) {
  PredictedClass out{argmax_rows(probs), {}};
  for (std::size_t i = 0; i < out.cls.size(); ++i) out.prob.push_back(probs[i * probs.dim(1) + out.cls[i]]);
  return out;
}

inline std::vector<double> probs_of(const Tensor& probs, const std::vector<std::size_t>& cls) {
  std::vector<double> out;
  for (std::size_t i = 0; i < cls.size(); ++i) out.push_back(probs[i * probs.dim(1) + cls[i]]);
  return out;
}

/// Number of patches kept for a retained proportion s.
inline std::size_t retained_patches(double s, std::size_t d) {
  if (!(s > 0.0 && s <= 1.0)) throw ContractError("sufficiency: s must be in (0, 1]");
  // Guard against s*d landing a hair above an integer.
  double kept = std::ceil(s * static_cast<double>(d) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(kept), 1, d);
}

/// Mean over the batch of f(x)_yhat - f(T_s(x, z))_yhat, where T_s keeps the
/// ceil(s*d) highest-scored patches of each row of `scores` [B, d].
inline double sufficiency(const Classifier& f, const Tensor& x, const Tensor& scores, double s, const PatchGrid& grid) {
  if (x.dim(0) == 0) throw ContractError("sufficiency: empty batch");
  std::size_t keep = retained_patches(s, grid.d());
  PredictedClass base = predicted_class(f(x));
  Tensor tx = build_explanation(x, hard_topk_rows(scores, keep), grid);
  std::vector<double> after = probs_of(f(tx), base.cls);
  double total = 0.0;
  for (std::size_t i = 0; i < after.size(); ++i) total += base.prob[i] - after[i];
  return total / static_cast<double>(after.size());
}

/// (1/N) sum max(0, Y - E) / Y.
inline double average_drop(const std::vector<double>& y, const std::vector<double>& e) {
  if (y.size() != e.size() || y.empty()) throw ContractError("average_drop: need equal, non-empty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] > 0.0)) throw ContractError("average_drop: Y[" + std::to_string(i) + "] must be positive");
    s += std::max(0.0, y[i] - e[i]) / y[i];
  }
  return s / static_cast<double>(y.size());
}

/// Fraction of instances with E > Y strictly.
inline double average_increase(const std::vector<double>& y, const std::vector<double>& e) {
  if (y.size() != e.size() || y.empty()) throw ContractError("average_increase: need equal, non-empty inputs");
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) n += y[i] < e[i];
  return static_cast<double>(n) / static_cast<double>(y.size());
}

/// Fraction of instances whose argmax on the explanation matches the argmax on the original.
inline double fidelity(const Classifier& f, const Tensor& x, const Tensor& tx) {
  if (x.shape() != tx.shape() || x.dim(0) == 0) throw ContractError("fidelity: batches must be aligned and non-empty");
  auto a = argmax_rows(f(x)), b = argmax_rows(f(tx));
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

// ---- report rows ------------------------------------------------------------------------

struct ContextKey {
  std::string variant;     // e.g. vanilla, xcr
  std::string split;       // train / val / test
  std::string corruption;  // "none" for clean data
  int severity = 0;
  std::uint64_t seed = 0;
  bool temperature_scaled = false;

  friend bool operator==(const ContextKey&, const ContextKey&) = default;
};

struct MetricsReport {
  ContextKey key;
  std::optional<double> temperature, accuracy, ece, nll, brier, sufficiency, avg_drop, avg_increase, fidelity;
  std::size_t ece_bins = kDefaultEceBins;

  static constexpr const char* kMetricNames[] = {"temperature", "accuracy", "ece", "nll", "brier",
                                                 "sufficiency", "avg_drop", "avg_increase", "fidelity"};

  std::optional<double>* metric(std::size_t i) {
    std::optional<double>* slots[] = {&temperature, &accuracy, &ece, &nll, &brier, &sufficiency, &avg_drop, &avg_increase, &fidelity};
    return slots[i];
  }
  const std::optional<double>* metric(std::size_t i) const { return const_cast<MetricsReport*>(this)->metric(i); }
  static constexpr std::size_t metric_count() { return std::size(kMetricNames); }

  void validate() const {
    for (std::size_t i = 0; i < metric_count(); ++i)
      if (auto* m = metric(i); m->has_value() && !std::isfinite(**m))
        throw ContractError(std::string("MetricsReport: non-finite ") + kMetricNames[i]);
    if (ece && (*ece < 0.0 || *ece > 1.0)) throw ContractError("MetricsReport: ece outside [0,1]");
    if (accuracy && (*accuracy < 0.0 || *accuracy > 1.0)) throw ContractError("MetricsReport: accuracy outside [0,1]");
  }
};

/// Accuracy, ECE, NLL and Brier for one prediction set.
inline void fill_calibration(MetricsReport& r, const PredictionSet& p, std::size_t bins) {
  r.accuracy = accuracy(p);
  r.ece = ece(p, bins);
  r.nll = nll(p);
  r.brier = brier(p);
  r.ece_bins = bins;
}

inline const std::vector<std::string>& report_header() {
  static const std::vector<std::string> h = [] {
    std::vector<std::string> v{"variant", "split", "corruption", "severity", "seed", "temperature_scaled", "ece_bins"};
    for (const char* m : MetricsReport::kMetricNames) v.push_back(m);
    return v;
  }();
  return h;
}

inline std::string join_csv(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += fields[i];
  }
  return out;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string opt_str(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline void write_report_csv(std::ostream& os, const std::vector<MetricsReport>& rows) {
  os << join_csv(report_header()) << '\n';
  for (const auto& r : rows) {
    std::vector<std::string> f{r.key.variant,
                               r.key.split,
                               r.key.corruption,
                               std::to_string(r.key.severity),
                               std::to_string(r.key.seed),
                               r.key.temperature_scaled ? "1" : "0",
                               std::to_string(r.ece_bins)};
    for (std::size_t i = 0; i < MetricsReport::metric_count(); ++i) f.push_back(opt_str(*r.metric(i)));
    os << join_csv(f) << '\n';
  }
}

inline std::vector<MetricsReport> read_report_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || split_csv(line) != report_header())
    throw ContractError("report csv: missing or unexpected header");
  std::vector<MetricsReport> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != report_header().size()) throw ContractError("report csv: bad row '" + line + "'");
    MetricsReport r;
    r.key = {f[0], f[1], f[2], std::stoi(f[3]), std::stoull(f[4]), f[5] == "1"};
    r.ece_bins = std::stoull(f[6]);
    for (std::size_t i = 0; i < MetricsReport::metric_count(); ++i)
      if (!f[7 + i].empty()) *r.metric(i) = std::stod(f[7 + i]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace xcr
