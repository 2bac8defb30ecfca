#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "xcr/autodiff.hpp"
#include "xcr/data_io.hpp"
#include "xcr/explainer.hpp"
#include "xcr/nn.hpp"
#include "xcr/rng.hpp"

namespace xcr {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  double counterfactual_weight = 0.5;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
    if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(counterfactual_weight >= 0.0 && counterfactual_weight <= 1.0))
      throw ConfigError("train.counterfactual_weight must be in [0,1]");
  }

  /// Step decay: x0.2 at 50% and again at 75% of the epochs.
  double rate_at(std::size_t epoch) const {
    double lr = learning_rate;
    if (epoch >= epochs / 2 && epochs >= 2) lr *= 0.2;
    if (epoch >= (3 * epochs) / 4 && epochs >= 4) lr *= 0.2;
    return lr;
  }
};

/// Absent values are NaN.
struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double train_acc = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double train_acc_expl = std::numeric_limits<double>::quiet_NaN();
  double val_acc_expl = std::numeric_limits<double>::quiet_NaN();
};

struct History {
  std::vector<EpochRecord> epochs;
};

// ---- losses ------------------------------------------------------------------------------

/// sum_j p_j log(p_j d), with 0 log 0 = 0.
inline double kl_to_uniform(const double* p, std::size_t d) {
  double total = 0.0, kl = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    if (!(p[j] >= 0.0)) throw ContractError("kl_to_uniform: negative probability");
    total += p[j];
    if (p[j] > 0.0) kl += p[j] * std::log(p[j] * static_cast<double>(d));
  }
  if (std::fabs(total - 1.0) > 1e-6) throw ContractError("kl_to_uniform: probabilities sum to " + std::to_string(total));
  return std::max(0.0, kl);
}

inline double kl_to_uniform(const Tensor& p) { return kl_to_uniform(p.data(), p.size()); }

/// Row-wise KL to uniform from log-probabilities [B, d]; returns [B].
inline Var kl_to_uniform_rows(Var logp) {
  Tape& t = *logp.tape;
  const double log_d = std::log(static_cast<double>(logp.shape().back()));
  return sum(mul(exp(logp), add(logp, t.constant(Tensor::scalar(log_d)))), 1);
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0," + std::to_string(classes) + ")");
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// Mean cross-entropy of logits [B, classes] against integer labels.
inline Var cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  if (logits.shape().size() != 2 || logits.shape()[0] != labels.size())
    throw ContractError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  Var picked = sum(mul(log_softmax(logits), t.constant(one_hot(labels, logits.shape()[1]))), 1);
  return sub(t.constant(Tensor::scalar(0.0)), mean(picked));
}

inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  Tensor oh = one_hot(labels, logits.dim(1));
  Tensor lp = log_softmax(logits);
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) s += oh[i] * lp[i];
  return -s / static_cast<double>(labels.size());
}

/// Mean over instances and draws of CE(q, y) + beta * KL(p || uniform).
/// `draw_logits` holds one [B, classes] tensor per Gumbel draw.
inline Var ib_loss(const std::vector<Var>& draw_logits, const std::vector<int>& labels, Var logp, double beta) {
  if (draw_logits.empty()) throw ContractError("ib_loss: no draws");
  Tape& t = *logp.tape;
  Var ce = cross_entropy(draw_logits[0], labels);
  for (std::size_t l = 1; l < draw_logits.size(); ++l) ce = add(ce, cross_entropy(draw_logits[l], labels));
  ce = mul(ce, t.constant(Tensor::scalar(1.0 / static_cast<double>(draw_logits.size()))));
  if (beta == 0.0) return ce;
  return add(ce, mul(mean(kl_to_uniform_rows(logp)), t.constant(Tensor::scalar(beta))));
}

/// Single-draw evaluation from probabilities.
inline double ib_loss(const Tensor& q_logits, const std::vector<int>& labels, const Tensor& p_patch, double beta) {
  if (p_patch.rank() != 2 || p_patch.dim(0) != labels.size()) throw ContractError("ib_loss: p_patch must be [B, d]");
  double kl = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) kl += kl_to_uniform(p_patch.data() + b * p_patch.dim(1), p_patch.dim(1));
  return cross_entropy(q_logits, labels) + beta * kl / static_cast<double>(labels.size());
}

// ---- optimizer --------------------------------------------------------------------------

/// SGD with heavy-ball momentum and L2 decay on weights (not biases).
class Sgd {
 public:
  Sgd(const ModelParams& p, double momentum, double weight_decay) : momentum_(momentum), decay_(weight_decay) {
    for (const auto& t : p.tensors) velocity_.emplace_back(t.shape());
  }

  void step(ModelParams& p, const Gradients& g, const std::vector<Var>& vars, double lr) {
    for (std::size_t i = 0; i < p.count(); ++i) {
      Tensor& w = p.tensors[i];
      const Tensor& gw = g[vars[i]];
      Tensor& v = velocity_[i];
      const double wd = w.rank() > 1 ? decay_ : 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + gw[j] + wd * w[j];
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  double momentum_, decay_;
  std::vector<Tensor> velocity_;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  RngStream(seed).split("order").split(epoch).shuffle(idx);
  return idx;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels[i]);
  return out;
}

inline std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels, std::size_t offset = 0) {
  const std::size_t k = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = logits.data() + (offset + i) * k;
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (row[c] > row[best]) best = c;
    hits += static_cast<int>(best) == labels[i];
  }
  return hits;
}

inline void check_finite(double loss, std::size_t epoch, std::size_t batch, const char* what) {
  if (!std::isfinite(loss))
    throw TrainingError(std::string(what) + ": loss diverged (" + std::to_string(loss) + ") at epoch " +
                        std::to_string(epoch) + ", batch " + std::to_string(batch));
}

inline double accuracy_of(const Tensor& logits, const std::vector<int>& labels) {
  return labels.empty() ? std::numeric_limits<double>::quiet_NaN()
                        : static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size());
}

}  // namespace detail

// ---- explainer -----------------------------------------------------------------------------

struct ExplainerModel {
  ModelParams selector;
  ModelParams approximator;
  History history;
};

/// Gumbel noise for one batch: num_samples * k tensors of shape [B, d], draw-major.
inline std::vector<Tensor> gumbel_batch(const IBConfig& ib, std::size_t batch, std::size_t d, RngStream rng) {
  std::vector<Tensor> g;
  g.reserve(ib.num_samples * ib.k);
  for (std::size_t i = 0; i < ib.num_samples * ib.k; ++i) g.push_back(sample_gumbel({batch, d}, rng));
  return g;
}

/// Records the relaxed objective for one batch with the given frozen noise.
inline Var explainer_objective(const ModelParams& selector, const std::vector<Var>& sel_vars,
                               const ModelParams& approximator, const std::vector<Var>& app_vars, Var x,
                               const std::vector<int>& labels, const IBConfig& ib, const std::vector<Tensor>& gumbel,
                               std::vector<Var>* draw_logits_out = nullptr) {
  PatchGrid grid = PatchGrid::for_images(x.value(), ib.patch_size);
  Var logp = selector_logits(selector.arch, sel_vars, x, ib.patch_size);
  std::vector<Var> draw_logits;
  for (std::size_t l = 0; l < ib.num_samples; ++l) {
    std::vector<Var> draws;
    for (std::size_t j = 0; j < ib.k; ++j) draws.push_back(concrete_weights(logp, gumbel[l * ib.k + j], ib.tau));
    Var t = apply_patch_weights(x, relaxed_khot(draws), grid);
    draw_logits.push_back(forward(approximator.arch, app_vars, t));
  }
  if (draw_logits_out) *draw_logits_out = draw_logits;
  return ib_loss(draw_logits, labels, logp, ib.beta);
}

/// Validation loss/accuracy of the approximator on plain inputs and on hard top-k explanations.
inline void evaluate_explainer(const ExplainerModel& m, const Dataset& val, const IBConfig& ib, EpochRecord& rec) {
  if (val.size() == 0) return;
  PatchGrid grid = PatchGrid::for_images(val.images, ib.patch_size);
  Tensor logp = selector_logits(m.selector, val.images, ib.patch_size);
  Tensor tx = build_explanation(val.images, hard_topk_rows(logp, ib.k), grid);
  Tensor logits_expl = forward(m.approximator, tx);
  rec.val_loss = ib_loss(logits_expl, val.labels, exp(logp), ib.beta);
  rec.val_acc_expl = detail::accuracy_of(logits_expl, val.labels);
  rec.val_acc = detail::accuracy_of(forward(m.approximator, val.images), val.labels);
}

/// Fits selector and approximator to the original labels through the relaxed top-k map.
inline ExplainerModel train_explainer(const Dataset& train, const Dataset* val, const IBConfig& ib, const TrainConfig& tc) {
  tc.validate();
  if (train.size() == 0) throw ContractError("train_explainer: empty dataset");
  PatchGrid grid = PatchGrid::for_images(train.images, ib.patch_size);
  ib.validate(grid.d());
  RngStream root(tc.seed);
  ExplainerModel m{init_params(selector_arch(grid), root.split("init-selector")),
                   init_params(Architecture::approximator(grid.channels, grid.height, grid.width, train.classes),
                               root.split("init-approximator")),
                   {}};
  Sgd sel_opt(m.selector, tc.momentum, tc.weight_decay), app_opt(m.approximator, tc.momentum, tc.weight_decay);
  RngStream noise_root = root.split("explainer-gumbel");

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = tc.rate_at(epoch);
    auto order = detail::epoch_order(train.size(), tc.seed, epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0, hits = 0, batches = 0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size, ++batches) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + tc.batch_size)));
      std::vector<int> y = detail::gather_labels(train.labels, idx);
      Tape tape;
      Var x = tape.constant(gather_rows(train.images, idx));
      auto sel_vars = bind(tape, m.selector);
      auto app_vars = bind(tape, m.approximator);
      auto g = gumbel_batch(ib, idx.size(), grid.d(), noise_root.split(epoch).split(batches));
      std::vector<Var> draw_logits;
      Var loss = explainer_objective(m.selector, sel_vars, m.approximator, app_vars, x, y, ib, g, &draw_logits);
      detail::check_finite(loss.value().item(), epoch, batches, "train_explainer");
      Gradients grads = backward(tape, loss);
      sel_opt.step(m.selector, grads, sel_vars, lr);
      app_opt.step(m.approximator, grads, app_vars, lr);
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      for (const auto& dl : draw_logits) hits += detail::count_correct(dl.value(), y);
      seen += idx.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc_expl = static_cast<double>(hits) / static_cast<double>(seen * ib.num_samples);
    if (val) evaluate_explainer(m, *val, ib, rec);
    m.history.epochs.push_back(rec);
  }
  return m;
}

// ---- counterfactual retraining -----------------------------------------------------------

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::size_t originals = 0;  // leading items that are unmodified inputs
};

/// Fresh per-visit explanation weights [B, d]: Gumbel-perturbed top-k bits,
/// or softmax of the perturbed selector scores.
inline Tensor sample_explanation_weights(const Tensor& logp, const IBConfig& ib, RngStream& rng) {
  Tensor perturbed = add(logp, sample_gumbel(logp.shape(), rng));
  if (ib.mode == SelectionMode::TopK) return masks_to_tensor(hard_topk_rows(perturbed, ib.k));
  return softmax(perturbed);
}

/// Originals followed by round(weight * B) counterfactuals T(x) built from
/// the leading items. The selector is only evaluated, never recorded.
inline Batch make_counterfactual_batch(const Tensor& images, const std::vector<int>& labels, const ModelParams& selector,
                                       const IBConfig& ib, double counterfactual_weight, RngStream rng) {
  Batch out{images, labels, labels.size()};
  const auto m = static_cast<std::size_t>(std::llround(counterfactual_weight * static_cast<double>(labels.size())));
  if (m == 0) return out;
  Tensor src = images.slice_rows(0, m);
  PatchGrid grid = PatchGrid::for_images(src, ib.patch_size);
  Tensor w = sample_explanation_weights(selector_logits(selector, src, ib.patch_size), ib, rng);
  out.images = concat_rows(images, apply_patch_weights(src, w, grid));
  out.labels.insert(out.labels.end(), labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(m));
  return out;
}

struct ClassifierResult {
  ModelParams model;
  History history;
};

namespace detail {

inline ClassifierResult train_classifier(ModelParams model, const Dataset& train, const Dataset* val,
                                         const ModelParams* selector, const IBConfig* ib, const TrainConfig& tc,
                                         const char* what) {
  tc.validate();
  if (train.size() == 0) throw ContractError(std::string(what) + ": empty dataset");
  Sgd opt(model, tc.momentum, tc.weight_decay);
  RngStream cf_root = RngStream(tc.seed).split("counterfactual");
  const bool augment = selector && tc.counterfactual_weight > 0.0;
  History hist;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = tc.rate_at(epoch);
    auto order = epoch_order(train.size(), tc.seed, epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0, hits = 0, cf_seen = 0, cf_hits = 0, batches = 0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size, ++batches) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + tc.batch_size)));
      Batch batch{gather_rows(train.images, idx), gather_labels(train.labels, idx), idx.size()};
      if (augment)
        batch = make_counterfactual_batch(batch.images, batch.labels, *selector, *ib, tc.counterfactual_weight,
                                          cf_root.split(epoch).split(batches));
      Tape tape;
      auto vars = bind(tape, model);
      Var logits = forward(model.arch, vars, tape.constant(std::move(batch.images)));
      Var loss = cross_entropy(logits, batch.labels);
      check_finite(loss.value().item(), epoch, batches, what);
      Gradients grads = backward(tape, loss);
      opt.step(model, grads, vars, lr);

      std::vector<int> orig(batch.labels.begin(), batch.labels.begin() + static_cast<std::ptrdiff_t>(batch.originals));
      std::vector<int> cf(batch.labels.begin() + static_cast<std::ptrdiff_t>(batch.originals), batch.labels.end());
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      hits += count_correct(logits.value(), orig);
      cf_hits += count_correct(logits.value(), cf, batch.originals);
      seen += idx.size();
      cf_seen += cf.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = static_cast<double>(hits) / static_cast<double>(seen);
    if (cf_seen) rec.train_acc_expl = static_cast<double>(cf_hits) / static_cast<double>(cf_seen);
    if (val && val->size()) {
      Tensor logits = forward(model, val->images);
      rec.val_loss = cross_entropy(logits, val->labels);
      rec.val_acc = accuracy_of(logits, val->labels);
      if (augment) rec.val_acc_expl = accuracy_of(forward(model, explain(*selector, val->images, *ib)), val->labels);
    }
    hist.epochs.push_back(rec);
  }
  return {std::move(model), std::move(hist)};
}

}  // namespace detail

inline ClassifierResult train_vanilla(ModelParams model, const Dataset& train, const Dataset* val, const TrainConfig& tc) {
  return detail::train_classifier(std::move(model), train, val, nullptr, nullptr, tc, "train_vanilla");
}

inline ClassifierResult retrain_blackbox(ModelParams model, const Dataset& train, const Dataset* val,
                                         const ModelParams& selector, const IBConfig& ib, const TrainConfig& tc) {
  if (model.arch.kind != ArchKind::Blackbox) throw ContractError("retrain_blackbox: model is not a blackbox");
  if (selector.arch.kind != ArchKind::Selector) throw ContractError("retrain_blackbox: selector has wrong architecture");
  return detail::train_classifier(std::move(model), train, val, &selector, &ib, tc, "retrain_blackbox");
}

inline ModelParams init_blackbox(const Dataset& d, std::uint64_t seed) {
  return init_params(Architecture::blackbox(d.channels(), d.height(), d.width(), d.classes),
                     RngStream(seed).split("init-blackbox"));
}

// ---- temperature scaling -------------------------------------------------------------------

inline Tensor scale_logits(const Tensor& logits, double temperature) {
  return mul(logits, Tensor::scalar(1.0 / temperature));
}

inline double nll_at_temperature(const Tensor& logits, const std::vector<int>& labels, double temperature) {
  return cross_entropy(scale_logits(logits, temperature), labels);
}

/// Minimizes validation NLL of softmax(logits / T) over T in [0.05, 10]:
/// log-spaced scan, golden-section refinement, and never worse than T = 1.
inline double fit_temperature(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) == 0 || logits.dim(0) != labels.size())
    throw ContractError("fit_temperature: need [N, classes] logits with N >= 1 matching labels");
  const double lo = std::log(0.05), hi = std::log(10.0);
  auto f = [&](double log_t) { return nll_at_temperature(logits, labels, std::exp(log_t)); };
  constexpr int kScan = 64;
  int best = 0;
  double best_val = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= kScan; ++i) {
    double v = f(lo + (hi - lo) * i / kScan);
    if (v < best_val) best_val = v, best = i;
  }
  double a = lo + (hi - lo) * std::max(0, best - 1) / kScan;
  double b = lo + (hi - lo) * std::min(kScan, best + 1) / kScan;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 80; ++it) {
    if (fc < fd) {
      b = d, d = c, fd = fc;
      c = b - phi * (b - a);
      fc = f(c);
    } else {
      a = c, c = d, fc = fd;
      d = a + phi * (b - a);
      fd = f(d);
    }
  }
  double t = std::exp(0.5 * (a + b));
  double ft = f(std::log(t));
  if (best_val < ft) t = std::exp(lo + (hi - lo) * best / kScan), ft = best_val;
  return ft <= f(0.0) ? t : 1.0;
}

}  // namespace xcr
