#pragma once

// Patch selector, Gumbel top-k relaxation and the explanation map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "xcr/autodiff.hpp"
#include "xcr/format.hpp"
#include "xcr/nn.hpp"
#include "xcr/rng.hpp"

namespace xcr {

enum class SelectionMode { TopK, Softmax };

inline const char* mode_name(SelectionMode m) { return m == SelectionMode::TopK ? "topk" : "softmax"; }

inline SelectionMode parse_mode(const std::string& s) {
  if (s == "topk") return SelectionMode::TopK;
  if (s == "softmax") return SelectionMode::Softmax;
  throw ConfigError("selection mode must be topk or softmax, got '" + s + "'");
}

inline constexpr double kGumbelEps = 1e-10;

struct IBConfig {
  std::size_t k = 4;
  double beta = 0.001;
  double tau = 0.1;
  std::size_t patch_size = 2;
  std::size_t num_samples = 4;
  SelectionMode mode = SelectionMode::TopK;

  void validate(std::size_t d) const {
    if (k == 0 || k > d) throw ConfigError("ib.k must be in [1, " + std::to_string(d) + "], got " + std::to_string(k));
    if (!(tau > 0.0)) throw ConfigError("ib.tau must be positive");
    if (!(beta >= 0.0)) throw ConfigError("ib.beta must be non-negative");
    if (num_samples == 0) throw ConfigError("ib.num_samples must be at least 1");
  }
};

struct PatchGrid {
  std::size_t channels = 1, height = 0, width = 0, patch_size = 1;
  std::size_t rows = 0, cols = 0;

  static PatchGrid make(std::size_t channels, std::size_t height, std::size_t width, std::size_t patch_size) {
    if (patch_size == 0 || height % patch_size || width % patch_size)
      throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible into patches of size " + std::to_string(patch_size));
    return {channels, height, width, patch_size, height / patch_size, width / patch_size};
  }
  static PatchGrid for_images(const Tensor& x, std::size_t patch_size) {
    if (x.rank() != 4) throw ContractError("PatchGrid: expected [B,C,H,W], got " + shape_str(x.shape()));
    return make(x.dim(1), x.dim(2), x.dim(3), patch_size);
  }

  std::size_t d() const { return rows * cols; }
};

struct HardMask {
  std::vector<std::uint8_t> bits;
  std::size_t k = 0;

  std::size_t d() const { return bits.size(); }
  friend bool operator==(const HardMask&, const HardMask&) = default;
};

// ---- selector -----------------------------------------------------------------------

inline Architecture selector_arch(const PatchGrid& g) {
  return Architecture::selector(g.channels, g.height, g.width, g.d());
}

/// Per-patch log probabilities [B, d].
inline Tensor selector_logits(const ModelParams& selector, const Tensor& x, std::size_t patch_size) {
  PatchGrid g = PatchGrid::for_images(x, patch_size);
  if (selector.arch.outputs != g.d())
    throw ContractError("selector scores " + std::to_string(selector.arch.outputs) + " patches, grid has " +
                        std::to_string(g.d()));
  return log_softmax(forward(selector, x));
}

inline Var selector_logits(const Architecture& arch, const std::vector<Var>& params, Var x, std::size_t patch_size) {
  PatchGrid g = PatchGrid::for_images(x.value(), patch_size);
  if (arch.outputs != g.d()) throw ContractError("selector output does not match the patch grid");
  return log_softmax(forward(arch, params, x));
}

// ---- Gumbel relaxation --------------------------------------------------------------

inline double gumbel_from_uniform(double e, double eps = kGumbelEps) {
  e = std::clamp(e, eps, 1.0 - eps);
  return -std::log(-std::log(e));
}

inline Tensor sample_gumbel(const Shape& shape, RngStream& rng, double eps = kGumbelEps) {
  Tensor g(shape);
  for (auto& v : g.values()) v = gumbel_from_uniform(rng.uniform(), eps);
  return g;
}

/// softmax((g + logp) / tau) over the last axis.
inline Tensor concrete_weights(const Tensor& logp, const Tensor& g, double tau) {
  if (!(tau > 0.0)) throw ContractError("concrete_weights: tau must be positive");
  return softmax(mul(add(logp, g), Tensor::scalar(1.0 / tau)));
}

inline Var concrete_weights(Var logp, const Tensor& g, double tau) {
  Tape& t = *logp.tape;
  return exp(log_softmax(mul(add(logp, t.constant(g)), t.constant(Tensor::scalar(1.0 / tau)))));
}

/// Element-wise maximum over the k draws (rows of `c_samples`, shape [k, d]).
inline Tensor relaxed_khot(const Tensor& c_samples) {
  if (c_samples.rank() != 2 || c_samples.dim(0) == 0) throw ContractError("relaxed_khot: expected [k, d]");
  const std::size_t k = c_samples.dim(0), d = c_samples.dim(1);
  Tensor z = c_samples.slice_rows(0, 1).reshaped({d});
  for (std::size_t l = 1; l < k; ++l) z = maximum(z, c_samples.slice_rows(l, l + 1).reshaped({d}));
  return z;
}

inline Var relaxed_khot(const std::vector<Var>& draws) {
  if (draws.empty()) throw ContractError("relaxed_khot: no draws");
  Var z = draws[0];
  for (std::size_t l = 1; l < draws.size(); ++l) z = maximum(z, draws[l]);
  return z;
}

// ---- hard masks ---------------------------------------------------------------------

/// Bits at the k largest scores; equal scores resolve to the lower index.
inline HardMask hard_topk(const double* scores, std::size_t d, std::size_t k) {
  if (k > d) throw ContractError("hard_topk: k=" + std::to_string(k) + " exceeds d=" + std::to_string(d));
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  HardMask m{std::vector<std::uint8_t>(d, 0), k};
  for (std::size_t i = 0; i < k; ++i) m.bits[idx[i]] = 1;
  return m;
}

inline HardMask hard_topk(const Tensor& scores, std::size_t k) { return hard_topk(scores.data(), scores.size(), k); }

/// One mask per row of a [B, d] score tensor.
inline std::vector<HardMask> hard_topk_rows(const Tensor& scores, std::size_t k) {
  if (scores.rank() != 2) throw ContractError("hard_topk_rows: expected [B, d]");
  std::vector<HardMask> out;
  out.reserve(scores.dim(0));
  for (std::size_t b = 0; b < scores.dim(0); ++b) out.push_back(hard_topk(scores.data() + b * scores.dim(1), scores.dim(1), k));
  return out;
}

inline HardMask random_khot(std::size_t d, std::size_t k, RngStream& rng) {
  if (k > d) throw ContractError("random_khot: k exceeds d");
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_int(d - i)]);
  HardMask m{std::vector<std::uint8_t>(d, 0), k};
  for (std::size_t i = 0; i < k; ++i) m.bits[idx[i]] = 1;
  return m;
}

inline Tensor masks_to_tensor(const std::vector<HardMask>& masks) {
  if (masks.empty()) return Tensor({0, 0});
  Tensor t({masks.size(), masks[0].d()});
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].d() != masks[0].d()) throw ContractError("masks_to_tensor: ragged masks");
    for (std::size_t j = 0; j < masks[b].d(); ++j) t[b * masks[b].d() + j] = masks[b].bits[j];
  }
  return t;
}

// ---- explanation map ----------------------------------------------------------------

/// Per-patch weights [B, d] expanded to pixels and multiplied into x.
inline Tensor apply_patch_weights(const Tensor& x, const Tensor& w, const PatchGrid& g) {
  if (x.rank() != 4 || x.dim(1) != g.channels || x.dim(2) != g.height || x.dim(3) != g.width)
    throw ContractError("explanation: image " + shape_str(x.shape()) + " does not match the patch grid");
  if (w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != g.d())
    throw ContractError("explanation: weights " + shape_str(w.shape()) + " do not match [" +
                        std::to_string(x.dim(0)) + "," + std::to_string(g.d()) + "]");
  Tensor map = upsample(w.reshaped({x.dim(0), 1, g.rows, g.cols}), g.patch_size, g.channels);
  return mul(x, map);
}

inline Var apply_patch_weights(Var x, Var w, const PatchGrid& g) {
  Var grid = reshape(w, {x.shape()[0], 1, g.rows, g.cols});
  return mul(x, upsample(grid, g.patch_size, g.channels));
}

/// T(x). In topk mode `z` holds 0/1 patch bits and is used as-is; in softmax
/// mode the weights are softmax(z) over the d patches.
inline Tensor build_explanation(const Tensor& x, const Tensor& z, const PatchGrid& g, SelectionMode mode) {
  return apply_patch_weights(x, mode == SelectionMode::Softmax ? softmax(z) : z, g);
}

inline Tensor build_explanation(const Tensor& x, const std::vector<HardMask>& masks, const PatchGrid& g) {
  for (const auto& m : masks)
    if (m.d() != g.d()) throw ContractError("explanation: mask length " + std::to_string(m.d()) + " != d");
  return apply_patch_weights(x, masks_to_tensor(masks), g);
}

/// Selector-driven explanation of a batch under the configured mode.
inline Tensor explain(const ModelParams& selector, const Tensor& x, const IBConfig& ib) {
  PatchGrid g = PatchGrid::for_images(x, ib.patch_size);
  Tensor logp = selector_logits(selector, x, ib.patch_size);
  if (ib.mode == SelectionMode::TopK) return build_explanation(x, hard_topk_rows(logp, ib.k), g);
  return build_explanation(x, logp, g, SelectionMode::Softmax);
}

// ---- mask export --------------------------------------------------------------------

/// One line per instance: id, then d space-separated values.
inline void write_masks(std::ostream& os, const std::vector<std::size_t>& ids, const Tensor& weights) {
  if (weights.rank() != 2 || weights.dim(0) != ids.size()) throw ContractError("write_masks: id/weight mismatch");
  const std::size_t d = weights.dim(1);
  for (std::size_t b = 0; b < ids.size(); ++b) {
    os << ids[b];
    for (std::size_t j = 0; j < d; ++j) os << ' ' << format_double(weights[b * d + j]);
    os << '\n';
  }
}

}  // namespace xcr
