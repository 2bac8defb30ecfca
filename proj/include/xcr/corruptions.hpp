#pragma once

// Seeded image corruptions for distribution-shift evaluation. Severity
// constants are tuned for small (16-32 px) images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xcr/data_io.hpp"
#include "xcr/rng.hpp"
#include "xcr/tensor.hpp"

namespace xcr {

enum class CorruptionKind {
  GaussianNoise,
  ShotNoise,
  ImpulseNoise,
  GaussianBlur,
  BoxBlur,
  Contrast,
  Brightness,
  Pixelate,
};

inline constexpr std::array<CorruptionKind, 8> kAllCorruptions = {
    CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise, CorruptionKind::ImpulseNoise,
    CorruptionKind::GaussianBlur,  CorruptionKind::BoxBlur,   CorruptionKind::Contrast,
    CorruptionKind::Brightness,    CorruptionKind::Pixelate,
};

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::ShotNoise: return "shot_noise";
    case CorruptionKind::ImpulseNoise: return "impulse_noise";
    case CorruptionKind::GaussianBlur: return "gaussian_blur";
    case CorruptionKind::BoxBlur: return "box_blur";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::Brightness: return "brightness";
    case CorruptionKind::Pixelate: return "pixelate";
  }
  return "?";
}

inline CorruptionKind parse_corruption(const std::string& s) {
  for (auto k : kAllCorruptions)
    if (s == corruption_name(k)) return k;
  throw ConfigError("unknown corruption kind '" + s + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 1;
  std::uint64_t seed = 0;
};

/// Severity parameter for levels 1..5.
inline double severity_param(CorruptionKind k, int severity) {
  if (severity < 1 || severity > 5) throw ContractError("corruption severity must be in [1,5], got " + std::to_string(severity));
  static constexpr double table[8][5] = {
      {0.04, 0.06, 0.08, 0.10, 0.14},  // gaussian_noise: sigma
      {500, 250, 100, 60, 30},         // shot_noise: photon count
      {0.01, 0.02, 0.04, 0.07, 0.10},  // impulse_noise: flipped fraction
      {0.4, 0.6, 0.9, 1.2, 1.6},       // gaussian_blur: sigma
      {3, 3, 5, 5, 7},                 // box_blur: kernel size
      {0.75, 0.6, 0.45, 0.3, 0.2},     // contrast: scale about the mean
      {0.05, 0.10, 0.15, 0.20, 0.30},  // brightness: additive offset
      {1.25, 1.5, 2, 3, 4},            // pixelate: downscale factor
  };
  return table[static_cast<int>(k)][severity - 1];
}

namespace detail {

/// Separable filter with clamp-to-edge borders, applied per channel.
inline void separable_filter(Tensor& img, const std::vector<double>& kernel) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    double* p = img.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) {
          auto sx = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + k, 0, static_cast<std::ptrdiff_t>(W) - 1);
          s += kernel[static_cast<std::size_t>(k + r)] * p[y * W + static_cast<std::size_t>(sx)];
        }
        tmp[y * W + x] = s;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) {
          auto sy = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) + k, 0, static_cast<std::ptrdiff_t>(H) - 1);
          s += kernel[static_cast<std::size_t>(k + r)] * tmp[static_cast<std::size_t>(sy) * W + x];
        }
        p[y * W + x] = s;
      }
  }
}

inline std::vector<double> gaussian_kernel(double sigma) {
  auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k;
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k.push_back(v);
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

/// Area-average down to round(H/f) x round(W/f), then nearest-neighbour back up.
inline void pixelate(Tensor& img, double factor) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(H) / factor)));
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(W) / factor)));
  std::vector<double> sum(h * w), cnt(h * w);
  for (std::size_t c = 0; c < C; ++c) {
    double* p = img.data() + c * H * W;
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0.0);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t cell = (y * h / H) * w + x * w / W;
        sum[cell] += p[y * W + x];
        cnt[cell] += 1.0;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t cell = (y * h / H) * w + x * w / W;
        p[y * W + x] = sum[cell] / cnt[cell];
      }
  }
}

}  // namespace detail

/// Corrupts one [C, H, W] image with pixels in [0, 1]; output is clamped to [0, 1].
inline Tensor corrupt_image(const Tensor& x, const CorruptionSpec& spec) {
  if (x.rank() != 3) throw ContractError("corrupt_image: expected [C,H,W], got " + shape_str(x.shape()));
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] >= 0.0 && x[i] <= 1.0))
      throw ContractError("corrupt_image: pixel " + std::to_string(i) + " outside [0,1]: " + std::to_string(x[i]));
  const double param = severity_param(spec.kind, spec.severity);
  RngStream rng(spec.seed, detail::fnv1a(corruption_name(spec.kind)));
  Tensor out = x;
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise:
      for (auto& v : out.values()) v += param * rng.normal();
      break;
    case CorruptionKind::ShotNoise:
      for (auto& v : out.values()) v = static_cast<double>(rng.poisson(v * param)) / param;
      break;
    case CorruptionKind::ImpulseNoise:
      for (auto& v : out.values()) {
        double u = rng.uniform(), salt = rng.uniform();
        if (u < param) v = salt < 0.5 ? 0.0 : 1.0;
      }
      break;
    case CorruptionKind::GaussianBlur:
      detail::separable_filter(out, detail::gaussian_kernel(param));
      break;
    case CorruptionKind::BoxBlur:
      detail::separable_filter(out, std::vector<double>(static_cast<std::size_t>(param), 1.0 / param));
      break;
    case CorruptionKind::Contrast: {
      const std::size_t C = x.dim(0), hw = x.dim(1) * x.dim(2);
      for (std::size_t c = 0; c < C; ++c) {
        // Mean shifted by the first pixel, so constant channels stay exactly fixed.
        const double x0 = x[c * hw];
        double m = 0.0;
        for (std::size_t i = 0; i < hw; ++i) m += x[c * hw + i] - x0;
        m = x0 + m / static_cast<double>(hw);
        for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = (x[c * hw + i] - m) * param + m;
      }
      break;
    }
    case CorruptionKind::Brightness:
      for (auto& v : out.values()) v += param;
      break;
    case CorruptionKind::Pixelate:
      detail::pixelate(out, param);
      break;
  }
  for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

struct CorruptedSet {
  CorruptionKind kind;
  int severity;
  Dataset data;

  std::string file_name() const {
    return std::string(corruption_name(kind)) + "_s" + std::to_string(severity) + ".xcrdata";
  }
};

/// Seed for image `index` under (kind, severity), split from the master seed.
inline std::uint64_t corruption_seed(std::uint64_t master, CorruptionKind kind, int severity, std::size_t index) {
  return RngStream(master)
      .split(corruption_name(kind))
      .split(static_cast<std::uint64_t>(severity))
      .split(static_cast<std::uint64_t>(index))
      .next_u64();
}

inline Dataset corrupt_dataset(const Dataset& ds, CorruptionKind kind, int severity, std::uint64_t seed) {
  Dataset out = ds;
  const std::size_t per = ds.channels() * ds.height() * ds.width();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor img({ds.channels(), ds.height(), ds.width()},
               std::vector<double>(ds.images.data() + i * per, ds.images.data() + (i + 1) * per));
    Tensor c = corrupt_image(img, {kind, severity, corruption_seed(seed, kind, severity, i)});
    std::copy(c.values().begin(), c.values().end(), out.images.data() + i * per);
  }
  return out;
}

/// One corrupted copy per (kind, severity), kinds outermost.
inline std::vector<CorruptedSet> build_corruption_suite(const Dataset& ds, const std::vector<CorruptionKind>& kinds,
                                                        const std::vector<int>& severities, std::uint64_t seed) {
  std::vector<CorruptedSet> out;
  for (auto k : kinds)
    for (int s : severities) out.push_back({k, s, corrupt_dataset(ds, k, s, seed)});
  return out;
}

}  // namespace xcr
