#pragma once

// Dataset container, binary loaders (IDX, 3073-byte records, native
// XCRDATA1), the planted-patch synthetic generator and seeded splits.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xcr/nn.hpp"
#include "xcr/rng.hpp"
#include "xcr/tensor.hpp"

namespace xcr {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

struct Dataset {
  Tensor images;  // [N, C, H, W] in [0, 1]
  std::vector<int> labels;
  std::size_t classes = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size())
      throw ContractError("Dataset: images " + shape_str(images.shape()) + " vs " + std::to_string(labels.size()) +
                          " labels");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= classes)
        throw ContractError("Dataset: label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
  }

  Dataset subset(const std::vector<std::size_t>& idx, Split s) const {
    Dataset d{gather_rows(images, idx), {}, classes, s};
    d.labels.reserve(idx.size());
    for (auto i : idx) d.labels.push_back(labels[i]);
    return d;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---- IDX ------------------------------------------------------------------------

/// Result of an IDX parse: rank-1 files yield labels, higher ranks images.
struct IdxArray {
  std::vector<std::size_t> dims;
  Tensor images;            // [N, C, H, W]; rank-3 files get C = 1
  std::vector<int> labels;  // rank-1 files only

  bool is_labels() const { return dims.size() == 1; }
};

inline IdxArray decode_idx(const std::string& buf) {
  le::Reader r(buf, "idx");
  r.need(4);
  if (buf[0] != 0 || buf[1] != 0) r.fail("bad magic (expected two zero bytes)");
  auto type = static_cast<unsigned char>(buf[2]);
  auto rank = static_cast<unsigned char>(buf[3]);
  if (type != 0x08) throw IoError("idx: unsupported type code " + std::to_string(type) + " at byte offset 2");
  if (rank != 1 && rank != 3 && rank != 4) throw IoError("idx: unsupported rank " + std::to_string(rank) + " at byte offset 3");
  r.bytes(4);
  IdxArray out;
  for (int i = 0; i < rank; ++i) {
    r.need(4);
    std::size_t off = r.offset();
    std::uint32_t be = 0;
    for (int j = 0; j < 4; ++j) be = (be << 8) | static_cast<unsigned char>(buf[off + static_cast<std::size_t>(j)]);
    r.bytes(4);
    out.dims.push_back(be);
  }
  std::size_t n = 1;
  for (auto d : out.dims) n *= d;
  r.need(n);
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + r.offset());
  if (rank == 1) {
    out.labels.assign(p, p + n);
  } else {
    Shape s = rank == 3 ? Shape{out.dims[0], 1, out.dims[1], out.dims[2]}
                        : Shape{out.dims[0], out.dims[1], out.dims[2], out.dims[3]};
    out.images = Tensor(s);
    for (std::size_t i = 0; i < n; ++i) out.images[i] = p[i] / 255.0;
  }
  r.bytes(n);
  if (!r.done()) r.fail("trailing bytes after payload");
  return out;
}

inline IdxArray load_idx(const std::string& path) { return decode_idx(read_file(path)); }

/// Image file plus label file, e.g. the handwritten-digit archive.
inline Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path, std::size_t classes) {
  IdxArray img = load_idx(images_path), lab = load_idx(labels_path);
  if (img.is_labels() || !lab.is_labels()) throw IoError("idx: expected an image file and a label file");
  Dataset d{std::move(img.images), std::move(lab.labels), classes, Split::Train};
  d.validate();
  return d;
}

inline std::string encode_idx_images(const Tensor& images) {
  std::string out{'\0', '\0', '\x08', '\x03'};
  auto put_be = [&](std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_be(static_cast<std::uint32_t>(images.dim(0)));
  put_be(static_cast<std::uint32_t>(images.dim(2)));
  put_be(static_cast<std::uint32_t>(images.dim(3)));
  for (double v : images.values()) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  return out;
}

// ---- 3073-byte records: 1 label byte + 3x32x32 pixel bytes -----------------

inline constexpr std::size_t kCifarRecord = 3073;

inline Dataset decode_cifar_binary(const std::string& buf, std::size_t classes = 10) {
  if (buf.size() % kCifarRecord != 0)
    throw IoError("cifar: length " + std::to_string(buf.size()) + " not divisible by 3073; trailing record starts at byte offset " +
                  std::to_string(buf.size() - buf.size() % kCifarRecord));
  const std::size_t n = buf.size() / kCifarRecord;
  Dataset d{Tensor({n, 3, 32, 32}), std::vector<int>(n), classes, Split::Train};
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = p + i * kCifarRecord;
    if (rec[0] >= classes)
      throw IoError("cifar: label " + std::to_string(rec[0]) + " out of range at byte offset " +
                    std::to_string(i * kCifarRecord));
    d.labels[i] = rec[0];
    for (std::size_t j = 0; j < 3072; ++j) d.images[i * 3072 + j] = rec[1 + j] / 255.0;
  }
  return d;
}

inline std::string encode_cifar_binary(const Dataset& d) {
  if (d.channels() != 3 || d.height() != 32 || d.width() != 32)
    throw ContractError("cifar: expected [N,3,32,32], got " + shape_str(d.images.shape()));
  std::string out;
  out.reserve(d.size() * kCifarRecord);
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back(static_cast<char>(d.labels[i]));
    for (std::size_t j = 0; j < 3072; ++j)
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(d.images[i * 3072 + j] * 255.0))));
  }
  return out;
}

inline Dataset load_cifar_binary(const std::string& path, std::size_t classes = 10) {
  return decode_cifar_binary(read_file(path), classes);
}

// ---- native container -------------------------------------------------------------
//
// "XCRDATA1", then little-endian: u32 classes, u8 split, and two arrays
// (images, labels), each as u32 rank, u64 dims, u8 dtype, payload.
// dtype 1 = f64, dtype 2 = i32.

inline constexpr char kDataMagic[8] = {'X', 'C', 'R', 'D', 'A', 'T', 'A', '1'};
inline constexpr std::uint8_t kDtypeF64 = 1;
inline constexpr std::uint8_t kDtypeI32 = 2;

inline std::string encode_dataset(const Dataset& d) {
  std::string out(kDataMagic, 8);
  le::put_u32(out, static_cast<std::uint32_t>(d.classes));
  out.push_back(static_cast<char>(d.split));
  le::put_u32(out, static_cast<std::uint32_t>(d.images.rank()));
  for (auto s : d.images.shape()) le::put_u64(out, s);
  out.push_back(static_cast<char>(kDtypeF64));
  for (double v : d.images.values()) le::put_f64(out, v);
  le::put_u32(out, 1);
  le::put_u64(out, d.labels.size());
  out.push_back(static_cast<char>(kDtypeI32));
  for (int y : d.labels) le::put_u32(out, static_cast<std::uint32_t>(y));
  return out;
}

inline Dataset decode_dataset(const std::string& buf) {
  le::Reader r(buf, "dataset");
  if (r.bytes(8) != std::string(kDataMagic, 8)) throw IoError("dataset: bad magic at byte offset 0");
  Dataset d;
  d.classes = r.u32();
  auto split = r.uint(1);
  if (split > 2) r.fail("bad split tag");
  d.split = static_cast<Split>(split);
  if (r.u32() != 4) r.fail("image array must have rank 4");
  Shape s(4);
  for (auto& v : s) v = r.u64();
  if (r.uint(1) != kDtypeF64) r.fail("image dtype must be f64");
  std::size_t n = numel(s);
  r.need(n * 8);
  std::vector<double> px(n);
  for (auto& v : px) {
    v = r.f64();
    if (!(v >= 0.0 && v <= 1.0)) r.fail("pixel outside [0,1]");
  }
  d.images = Tensor(s, std::move(px));
  if (r.u32() != 1) r.fail("label array must have rank 1");
  std::size_t nl = r.u64();
  if (nl != s[0]) r.fail("label count does not match image count");
  if (r.uint(1) != kDtypeI32) r.fail("label dtype must be i32");
  r.need(nl * 4);
  d.labels.resize(nl);
  for (auto& y : d.labels) {
    y = static_cast<std::int32_t>(r.u32());
    if (y < 0 || static_cast<std::size_t>(y) >= d.classes) r.fail("label out of range");
  }
  if (!r.done()) r.fail("trailing bytes");
  return d;
}

inline void save_dataset(const std::string& path, const Dataset& d) { write_file(path, encode_dataset(d)); }
inline Dataset load_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

// ---- planted-patch synthetic data -----------------------------------------------

struct PlantedSpec {
  std::size_t height = 16, width = 16, channels = 1, patch_size = 2;
  std::size_t classes = 10, n = 10000;
  double noise = 0.7;
  /// Informative patch indices (row-major over the patch grid), one list per class.
  std::vector<std::vector<std::size_t>> informative;

  std::size_t grid_rows() const { return height / patch_size; }
  std::size_t grid_cols() const { return width / patch_size; }
  std::size_t patches() const { return grid_rows() * grid_cols(); }

  /// Draws `pool` patch locations, then gives each class a distinct
  /// `per_class`-subset of them. Since the pattern at a location does not
  /// depend on the class, one planted patch alone does not identify the label.
  static PlantedSpec with_random_layout(std::size_t per_class = 4, std::size_t pool = 6, std::uint64_t layout_seed = 7) {
    PlantedSpec s;
    s.assign_layout(per_class, pool, layout_seed);
    return s;
  }

  void assign_layout(std::size_t per_class, std::size_t pool, std::uint64_t layout_seed) {
    if (pool > patches() || per_class > pool) throw ContractError("PlantedSpec: layout pool does not fit the grid");
    RngStream rng(layout_seed, detail::fnv1a("planted-layout"));
    std::vector<std::size_t> all(patches());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    rng.shuffle(all);
    std::vector<std::size_t> candidates(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(pool));
    informative.clear();
    for (std::size_t tries = 0; informative.size() < classes; ++tries) {
      if (tries > 100000) throw ContractError("PlantedSpec: not enough distinct subsets for every class");
      rng.shuffle(candidates);
      std::vector<std::size_t> set(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(per_class));
      std::sort(set.begin(), set.end());
      if (std::find(informative.begin(), informative.end(), set) == informative.end()) informative.push_back(set);
    }
  }

  void validate() const {
    if (patch_size == 0 || height % patch_size || width % patch_size)
      throw ContractError("PlantedSpec: image dims must be divisible by patch_size");
    if (informative.size() != classes) throw ContractError("PlantedSpec: need one informative list per class");
    for (const auto& set : informative)
      for (auto j : set)
        if (j >= patches()) throw ContractError("PlantedSpec: informative index " + std::to_string(j) + " >= d");
    if (noise < 0.0 || noise > 1.0) throw ContractError("PlantedSpec: noise level outside [0,1]");
  }
};

/// Pixel `pix` of the pattern planted at patch location `patch`: 0.6 or 1.0.
/// Backgrounds above 0.6 overlap the dimmer pixels, so detection has to use
/// the pattern and not just brightness.
inline double planted_value(std::size_t patch, std::size_t pix) {
  std::uint64_t h = detail::splitmix64(patch * 977 + pix);
  return (h >> 17) & 1 ? 1.0 : 0.6;
}

/// Writes the planted pattern into patch location `patch` of image `img`.
inline void plant_patch(const PlantedSpec& s, double* img, std::size_t patch) {
  const std::size_t pr = patch / s.grid_cols(), pc = patch % s.grid_cols(), ps = s.patch_size;
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t y = 0; y < ps; ++y)
      for (std::size_t x = 0; x < ps; ++x)
        img[(c * s.height + pr * ps + y) * s.width + pc * ps + x] =
            planted_value(patch, (c * ps + y) * ps + x);
}

/// Images are uniform noise on [0, noise] with the class's informative
/// patches overwritten, so the class pattern is the set of planted locations.
/// Labels are balanced round-robin, then shuffled.
inline Dataset synth_planted_dataset(const PlantedSpec& s, RngStream rng) {
  s.validate();
  const std::size_t per_image = s.channels * s.height * s.width;
  Dataset d{Tensor({s.n, s.channels, s.height, s.width}), std::vector<int>(s.n), s.classes, Split::Train};
  for (std::size_t i = 0; i < s.n; ++i) d.labels[i] = static_cast<int>(i % s.classes);
  RngStream order = rng.split("order");
  order.shuffle(d.labels);
  RngStream pixels = rng.split("pixels");
  for (std::size_t i = 0; i < s.n; ++i) {
    double* img = d.images.data() + i * per_image;
    for (std::size_t j = 0; j < per_image; ++j) img[j] = s.noise * pixels.uniform();
    auto cls = static_cast<std::size_t>(d.labels[i]);
    for (auto patch : s.informative[cls]) plant_patch(s, img, patch);
  }
  return d;
}

// ---- splits -------------------------------------------------------------------------

struct SplitResult {
  Dataset train, val, test;
};

/// Disjoint shuffled split; train and val sizes are rounded, test takes the rest.
inline SplitResult split_dataset(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = fractions[0] + fractions[1] + fractions[2];
  for (double f : fractions)
    if (f < 0.0) throw ContractError("split_dataset: negative fraction");
  if (std::fabs(total - 1.0) > 1e-9) throw ContractError("split_dataset: fractions sum to " + std::to_string(total));
  const std::size_t n = ds.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  RngStream rng(seed, detail::fnv1a("split"));
  rng.shuffle(idx);
  auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n))));
  auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  auto part = [&](std::size_t b, std::size_t e) { return std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(b), idx.begin() + static_cast<std::ptrdiff_t>(e)); };
  return {ds.subset(part(0, n_train), Split::Train), ds.subset(part(n_train, n_train + n_val), Split::Val),
          ds.subset(part(n_train + n_val, n), Split::Test)};
}

}  // namespace xcr
