#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xcr/autodiff.hpp"
#include "xcr/rng.hpp"

namespace xcr {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ArchKind { Selector, Approximator, Blackbox };

inline const char* arch_name(ArchKind k) {
  switch (k) {
    case ArchKind::Selector: return "selector";
    case ArchKind::Approximator: return "approximator";
    case ArchKind::Blackbox: return "blackbox";
  }
  return "?";
}

/// Classifiers: conv(3x3,conv1)-relu-pool-conv(3x3,conv2)-relu-pool-affine(hidden)-relu-affine(outputs).
/// Selector: conv(3x3,conv1)-relu-conv(3x3,conv2)-relu, pooled down to one cell
/// per patch, then a one-channel 3x3 scoring conv; `outputs` is the patch count.
struct Architecture {
  ArchKind kind = ArchKind::Blackbox;
  std::size_t channels = 1, height = 16, width = 16;
  std::size_t conv1 = 32, conv2 = 64, hidden = 128;
  std::size_t outputs = 10;

  static Architecture selector(std::size_t c, std::size_t h, std::size_t w, std::size_t patches) {
    return {ArchKind::Selector, c, h, w, 16, 32, 0, patches};
  }
  static Architecture approximator(std::size_t c, std::size_t h, std::size_t w, std::size_t classes) {
    return {ArchKind::Approximator, c, h, w, 16, 32, 64, classes};
  }
  static Architecture blackbox(std::size_t c, std::size_t h, std::size_t w, std::size_t classes) {
    return {ArchKind::Blackbox, c, h, w, 32, 64, 128, classes};
  }

  std::size_t flat_features() const { return conv2 * (height / 4) * (width / 4); }

  /// Selector pooling factor: the power of two p with (height/p)*(width/p) == outputs.
  std::size_t patch_factor() const {
    for (std::size_t p = 1; p <= height && p <= width; p *= 2)
      if (height % p == 0 && width % p == 0 && (height / p) * (width / p) == outputs) return p;
    throw ContractError("selector: " + std::to_string(outputs) + " patches do not tile " + std::to_string(height) + "x" +
                        std::to_string(width) + " with a power-of-two patch size");
  }

  /// Serialized form, e.g. "blackbox:1x16x16:32,64,128:10".
  std::string tag() const {
    std::ostringstream os;
    os << arch_name(kind) << ':' << channels << 'x' << height << 'x' << width << ':' << conv1 << ',' << conv2 << ','
       << hidden << ':' << outputs;
    return os.str();
  }

  static Architecture parse(const std::string& tag) {
    Architecture a;
    std::string kind;
    std::istringstream is(tag);
    char x1, x2, sep2, c1, c2, sep3;
    if (!std::getline(is, kind, ':') ||
        !(is >> a.channels >> x1 >> a.height >> x2 >> a.width >> sep2 >> a.conv1 >> c1 >> a.conv2 >> c2 >> a.hidden >>
          sep3 >> a.outputs) ||
        x1 != 'x' || x2 != 'x' || sep2 != ':' || c1 != ',' || c2 != ',' || sep3 != ':')
      throw IoError("bad architecture tag '" + tag + "'");
    if (kind == "selector") a.kind = ArchKind::Selector;
    else if (kind == "approximator") a.kind = ArchKind::Approximator;
    else if (kind == "blackbox") a.kind = ArchKind::Blackbox;
    else throw IoError("unknown architecture '" + kind + "'");
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Named parameter tensors for one network, in a fixed order.
struct ModelParams {
  Architecture arch;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t count() const { return tensors.size(); }
  const Tensor& get(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw ContractError("no parameter named " + name);
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline std::vector<std::pair<std::string, Shape>> parameter_layout(const Architecture& a) {
  if (a.kind == ArchKind::Selector) {
    a.patch_factor();
    return {{"conv1.weight", {a.conv1, a.channels, 3, 3}}, {"conv1.bias", {a.conv1}},
            {"conv2.weight", {a.conv2, a.conv1, 3, 3}},    {"conv2.bias", {a.conv2}},
            {"score.weight", {1, a.conv2, 3, 3}},          {"score.bias", {1}}};
  }
  if (a.height % 4 || a.width % 4)
    throw ContractError("architecture needs height and width divisible by 4, got " + std::to_string(a.height) + "x" +
                        std::to_string(a.width));
  std::vector<std::pair<std::string, Shape>> l{
      {"conv1.weight", {a.conv1, a.channels, 3, 3}},
      {"conv1.bias", {a.conv1}},
      {"conv2.weight", {a.conv2, a.conv1, 3, 3}},
      {"conv2.bias", {a.conv2}},
  };
  if (a.hidden) {
    l.push_back({"fc1.weight", {a.flat_features(), a.hidden}});
    l.push_back({"fc1.bias", {a.hidden}});
    l.push_back({"fc2.weight", {a.hidden, a.outputs}});
    l.push_back({"fc2.bias", {a.outputs}});
  } else {
    l.push_back({"fc.weight", {a.flat_features(), a.outputs}});
    l.push_back({"fc.bias", {a.outputs}});
  }
  return l;
}

inline ModelParams zero_params(const Architecture& arch) {
  ModelParams p{arch, {}, {}};
  for (auto& [name, shape] : parameter_layout(arch)) {
    p.names.push_back(name);
    p.tensors.emplace_back(shape);
  }
  return p;
}

/// He-normal weights, zero biases. The selector's scoring layer starts at zero
/// so its initial patch distribution is uniform.
inline ModelParams init_params(const Architecture& arch, RngStream rng) {
  ModelParams p = zero_params(arch);
  for (std::size_t i = 0; i < p.count(); ++i) {
    Tensor& t = p.tensors[i];
    if (t.rank() == 1) continue;
    if (arch.kind == ArchKind::Selector && i + 2 == p.count()) continue;
    std::size_t fan_in = t.rank() == 4 ? t.dim(1) * 9 : t.dim(0);
    double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = sd * rng.normal();
  }
  return p;
}

namespace detail {

template <class T>
T network(const Architecture& a, const std::vector<T>& p, T x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != a.channels || s[2] != a.height || s[3] != a.width)
    throw ContractError(std::string(arch_name(a.kind)) + ": expected input [B," + std::to_string(a.channels) + "," +
                        std::to_string(a.height) + "," + std::to_string(a.width) + "], got " + shape_str(s));
  const std::size_t batch = s[0];
  if (a.kind == ArchKind::Selector) {
    T h = relu(conv2d(relu(conv2d(x, p[0], p[1])), p[2], p[3]));
    for (std::size_t f = a.patch_factor(); f > 1; f /= 2) h = avgpool2d(h);
    return reshape(conv2d(h, p[4], p[5]), Shape{batch, a.outputs});
  }
  T h = avgpool2d(relu(conv2d(x, p[0], p[1])));
  h = avgpool2d(relu(conv2d(h, p[2], p[3])));
  h = reshape(h, Shape{batch, a.flat_features()});
  if (a.hidden) {
    h = relu(add(matmul(h, p[4]), p[5]));
    return add(matmul(h, p[6]), p[7]);
  }
  return add(matmul(h, p[4]), p[5]);
}

}  // namespace detail

/// Registers the parameters as differentiable leaves.
inline std::vector<Var> bind(Tape& tape, const ModelParams& params) {
  std::vector<Var> vars;
  vars.reserve(params.count());
  for (const auto& t : params.tensors) vars.push_back(tape.leaf(t));
  return vars;
}

/// Output logits [B, outputs] recorded on the tape.
inline Var forward(const Architecture& arch, const std::vector<Var>& params, Var x) {
  return detail::network(arch, params, x);
}

/// Output logits [B, outputs] without recording, evaluated in chunks.
inline Tensor forward(const ModelParams& params, const Tensor& x, std::size_t chunk = 256) {
  if (x.rank() != 4) throw ContractError("forward: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  if (n <= chunk) return detail::network(params.arch, params.tensors, x);
  Tensor out({n, params.arch.outputs});
  for (std::size_t b = 0; b < n; b += chunk) {
    std::size_t e = std::min(n, b + chunk);
    Tensor part = detail::network(params.arch, params.tensors, x.slice_rows(b, e));
    std::copy(part.values().begin(), part.values().end(), out.data() + b * params.arch.outputs);
  }
  return out;
}

inline Tensor predict_probs(const ModelParams& params, const Tensor& x) { return softmax(forward(params, x)); }

// ---- checkpoint file ------------------------------------------------------------
//
// "XCRCKPT1", u32 tag length, tag bytes, then until EOF per parameter:
// u32 name length, name bytes, u32 rank, u64 dims, f64 values. All integers
// and reals little-endian.

inline constexpr char kCheckpointMagic[8] = {'X', 'C', 'R', 'C', 'K', 'P', 'T', '1'};

namespace le {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

/// Bounds-checked little-endian reader; errors carry the byte offset.
class Reader {
 public:
  Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

  [[noreturn]] void fail(const std::string& msg) const { fail_at(msg, pos_); }
  [[noreturn]] void fail_at(const std::string& msg, std::size_t offset) const {
    throw IoError(what_ + ": " + msg + " at byte offset " + std::to_string(offset));
  }
  /// Truncation errors report the offset where the input ends.
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n)
      fail_at("truncated input (need " + std::to_string(n) + " bytes from offset " + std::to_string(pos_) + ")",
              buf_.size());
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t{static_cast<unsigned char>(buf_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace le

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

inline std::string encode_checkpoint(const ModelParams& p) {
  std::string out(kCheckpointMagic, 8);
  std::string tag = p.arch.tag();
  le::put_u32(out, static_cast<std::uint32_t>(tag.size()));
  out += tag;
  for (std::size_t i = 0; i < p.count(); ++i) {
    le::put_u32(out, static_cast<std::uint32_t>(p.names[i].size()));
    out += p.names[i];
    le::put_u32(out, static_cast<std::uint32_t>(p.tensors[i].rank()));
    for (auto d : p.tensors[i].shape()) le::put_u64(out, d);
    for (double v : p.tensors[i].values()) le::put_f64(out, v);
  }
  return out;
}

inline ModelParams decode_checkpoint(const std::string& buf) {
  le::Reader r(buf, "checkpoint");
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) throw IoError("checkpoint: bad magic at byte offset 0");
  ModelParams p{Architecture::parse(r.bytes(r.u32())), {}, {}};
  while (!r.done()) {
    std::string name = r.bytes(r.u32());
    std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::size_t n = numel(shape);
    r.need(n * 8);
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    p.names.push_back(std::move(name));
    p.tensors.emplace_back(std::move(shape), std::move(data));
  }
  auto layout = parameter_layout(p.arch);
  if (layout.size() != p.count()) throw IoError("checkpoint: parameter count does not match " + p.arch.tag());
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].first != p.names[i] || layout[i].second != p.tensors[i].shape())
      throw IoError("checkpoint: parameter " + p.names[i] + " does not match " + p.arch.tag());
  return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p) { write_file(path, encode_checkpoint(p)); }
inline ModelParams load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace xcr
