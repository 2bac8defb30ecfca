#pragma once

// Dense primitives plus a reverse-mode tape over them.
//
// Every primitive exists in two forms: a pure function on Tensors, and an
// overload on Var that evaluates the same kernel and records a node on the
// owning Tape. backward() walks the tape in reverse and never mutates the
// recorded values.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "xcr/tensor.hpp"

namespace xcr {

enum class OpId {
  Leaf,
  Add,
  Sub,
  Mul,
  MatMul,
  Conv2d,
  Relu,
  AvgPool2d,
  Reshape,
  Exp,
  Log,
  Maximum,
  ReduceSum,
  ReduceMean,
  LogSoftmax,
  Upsample,
};

inline const char* op_name(OpId op) {
  switch (op) {
    case OpId::Leaf: return "leaf";
    case OpId::Add: return "add";
    case OpId::Sub: return "sub";
    case OpId::Mul: return "mul";
    case OpId::MatMul: return "matmul";
    case OpId::Conv2d: return "conv2d";
    case OpId::Relu: return "relu";
    case OpId::AvgPool2d: return "avgpool2d";
    case OpId::Reshape: return "reshape";
    case OpId::Exp: return "exp";
    case OpId::Log: return "log";
    case OpId::Maximum: return "maximum";
    case OpId::ReduceSum: return "reduce_sum";
    case OpId::ReduceMean: return "reduce_mean";
    case OpId::LogSoftmax: return "log_softmax";
    case OpId::Upsample: return "upsample";
  }
  return "?";
}

/// How the second operand of add/sub/mul lines up with the first.
enum class Broadcast { None, Bias, Scalar };

/// Reduce over every axis.
inline constexpr std::size_t kAllAxes = std::numeric_limits<std::size_t>::max();

namespace kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

[[noreturn]] inline void shape_error(OpId op, const Shape& a, const Shape& b) {
  throw ContractError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) + " and " +
                      shape_str(b));
}

inline Broadcast broadcast_mode(OpId op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (b.size() == 1 && b.rank() <= 1) return Broadcast::Scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::Bias;
  shape_error(op, a.shape(), b.shape());
}

template <class F>
Tensor binary(OpId op, const Tensor& a, const Tensor& b, F f) {
  Broadcast bc = broadcast_mode(op, a, b);
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = a.size();
  switch (bc) {
    case Broadcast::None:
      for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
      break;
    case Broadcast::Scalar: {
      double s = pb[0];
      for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], s);
      break;
    }
    case Broadcast::Bias: {
      std::size_t m = b.size();
      for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i % m]);
      break;
    }
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error(OpId::MatMul, a.shape(), b.shape());
  Tensor out({a.dim(0), b.dim(1)});
  MapMat(out.data(), a.dim(0), b.dim(1)).noalias() =
      CMapMat(a.data(), a.dim(0), a.dim(1)) * CMapMat(b.data(), b.dim(0), b.dim(1));
  return out;
}

/// Patch matrix of shape [C*9, B*H*W] for a 3x3, stride 1, zero-pad 1 kernel.
inline std::vector<double> im2col3x3(const Tensor& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = H * W, cols = B * hw;
  std::vector<double> out(C * 9 * cols, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = out.data() + ((c * 3 + ky) * 3 + kx) * cols;
        for (std::size_t b = 0; b < B; ++b) {
          const double* img = x.data() + (b * C + c) * hw;
          double* dst = row + b * hw;
          for (std::size_t y = 0; y < H; ++y) {
            std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            const double* src = img + static_cast<std::size_t>(sy) * W;
            for (std::size_t xx = 0; xx < W; ++xx) {
              std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(W)) dst[y * W + xx] = src[sx];
            }
          }
        }
      }
  return out;
}

inline void col2im3x3(const double* cols_data, Tensor& dx) {
  const std::size_t B = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const std::size_t hw = H * W, cols = B * hw;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols_data + ((c * 3 + ky) * 3 + kx) * cols;
        for (std::size_t b = 0; b < B; ++b) {
          double* img = dx.data() + (b * C + c) * hw;
          const double* src = row + b * hw;
          for (std::size_t y = 0; y < H; ++y) {
            std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            double* drow = img + static_cast<std::size_t>(sy) * W;
            for (std::size_t xx = 0; xx < W; ++xx) {
              std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(W)) drow[sx] += src[y * W + xx];
            }
          }
        }
      }
}

inline void check_conv(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != 3 || w.dim(3) != 3)
    shape_error(OpId::Conv2d, x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(0)) shape_error(OpId::Conv2d, w.shape(), bias.shape());
}

/// Returns the output; `cols` receives the patch matrix for the backward pass.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::vector<double>* cols = nullptr) {
  check_conv(x, w, bias);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
  const std::size_t hw = H * W, ncols = B * hw;
  std::vector<double> patches = im2col3x3(x);
  RowMat prod = CMapMat(w.data(), O, C * 9) * CMapMat(patches.data(), C * 9, ncols);
  Tensor out({B, O, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      const double* src = prod.data() + o * ncols + b * hw;
      double* dst = out.data() + (b * O + o) * hw;
      const double bo = bias[o];
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bo;
    }
  if (cols) *cols = std::move(patches);
  return out;
}

inline Tensor avgpool2d(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
    throw ContractError("avgpool2d: expected [B,C,H,W] with even H and W, got " + shape_str(x.shape()));
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), h = H / 2, w = W / 2;
  Tensor out({x.dim(0), x.dim(1), h, w});
  for (std::size_t p = 0; p < BC; ++p) {
    const double* src = x.data() + p * H * W;
    double* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const double* s = src + 2 * y * W + 2 * xx;
        dst[y * w + xx] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  return out;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  if (axis == kAllAxes) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return Tensor::scalar(acc);
  }
  if (axis >= x.rank()) throw ContractError("reduce_sum: axis out of range for " + shape_str(x.shape()));
  AxisSplit sp = split_axis(x.shape(), axis);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(s);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j) {
      const double* src = x.data() + (o * sp.n + j) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  return out;
}

inline std::size_t reduce_count(const Tensor& x, std::size_t axis) {
  return axis == kAllAxes ? x.size() : x.dim(axis);
}

inline Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw ContractError("log_softmax: scalar input");
  const std::size_t n = x.shape().back(), rows = n ? x.size() / n : 0;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data() + r * n;
    double* dst = out.data() + r * n;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, src[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(src[j] - m);
    double lse = m + std::log(s);
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] - lse;
  }
  return out;
}

inline Tensor upsample(const Tensor& x, std::size_t factor, std::size_t channels) {
  if (x.rank() != 4 || factor == 0 || (x.dim(1) != 1 && x.dim(1) != channels))
    throw ContractError("upsample: expected [B,1|C,h,w], got " + shape_str(x.shape()) + " for " +
                        std::to_string(channels) + " channels");
  const std::size_t B = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t H = h * factor, W = w * factor;
  Tensor out({B, channels, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const double* src = x.data() + (b * c_in + (c_in == 1 ? 0 : c)) * h * w;
      double* dst = out.data() + (b * channels + c) * H * W;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) dst[y * W + xx] = src[(y / factor) * w + xx / factor];
    }
  return out;
}

}  // namespace kernels

// ---- pure tensor forms ------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return kernels::binary(OpId::Add, a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return kernels::binary(OpId::Sub, a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return kernels::binary(OpId::Mul, a, b, [](double x, double y) { return x * y; });
}
inline Tensor matmul(const Tensor& a, const Tensor& b) { return kernels::matmul(a, b); }
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) { return kernels::conv2d(x, w, bias); }
inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}
inline Tensor avgpool2d(const Tensor& x) { return kernels::avgpool2d(x); }
inline Tensor reshape(const Tensor& x, Shape shape) { return x.reshaped(std::move(shape)); }
inline Tensor exp(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  return out;
}
inline Tensor log(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x[i]) + " at index " + std::to_string(i));
    out[i] = std::log(x[i]);
  }
  return out;
}
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) kernels::shape_error(OpId::Maximum, a.shape(), b.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
  return out;
}
inline Tensor sum(const Tensor& x, std::size_t axis = kAllAxes) { return kernels::reduce_sum(x, axis); }
inline Tensor mean(const Tensor& x, std::size_t axis = kAllAxes) {
  Tensor s = kernels::reduce_sum(x, axis);
  const double inv = 1.0 / static_cast<double>(kernels::reduce_count(x, axis));
  for (auto& v : s.values()) v *= inv;
  return s;
}
inline Tensor log_softmax(const Tensor& x) { return kernels::log_softmax(x); }
inline Tensor softmax(const Tensor& x) { return exp(log_softmax(x)); }
inline Tensor upsample(const Tensor& x, std::size_t factor, std::size_t channels) {
  return kernels::upsample(x, factor, channels);
}

// ---- tape ---------------------------------------------------------------------

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  struct Node {
    OpId op = OpId::Leaf;
    int a = -1, b = -1, c = -1;
    Tensor value;
    bool requires_grad = false;
    Broadcast bc = Broadcast::None;
    std::size_t axis = 0;
    std::size_t factor = 0;
    std::vector<double> saved;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) { return push(Node{.op = OpId::Leaf, .value = std::move(value), .requires_grad = true}); }
  /// Input excluded from gradient propagation.
  Var constant(Tensor value) { return push(Node{.op = OpId::Leaf, .value = std::move(value)}); }

  Var push(Node node) {
    node.requires_grad = node.requires_grad || needs(node.a) || needs(node.b) || needs(node.c);
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

 private:
  bool needs(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Broadcast bc = kernels::broadcast_mode(OpId::Add, a.value(), b.value());
  return t.push({.op = OpId::Add, .a = a.id, .b = b.id, .value = add(a.value(), b.value()), .bc = bc});
}
inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Broadcast bc = kernels::broadcast_mode(OpId::Sub, a.value(), b.value());
  return t.push({.op = OpId::Sub, .a = a.id, .b = b.id, .value = sub(a.value(), b.value()), .bc = bc});
}
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Broadcast bc = kernels::broadcast_mode(OpId::Mul, a.value(), b.value());
  return t.push({.op = OpId::Mul, .a = a.id, .b = b.id, .value = mul(a.value(), b.value()), .bc = bc});
}
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.push({.op = OpId::MatMul, .a = a.id, .b = b.id, .value = matmul(a.value(), b.value())});
}
inline Var conv2d(Var x, Var w, Var bias) {
  Tape& t = detail::same_tape(x, w);
  detail::same_tape(w, bias);
  Tape::Node n{.op = OpId::Conv2d, .a = x.id, .b = w.id, .c = bias.id};
  n.value = kernels::conv2d(x.value(), w.value(), bias.value(), &n.saved);
  return t.push(std::move(n));
}
inline Var relu(Var x) { return x.tape->push({.op = OpId::Relu, .a = x.id, .value = relu(x.value())}); }
inline Var avgpool2d(Var x) { return x.tape->push({.op = OpId::AvgPool2d, .a = x.id, .value = avgpool2d(x.value())}); }
inline Var reshape(Var x, Shape shape) {
  return x.tape->push({.op = OpId::Reshape, .a = x.id, .value = x.value().reshaped(std::move(shape))});
}
inline Var exp(Var x) { return x.tape->push({.op = OpId::Exp, .a = x.id, .value = exp(x.value())}); }
inline Var log(Var x) { return x.tape->push({.op = OpId::Log, .a = x.id, .value = log(x.value())}); }
inline Var maximum(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.push({.op = OpId::Maximum, .a = a.id, .b = b.id, .value = maximum(a.value(), b.value())});
}
inline Var sum(Var x, std::size_t axis = kAllAxes) {
  return x.tape->push({.op = OpId::ReduceSum, .a = x.id, .value = sum(x.value(), axis), .axis = axis});
}
inline Var mean(Var x, std::size_t axis = kAllAxes) {
  return x.tape->push({.op = OpId::ReduceMean, .a = x.id, .value = mean(x.value(), axis), .axis = axis});
}
inline Var log_softmax(Var x) {
  return x.tape->push({.op = OpId::LogSoftmax, .a = x.id, .value = log_softmax(x.value())});
}
inline Var upsample(Var x, std::size_t factor, std::size_t channels) {
  return x.tape->push(
      {.op = OpId::Upsample, .a = x.id, .value = upsample(x.value(), factor, channels), .factor = factor});
}

/// Gradients of one scalar output with respect to every recorded node.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> g) : g_(std::move(g)) {}
  const Tensor& operator[](Var v) const { return g_.at(static_cast<std::size_t>(v.id)); }
  const Tensor& at(int id) const { return g_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return g_.size(); }

 private:
  std::vector<Tensor> g_;
};

namespace detail {

inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

/// Folds a gradient of the broadcast result back onto the broadcast operand.
inline void accumulate_broadcast(Tensor& dst, const Tensor& grad, Broadcast bc, double sign) {
  switch (bc) {
    case Broadcast::None:
      for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += sign * grad[i];
      break;
    case Broadcast::Scalar: {
      double s = 0.0;
      for (double v : grad.values()) s += v;
      dst[0] += sign * s;
      break;
    }
    case Broadcast::Bias: {
      std::size_t m = dst.size();
      for (std::size_t i = 0; i < grad.size(); ++i) dst[i % m] += sign * grad[i];
      break;
    }
  }
}

}  // namespace detail

/// Reverse sweep from a scalar node. Nodes that do not depend on any leaf()
/// input receive zero gradients.
inline Gradients backward(const Tape& tape, Var loss) {
  using kernels::CMapMat;
  using kernels::MapMat;
  if (loss.tape != &tape) throw ContractError("backward: loss node belongs to another tape");
  if (loss.value().size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

  const int n = static_cast<int>(tape.size());
  std::vector<Tensor> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = Tensor(tape.node(i).value.shape());
  g[static_cast<std::size_t>(loss.id)][0] = 1.0;

  auto wants = [&](int id) { return id >= 0 && tape.node(id).requires_grad; };

  for (int i = loss.id; i >= 0; --i) {
    const Tape::Node& nd = tape.node(i);
    if (!nd.requires_grad || nd.op == OpId::Leaf) continue;
    const Tensor& dy = g[static_cast<std::size_t>(i)];
    Tensor* da = wants(nd.a) ? &g[static_cast<std::size_t>(nd.a)] : nullptr;
    Tensor* db = wants(nd.b) ? &g[static_cast<std::size_t>(nd.b)] : nullptr;
    const Tensor& a = tape.node(nd.a).value;

    switch (nd.op) {
      case OpId::Leaf:
        break;
      case OpId::Add:
        if (da) detail::accumulate(*da, dy);
        if (db) detail::accumulate_broadcast(*db, dy, nd.bc, 1.0);
        break;
      case OpId::Sub:
        if (da) detail::accumulate(*da, dy);
        if (db) detail::accumulate_broadcast(*db, dy, nd.bc, -1.0);
        break;
      case OpId::Mul: {
        const Tensor& b = tape.node(nd.b).value;
        if (da) {
          Tensor t = kernels::binary(OpId::Mul, dy, b, [](double x, double y) { return x * y; });
          detail::accumulate(*da, t);
        }
        if (db) detail::accumulate_broadcast(*db, mul(dy, a), nd.bc, 1.0);
        break;
      }
      case OpId::MatMul: {
        const Tensor& b = tape.node(nd.b).value;
        const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
                   p = static_cast<Eigen::Index>(b.dim(1));
        CMapMat G(dy.data(), m, p);
        if (da) MapMat(da->data(), m, k).noalias() += G * CMapMat(b.data(), k, p).transpose();
        if (db) MapMat(db->data(), k, p).noalias() += CMapMat(a.data(), m, k).transpose() * G;
        break;
      }
      case OpId::Conv2d: {
        const Tensor& w = tape.node(nd.b).value;
        const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3), O = w.dim(0);
        const std::size_t hw = H * W, ncols = B * hw;
        kernels::RowMat G(O, ncols);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o)
            std::copy_n(dy.data() + (b * O + o) * hw, hw, G.data() + o * ncols + b * hw);
        if (db) MapMat(db->data(), O, C * 9).noalias() += G * CMapMat(nd.saved.data(), C * 9, ncols).transpose();
        if (wants(nd.c)) {
          Tensor& dbias = g[static_cast<std::size_t>(nd.c)];
          for (std::size_t o = 0; o < O; ++o) dbias[o] += G.row(static_cast<Eigen::Index>(o)).sum();
        }
        if (da) {
          kernels::RowMat dcols = CMapMat(w.data(), O, C * 9).transpose() * G;
          kernels::col2im3x3(dcols.data(), *da);
        }
        break;
      }
      case OpId::Relu:
        if (da)
          for (std::size_t j = 0; j < a.size(); ++j) (*da)[j] += a[j] > 0.0 ? dy[j] : 0.0;
        break;
      case OpId::AvgPool2d:
        if (da) {
          const std::size_t BC = a.dim(0) * a.dim(1), H = a.dim(2), W = a.dim(3), h = H / 2, w = W / 2;
          for (std::size_t p = 0; p < BC; ++p)
            for (std::size_t y = 0; y < H; ++y)
              for (std::size_t x = 0; x < W; ++x)
                (*da)[p * H * W + y * W + x] += 0.25 * dy[p * h * w + (y / 2) * w + x / 2];
        }
        break;
      case OpId::Reshape:
        if (da) detail::accumulate(*da, dy);
        break;
      case OpId::Exp:
        if (da)
          for (std::size_t j = 0; j < a.size(); ++j) (*da)[j] += dy[j] * nd.value[j];
        break;
      case OpId::Log:
        if (da)
          for (std::size_t j = 0; j < a.size(); ++j) (*da)[j] += dy[j] / a[j];
        break;
      case OpId::Maximum: {
        const Tensor& b = tape.node(nd.b).value;
        for (std::size_t j = 0; j < a.size(); ++j) {
          if (a[j] >= b[j]) {
            if (da) (*da)[j] += dy[j];
          } else if (db) {
            (*db)[j] += dy[j];
          }
        }
        break;
      }
      case OpId::ReduceSum:
      case OpId::ReduceMean:
        if (da) {
          double scale = nd.op == OpId::ReduceMean ? 1.0 / static_cast<double>(kernels::reduce_count(a, nd.axis)) : 1.0;
          if (nd.axis == kAllAxes) {
            for (std::size_t j = 0; j < a.size(); ++j) (*da)[j] += scale * dy[0];
          } else {
            kernels::AxisSplit sp = kernels::split_axis(a.shape(), nd.axis);
            for (std::size_t o = 0; o < sp.outer; ++o)
              for (std::size_t k = 0; k < sp.n; ++k)
                for (std::size_t in = 0; in < sp.inner; ++in)
                  (*da)[(o * sp.n + k) * sp.inner + in] += scale * dy[o * sp.inner + in];
          }
        }
        break;
      case OpId::LogSoftmax:
        if (da) {
          const std::size_t m = a.shape().back(), rows = m ? a.size() / m : 0;
          for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += dy[r * m + j];
            for (std::size_t j = 0; j < m; ++j)
              (*da)[r * m + j] += dy[r * m + j] - std::exp(nd.value[r * m + j]) * s;
          }
        }
        break;
      case OpId::Upsample:
        if (da) {
          const std::size_t B = a.dim(0), c_in = a.dim(1), h = a.dim(2), w = a.dim(3);
          const std::size_t C = nd.value.dim(1), f = nd.factor, H = h * f, W = w * f;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* src = dy.data() + (b * C + c) * H * W;
              double* dst = da->data() + (b * c_in + (c_in == 1 ? 0 : c)) * h * w;
              for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) dst[(y / f) * w + x / f] += src[y * W + x];
            }
        }
        break;
    }
  }
  return Gradients(std::move(g));
}

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|), with
/// central differences of half-width `step`. Never throws on evaluation
/// failures; those coordinates report infinity.
inline double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double step = 1e-6) {
  Tensor analytic;
  try {
    Tape tape;
    Var x = tape.leaf(point);
    Var y = f(tape, x);
    analytic = backward(tape, y)[x];
  } catch (const std::exception&) {
    return std::numeric_limits<double>::infinity();
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    return f(tape, tape.leaf(p)).value().item();
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    double numeric;
    try {
      probe[i] = point[i] + step;
      double up = eval(probe);
      probe[i] = point[i] - step;
      double down = eval(probe);
      probe[i] = point[i];
      numeric = (up - down) / (2.0 * step);
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
    double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric));
    if (!(err <= worst)) worst = err;
  }
  return worst;
}

}  // namespace xcr
