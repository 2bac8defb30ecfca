#pragma once

// Gradient-check cases shared by the unit tests and the acceptance binary.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "xcr/training.hpp"

namespace xcr::gradsuite {

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  RngStream rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Scalar readout that weights every output element differently, so a wrong
// gradient in any coordinate shows up.
inline Var readout(Tape& t, Var y, std::uint64_t seed = 99) {
  Tensor w = random_tensor(y.shape(), seed);
  return sum(mul(y, t.constant(w)));
}

// Every primitive at a random well-conditioned point.
struct PrimitiveCase {
  const char* name;
  Shape shape;
  std::function<Var(Tape&, Var)> f;
  double lo = -1.0, hi = 1.0;
};

inline Var with_const(Tape& t, Shape s, std::uint64_t seed) { return t.constant(random_tensor(std::move(s), seed)); }

inline std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"add", {3, 4}, [](Tape& t, Var x) { return readout(t, add(x, with_const(t, {3, 4}, 1))); }},
      {"add_rhs", {4}, [](Tape& t, Var x) { return readout(t, add(with_const(t, {3, 4}, 2), x)); }},
      {"add_scalar", {}, [](Tape& t, Var x) { return readout(t, add(with_const(t, {3, 4}, 3), x)); }},
      {"sub", {3, 4}, [](Tape& t, Var x) { return readout(t, sub(with_const(t, {3, 4}, 4), x)); }},
      {"sub_bias", {4}, [](Tape& t, Var x) { return readout(t, sub(with_const(t, {2, 3, 4}, 5), x)); }},
      {"mul", {3, 4}, [](Tape& t, Var x) { return readout(t, mul(x, with_const(t, {3, 4}, 6))); }},
      {"mul_self", {5}, [](Tape& t, Var x) { return readout(t, mul(x, x)); }},
      {"mul_bias", {4}, [](Tape& t, Var x) { return readout(t, mul(with_const(t, {3, 4}, 7), x)); }},
      {"mul_scalar", {}, [](Tape& t, Var x) { return readout(t, mul(with_const(t, {2, 5}, 8), x)); }},
      {"matmul_lhs", {3, 4}, [](Tape& t, Var x) { return readout(t, matmul(x, with_const(t, {4, 2}, 9))); }},
      {"matmul_rhs", {4, 2}, [](Tape& t, Var x) { return readout(t, matmul(with_const(t, {3, 4}, 10), x)); }},
      {"conv2d_input", {2, 2, 4, 5}, [](Tape& t, Var x) {
         return readout(t, conv2d(x, with_const(t, {3, 2, 3, 3}, 11), with_const(t, {3}, 12)));
       }},
      {"conv2d_weight", {3, 2, 3, 3}, [](Tape& t, Var w) {
         return readout(t, conv2d(with_const(t, {2, 2, 4, 5}, 13), w, with_const(t, {3}, 14)));
       }},
      {"conv2d_bias", {3}, [](Tape& t, Var b) {
         return readout(t, conv2d(with_const(t, {2, 2, 4, 5}, 15), with_const(t, {3, 2, 3, 3}, 16), b));
       }},
      // Kept away from the kink at 0 so finite differences stay one-sided-free.
      {"relu", {4, 5}, [](Tape& t, Var x) { return readout(t, relu(x)); }, 0.05, 1.0},
      {"relu_negative", {4, 5}, [](Tape& t, Var x) { return readout(t, relu(x)); }, -1.0, -0.05},
      {"avgpool2d", {2, 3, 4, 6}, [](Tape& t, Var x) { return readout(t, avgpool2d(x)); }},
      {"reshape", {2, 6}, [](Tape& t, Var x) { return readout(t, reshape(x, {3, 4})); }},
      {"exp", {6}, [](Tape& t, Var x) { return readout(t, exp(x)); }},
      {"log", {6}, [](Tape& t, Var x) { return readout(t, log(x)); }, 0.5, 2.0},
      {"maximum", {8}, [](Tape& t, Var x) {
         // Constant alternates well above and below the input range.
         Tensor c({8});
         for (std::size_t i = 0; i < 8; ++i) c[i] = i % 2 ? 5.0 : -5.0;
         return readout(t, maximum(x, t.constant(c)));
       }},
      {"maximum_rhs", {8}, [](Tape& t, Var x) {
         Tensor c({8});
         for (std::size_t i = 0; i < 8; ++i) c[i] = i % 2 ? 5.0 : -5.0;
         return readout(t, maximum(t.constant(c), x));
       }},
      {"sum_all", {3, 4}, [](Tape& t, Var x) { return mul(sum(x), t.constant(Tensor::scalar(0.7))); }},
      {"sum_axis0", {3, 4}, [](Tape& t, Var x) { return readout(t, sum(x, 0)); }},
      {"sum_axis1", {3, 4, 2}, [](Tape& t, Var x) { return readout(t, sum(x, 1)); }},
      {"mean_all", {3, 4}, [](Tape&, Var x) { return mean(x); }},
      {"mean_axis", {3, 4}, [](Tape& t, Var x) { return readout(t, mean(x, 1)); }},
      {"log_softmax", {3, 6}, [](Tape& t, Var x) { return readout(t, log_softmax(x)); }, -3.0, 3.0},
      {"upsample", {2, 1, 2, 3}, [](Tape& t, Var x) { return readout(t, upsample(x, 2, 3)); }},
  };
}

inline double small_cnn_grad_error() {
  Tensor w1 = random_tensor({2, 1, 3, 3}, 40), b1 = random_tensor({2}, 41), w2 = random_tensor({8, 3}, 42);
  Tensor x = random_tensor({2, 1, 4, 4}, 43, 0, 1);
  auto f = [&](Tape& t, Var w) {
    Var h = avgpool2d(relu(conv2d(t.constant(x), w, t.constant(b1))));
    Var logits = matmul(reshape(h, {2, 8}), t.constant(w2));
    return readout(t, log_softmax(logits));
  };
  return grad_check(f, w1);
}

/// The explainer objective checked against every selector and approximator
/// tensor, with the Gumbel noise frozen. Small widths keep it fast.
inline std::vector<std::pair<std::string, double>> ib_loss_grad_errors() {
  RngStream rng(4);
  const std::size_t B = 2;
  Tensor x(Shape{B, 1, 8, 8});
  for (auto& v : x.values()) v = rng.uniform();
  std::vector<int> y{0, 2};
  IBConfig ib;
  ib.k = 2;
  ib.patch_size = 2;
  ib.num_samples = 2;
  ib.tau = 0.5;
  ib.beta = 0.3;
  Architecture sa = Architecture::selector(1, 8, 8, 16);
  sa.conv1 = 3, sa.conv2 = 4;
  Architecture aa = Architecture::approximator(1, 8, 8, 3);
  aa.conv1 = 2, aa.conv2 = 3, aa.hidden = 5;
  ModelParams sel = init_params(sa, RngStream(5)), app = init_params(aa, RngStream(6));
  for (auto& t : sel.tensors)
    for (auto& v : t.values()) v += 0.3 * rng.normal();
  for (auto& t : app.tensors)
    for (auto& v : t.values()) v += 0.1 * rng.normal();
  auto noise = gumbel_batch(ib, B, 16, RngStream(7));

  auto check = [&](bool selector_side, std::size_t which) {
    const ModelParams& target = selector_side ? sel : app;
    return grad_check(
        [&](Tape& t, Var p) {
          std::vector<Var> sv, av;
          for (std::size_t i = 0; i < sel.count(); ++i)
            sv.push_back(selector_side && i == which ? p : t.constant(sel.tensors[i]));
          for (std::size_t i = 0; i < app.count(); ++i)
            av.push_back(!selector_side && i == which ? p : t.constant(app.tensors[i]));
          return explainer_objective(sel, sv, app, av, t.constant(x), y, ib, noise);
        },
        target.tensors[which]);
  };
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < sel.count(); ++i) out.emplace_back("selector." + sel.names[i], check(true, i));
  for (std::size_t i = 0; i < app.count(); ++i) out.emplace_back("approximator." + app.names[i], check(false, i));
  return out;
}

}  // namespace xcr::gradsuite
