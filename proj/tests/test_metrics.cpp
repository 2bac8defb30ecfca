#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "xcr/metrics.hpp"
#include "xcr/rng.hpp"

using namespace xcr;

namespace {

PredictionSet uniform_set(std::size_t n, std::size_t k) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % k);
  return {Tensor({n, k}, 1.0 / static_cast<double>(k)), y};
}

PredictionSet permute_instances(const PredictionSet& p, const std::vector<std::size_t>& perm) {
  PredictionSet out{gather_rows(p.probs, perm), {}};
  for (auto i : perm) out.labels.push_back(p.labels[i]);
  return out;
}

PredictionSet permute_classes(const PredictionSet& p, const std::vector<std::size_t>& sigma) {
  const std::size_t k = p.classes();
  PredictionSet out{Tensor(p.probs.shape()), {}};
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) out.probs[i * k + sigma[c]] = p.probs[i * k + c];
    out.labels.push_back(static_cast<int>(sigma[static_cast<std::size_t>(p.labels[i])]));
  }
  return out;
}

}  // namespace

// ---- calibration: examples ---------------------------------------------------------------

TEST(Ece, ConfidentAndCorrectIsZero) {
  PredictionSet p{Tensor::matrix({{1, 0, 0}, {0, 0, 1}}), {0, 2}};
  EXPECT_EQ(ece(p), 0.0);
}

TEST(Ece, SingleOccupiedBin) {
  PredictionSet p{Tensor::matrix({{0.8, 0.2}, {0.8, 0.2}}), {0, 1}};
  EXPECT_NEAR(ece(p, 15), 0.3, 1e-12);
}

TEST(Ece, RightClosedBinsAndZeroConfidence) {
  EXPECT_EQ(confidence_bin(0.0, 15), 0u);
  EXPECT_EQ(confidence_bin(1.0, 15), 14u);
  EXPECT_EQ(confidence_bin(0.5, 2), 0u);
  EXPECT_EQ(confidence_bin(std::nextafter(0.5, 1.0), 2), 1u);
  for (std::size_t b = 1; b <= 15; ++b) {
    double edge = static_cast<double>(b) / 15.0;
    EXPECT_EQ(confidence_bin(edge, 15), b - 1) << b;
    if (b < 15) {
      EXPECT_EQ(confidence_bin(std::nextafter(edge, 2.0), 15), b) << b;
    }
  }
}

TEST(Ece, ContractViolations) {
  PredictionSet empty{Tensor({0, 3}), {}};
  EXPECT_THROW(ece(empty), ContractError);
  EXPECT_THROW(ece(uniform_set(4, 2), 0), ContractError);
}

TEST(Nll, Examples) {
  PredictionSet perfect{Tensor::matrix({{0, 1}, {1, 0}}), {1, 0}};
  EXPECT_EQ(nll(perfect), 0.0);
  PredictionSet half{Tensor::matrix({{0.5, 0.5}}), {1}};
  EXPECT_NEAR(nll(half), 0.6931471805599453, 1e-12);
  EXPECT_NEAR(nll(uniform_set(20, 10)), std::log(10.0), 1e-12);
}

TEST(Nll, ZeroProbabilityIsFloored) {
  PredictionSet p{Tensor::matrix({{1, 0}}), {1}};
  EXPECT_NEAR(nll(p), -std::log(1e-12), 1e-9);
}

TEST(Brier, Examples) {
  PredictionSet perfect{Tensor::matrix({{0, 1}, {1, 0}}), {1, 0}};
  EXPECT_EQ(brier(perfect), 0.0);
  EXPECT_NEAR(brier(uniform_set(6, 2)), 0.5, 1e-12);
  EXPECT_NEAR(brier(uniform_set(30, 10)), 0.9, 1e-12);
  EXPECT_NEAR(brier(uniform_set(30, 10)), (0.9 * 0.9) + 9 * 0.01, 1e-12);
}

TEST(Accuracy, TiesGoToLowestIndex) {
  PredictionSet p{Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}}), {0, 1}};
  EXPECT_EQ(accuracy(p), 0.5);
}

TEST(PredictionSet, Validation) {
  EXPECT_NO_THROW(uniform_set(3, 3).validate());
  PredictionSet bad_row{Tensor::matrix({{0.5, 0.4}}), {0}};
  EXPECT_THROW(bad_row.validate(), ContractError);
  PredictionSet bad_label{Tensor::matrix({{0.5, 0.5}}), {2}};
  EXPECT_THROW(bad_label.validate(), ContractError);
}

// ---- calibration: properties --------------------------------------------------------------

TEST(CalibrationOracle, ThousandRandomSets) {
  RngStream rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t n = 1 + rng.uniform_int(80), k = 2 + rng.uniform_int(9);
    PredictionSet p = oracle::random_set(rng, n, k, 0.2 + 4.0 * rng.uniform());
    ASSERT_NO_THROW(p.validate());
    EXPECT_NEAR(ece(p, 15), oracle::ece(p.probs, p.labels, 15), 1e-12) << trial;
    EXPECT_NEAR(nll(p), oracle::nll(p.probs, p.labels), 1e-12) << trial;
    EXPECT_NEAR(brier(p), oracle::brier(p.probs, p.labels), 1e-12) << trial;
    std::size_t bins = 1 + rng.uniform_int(30);
    EXPECT_NEAR(ece(p, bins), oracle::ece(p.probs, p.labels, bins), 1e-12) << trial << " bins " << bins;
  }
}

TEST(CalibrationOracle, OneBinIsAccuracyMinusConfidence) {
  RngStream rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    PredictionSet p = oracle::random_set(rng, 1 + rng.uniform_int(50), 5, 2.0);
    double conf = 0;
    for (std::size_t i = 0; i < p.size(); ++i) conf += p.probs[i * 5 + argmax_row(p.probs.data() + i * 5, 5)];
    const auto n = static_cast<double>(p.size());
    EXPECT_EQ(ece(p, 1), std::fabs(accuracy(p) - conf / n));
  }
}

// Reordering changes only floating-point summation order.
TEST(CalibrationOracle, InstancePermutationInvariance) {
  RngStream rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    PredictionSet p = oracle::random_set(rng, 40, 6, 2.0);
    std::vector<std::size_t> perm(40);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    PredictionSet q = permute_instances(p, perm);
    EXPECT_NEAR(ece(p), ece(q), 1e-12);
    EXPECT_NEAR(nll(p), nll(q), 1e-12);
    EXPECT_NEAR(brier(p), brier(q), 1e-12);
    EXPECT_EQ(accuracy(p), accuracy(q));
  }
}

TEST(CalibrationOracle, LabelPermutationInvariance) {
  RngStream rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    PredictionSet p = oracle::random_set(rng, 30, 7, 2.0);
    std::vector<std::size_t> sigma(7);
    std::iota(sigma.begin(), sigma.end(), std::size_t{0});
    rng.shuffle(sigma);
    PredictionSet q = permute_classes(p, sigma);
    EXPECT_EQ(ece(p), ece(q));
    EXPECT_EQ(nll(p), nll(q));
    EXPECT_NEAR(brier(p), brier(q), 1e-12);
    EXPECT_EQ(accuracy(p), accuracy(q));
  }
}

// ---- explanation metrics -------------------------------------------------------------------

namespace {

// Two-class model whose confidence depends on total image brightness.
Tensor brightness_model(const Tensor& x) {
  const std::size_t b = x.dim(0), per = x.size() / b;
  Tensor out({b, 2});
  for (std::size_t i = 0; i < b; ++i) {
    double s = std::accumulate(x.values().begin() + static_cast<long>(i * per),
                               x.values().begin() + static_cast<long>((i + 1) * per), 0.0);
    double p = s > 8.0 ? 0.9 : 0.7;
    out[i * 2] = p, out[i * 2 + 1] = 1 - p;
  }
  return out;
}

Tensor constant_model(const Tensor& x) {
  Tensor out({x.dim(0), 3});
  for (std::size_t i = 0; i < x.dim(0); ++i) out[i * 3] = 0.2, out[i * 3 + 1] = 0.5, out[i * 3 + 2] = 0.3;
  return out;
}

}  // namespace

TEST(Sufficiency, FullRetentionIsZero) {
  RngStream rng(5);
  Tensor x({3, 1, 4, 4});
  for (auto& v : x.values()) v = rng.uniform();
  Tensor scores({3, 4});
  for (auto& v : scores.values()) v = rng.normal();
  Classifier f = [](const Tensor& t) { return softmax(reshape(t, {t.dim(0), 16})); };
  EXPECT_EQ(sufficiency(f, x, scores, 1.0, PatchGrid::for_images(x, 2)), 0.0);
}

TEST(Sufficiency, ConstantModelIsZero) {
  Tensor x({2, 1, 4, 4}, 0.5), scores({2, 4});
  EXPECT_EQ(sufficiency(constant_model, x, scores, 0.25, PatchGrid::for_images(x, 2)), 0.0);
}

TEST(Sufficiency, HandArithmetic) {
  Tensor x({1, 1, 4, 4}, 1.0);
  Tensor scores = Tensor::matrix({{0.1, 0.9, 0.3, 0.2}});
  // One of four patches survives, so brightness falls from 16 to 4: 0.9 -> 0.7.
  EXPECT_NEAR(sufficiency(brightness_model, x, scores, 0.25, PatchGrid::for_images(x, 2)), 0.2, 1e-12);
}

TEST(Sufficiency, CeilingOfRetainedFraction) {
  EXPECT_EQ(retained_patches(0.25, 64), 16u);
  EXPECT_EQ(retained_patches(0.3, 10), 3u);
  EXPECT_EQ(retained_patches(0.31, 10), 4u);
  EXPECT_EQ(retained_patches(0.001, 10), 1u);
  EXPECT_EQ(retained_patches(1.0, 7), 7u);
  EXPECT_THROW(retained_patches(0.0, 4), ContractError);
  EXPECT_THROW(retained_patches(1.5, 4), ContractError);
}

TEST(AverageDrop, Examples) {
  EXPECT_EQ(average_drop({0.3, 0.8}, {0.3, 0.8}), 0.0);
  EXPECT_NEAR(average_drop({0.8}, {0.4}), 0.5, 1e-15);
  EXPECT_EQ(average_drop({0.2, 0.5}, {0.3, 0.9}), 0.0);
  EXPECT_NEAR(average_drop({0.8, 0.5}, {0.4, 0.9}), 0.25, 1e-15);
}

TEST(AverageDrop, NonPositiveBaselineIsContractViolation) {
  EXPECT_THROW(average_drop({0.0}, {0.1}), ContractError);
  EXPECT_THROW(average_drop({0.5, -0.1}, {0.1, 0.1}), ContractError);
  EXPECT_THROW(average_drop({}, {}), ContractError);
}

TEST(AverageIncrease, Examples) {
  EXPECT_EQ(average_increase({0.1, 0.2}, {0.3, 0.4}), 1.0);
  EXPECT_EQ(average_increase({0.1, 0.2}, {0.1, 0.2}), 0.0);
  EXPECT_EQ(average_increase({0.5, 0.5}, {0.6, 0.4}), 0.5);
}

TEST(Fidelity, Examples) {
  RngStream rng(6);
  Tensor x({4, 1, 2, 2});
  for (auto& v : x.values()) v = rng.uniform();
  Classifier f = [](const Tensor& t) { return reshape(t, {t.dim(0), 4}); };
  EXPECT_EQ(fidelity(f, x, x), 1.0);
  Tensor other({4, 1, 2, 2});
  for (auto& v : other.values()) v = rng.uniform();
  EXPECT_EQ(fidelity(constant_model, x, other), 1.0);

  Tensor a = Tensor({2, 1, 1, 2}, std::vector<double>{0.9, 0.1, 0.2, 0.8});
  Tensor b = Tensor({2, 1, 1, 2}, std::vector<double>{0.1, 0.9, 0.3, 0.7});
  Classifier g = [](const Tensor& t) { return reshape(t, {t.dim(0), 2}); };
  EXPECT_EQ(fidelity(g, a, b), 0.5);
}

TEST(Fidelity, MisalignedBatchesRejected) {
  EXPECT_THROW(fidelity(constant_model, Tensor({2, 1, 2, 2}), Tensor({3, 1, 2, 2})), ContractError);
}

TEST(ExplanationMetrics, PermutationInvariance) {
  RngStream rng(7);
  std::vector<double> y(25), e(25);
  for (auto& v : y) v = 0.05 + 0.9 * rng.uniform();
  for (auto& v : e) v = rng.uniform();
  std::vector<std::size_t> perm(25);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  std::vector<double> yp, ep;
  for (auto i : perm) yp.push_back(y[i]), ep.push_back(e[i]);
  EXPECT_NEAR(average_drop(y, e), average_drop(yp, ep), 1e-15);
  EXPECT_EQ(average_increase(y, e), average_increase(yp, ep));
}

// ---- report rows ----------------------------------------------------------------------------

TEST(Report, CsvRoundTripWithMissingValues) {
  MetricsReport a;
  a.key = {"xcr", "test", "gaussian_noise", 3, 2, true};
  a.temperature = 1.5;
  a.accuracy = 0.875;
  a.ece = 0.0123456789012345;
  a.nll = 0.3;
  a.brier = 0.2;
  MetricsReport b;
  b.key = {"vanilla", "test", "none", 0, 1, false};
  b.accuracy = 1.0 / 3.0;
  b.fidelity = 0.9;
  b.ece_bins = 10;
  std::stringstream ss;
  write_report_csv(ss, {a, b});
  std::string text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "variant,split,corruption,severity,seed,temperature_scaled,ece_bins,temperature,accuracy,ece,nll,brier,"
            "sufficiency,avg_drop,avg_increase,fidelity");
  auto rows = read_report_csv(ss);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].key, a.key);
  EXPECT_EQ(rows[0].ece, a.ece);
  EXPECT_FALSE(rows[0].fidelity.has_value());
  EXPECT_EQ(rows[1].accuracy, b.accuracy);
  EXPECT_EQ(rows[1].ece_bins, 10u);
  EXPECT_FALSE(rows[1].temperature.has_value());
}

TEST(Report, RejectsNonFiniteAndOutOfRange) {
  MetricsReport r;
  r.nll = INFINITY;
  EXPECT_THROW(r.validate(), ContractError);
  r = {};
  r.ece = 1.5;
  EXPECT_THROW(r.validate(), ContractError);
  r = {};
  r.accuracy = 0.5;
  EXPECT_NO_THROW(r.validate());
}
