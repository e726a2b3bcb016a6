#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace deepcarve;

namespace {

Tensor random_logits(Rng& rng, std::size_t b, std::size_t m, double scale = 3.0) {
  Tensor t({b, m});
  for (auto& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

Tensor random_targets(Rng& rng, std::size_t b, std::size_t m) {
  Tensor t({b, m});
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

// Tighter check than the network one: every coordinate within `tol`.
double worst_rel_error(const std::function<LossResult(const Tensor&)>& loss, Tensor x) {
  const Tensor g = loss(x).grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + 1e-5;
    const double fp = loss(x).loss;
    x[i] = keep - 1e-5;
    const double fm = loss(x).loss;
    x[i] = keep;
    const double num = (fp - fm) / 2e-5;
    worst = std::max(worst, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(Softmax, Examples) {
  EXPECT_EQ(softmax(Tensor({1, 2}, {0, 0})), Tensor({1, 2}, {0.5, 0.5}));
  EXPECT_EQ(softmax(Tensor({1, 2}, {1000, 1000})), Tensor({1, 2}, {0.5, 0.5}));
  const Tensor p = softmax(Tensor({1, 2}, {std::log(2.0), std::log(1.0)}));
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(1);
  const Tensor x = random_logits(rng, 6, 5, 20.0);
  const Tensor p = softmax(x);
  const Tensor q = softmax(add_scalar(x, 123.456));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (double v : p.slice(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-9);
}

TEST(SoftmaxNll, Examples) {
  const std::vector<std::size_t> zero{0};
  EXPECT_NEAR(softmax_nll(Tensor({1, 2}, {0, 0}), zero).loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(softmax_nll(Tensor({1, 2}, {20, 0}), zero).loss, std::log1p(std::exp(-20.0)), 1e-15);
  EXPECT_NEAR(softmax_nll(Tensor({1, 2}, {20, 0}), zero).loss, 2.06e-9, 0.01e-9);
  const std::vector<std::size_t> two{1, 1};
  const std::vector<std::size_t> one{1};
  EXPECT_EQ(softmax_nll(Tensor({2, 3}, {0.1, 0.7, -0.3, 0.1, 0.7, -0.3}), two).loss,
            softmax_nll(Tensor({1, 3}, {0.1, 0.7, -0.3}), one).loss);
}

TEST(SoftmaxNll, GradientIsSoftmaxMinusOneHotOverB) {
  Rng rng(2);
  const Tensor x = random_logits(rng, 3, 4);
  const std::vector<std::size_t> y{0, 3, 1};
  const auto res = softmax_nll(x, y);
  const Tensor p = softmax(x);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t m = 0; m < 4; ++m) EXPECT_NEAR(res.grad.at(r, m), (p.at(r, m) - (m == y[r])) / 3.0, 1e-16);
}

TEST(SoftmaxNll, RejectsBadLabels) {
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(softmax_nll(Tensor::zeros({1, 2}), bad), std::out_of_range);
  const std::vector<std::size_t> short_labels{0};
  EXPECT_THROW(softmax_nll(Tensor::zeros({2, 2}), short_labels), std::invalid_argument);
}

TEST(SigmoidCe, Examples) {
  EXPECT_NEAR(sigmoid_ce(Tensor({1, 1}, {0}), Tensor({1, 1}, {0.5})).loss, std::log(2.0), 1e-15);
  const auto r = sigmoid_ce(Tensor({1, 1}, {0}), Tensor({1, 1}, {0.95}));
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(r.grad[0], -0.45, 1e-15);
}

TEST(SigmoidCe, LargeLogitsStayFinite) {
  const auto r = sigmoid_ce(Tensor({1, 2}, {800, -800}), Tensor({1, 2}, {0.95, 0.05}));
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 0.05 * 800 + 0.05 * 800, 1e-9);
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(SigmoidCe, MatchesTextbookFormAtModerateLogits) {
  Rng rng(3);
  const Tensor x = random_logits(rng, 4, 3);
  const Tensor p = random_targets(rng, 4, 3);
  double ref = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    ref -= p[i] * std::log(s) + (1 - p[i]) * std::log(1 - s);
  }
  EXPECT_NEAR(sigmoid_ce(x, p).loss, ref / 4.0, 1e-12);
}

TEST(SigmoidCe, RejectsTargetsOutsideUnitInterval) {
  EXPECT_THROW(sigmoid_ce(Tensor::zeros({1, 2}), Tensor({1, 2}, {0.5, 1.5})), std::domain_error);
  EXPECT_THROW(sigmoid_ce(Tensor::zeros({1, 2}), Tensor({1, 2}, {-0.1, 0.5})), std::domain_error);
  EXPECT_THROW(sigmoid_ce(Tensor::zeros({1, 2}), Tensor::zeros({2, 1})), std::invalid_argument);
}

TEST(SigmoidCe, EntropyLowerBound) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = random_targets(rng, 3, 4);
    const Tensor x = random_logits(rng, 3, 4);
    EXPECT_GE(sigmoid_ce(x, p).loss, sigmoid_ce_lower_bound(p) - 1e-12);
    // equality where sigmoid(x) == p
    const Tensor at = map(p, [](double q) { return std::log(q / (1 - q)); });
    EXPECT_NEAR(sigmoid_ce(at, p).loss, sigmoid_ce_lower_bound(p), 1e-12);
  }
}

TEST(CarvingLoss, DelegatesExactly) {
  Rng rng(5);
  const Tensor x = random_logits(rng, 5, 4);
  const Tensor p = random_targets(rng, 5, 4);
  const auto a = carving_loss(x, p), b = sigmoid_ce(x, p);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad, b.grad);

  const std::vector<std::size_t> y{0, 2, 1, 3, 3};
  EXPECT_EQ(carving_loss(x, weak_targets(y, 4)).loss, sigmoid_ce(x, weak_targets(y, 4)).loss);
  EXPECT_NEAR(carving_loss(Tensor::zeros({1, 4}), Tensor::fill({1, 4}, 0.5)).loss, 4 * std::log(2.0), 1e-15);
}

TEST(WeakTargets, Encoding) {
  const std::vector<std::size_t> y{2, 0};
  const Tensor t = weak_targets(y, 3);
  EXPECT_EQ(t, Tensor({2, 3}, {0.05, 0.05, 0.95, 0.95, 0.05, 0.05}));
  const Tensor u = weak_targets(y, 3, LabelEncoding{0.9, 0.1});
  EXPECT_EQ(u.at(0, 2), 0.9);
  EXPECT_EQ(u.at(0, 0), 0.1);
  const std::vector<std::size_t> bad{3};
  EXPECT_THROW(weak_targets(bad, 3), std::out_of_range);
}

TEST(Gradients, FiniteDifferencesTight) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_logits(rng, 5, 4);
    const Tensor p = random_targets(rng, 5, 4);
    const std::vector<std::size_t> y{0, 1, 2, 3, 1};
    EXPECT_LT(worst_rel_error([&](const Tensor& l) { return softmax_nll(l, y); }, x), 1e-6);
    EXPECT_LT(worst_rel_error([&](const Tensor& l) { return sigmoid_ce(l, p); }, x), 1e-6);
    EXPECT_LT(worst_rel_error([&](const Tensor& l) { return carving_loss(l, p); }, x), 1e-6);
  }
}
