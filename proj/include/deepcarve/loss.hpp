#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcarve/tensor.hpp"

namespace deepcarve {

/// Target probabilities for the weak single-label encoding. The observed
/// attribute gets `positive`, every other attribute gets `negative`.
struct LabelEncoding {
  double positive = 0.95;
  double negative = 0.05;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // dLoss/dLogits, same shape as the logits
};

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax: expected [B,M] logits, got " + shape_string(logits.shape()));
  Tensor out = logits;
  const std::size_t m = logits.dim(1);
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    auto row = out.slice(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (std::size_t j = 0; j < m; ++j) row[j] /= z;
  }
  return out;
}

/// Mean negative log-likelihood of the labelled class under softmax.
inline LossResult softmax_nll(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0))
    throw std::invalid_argument("softmax_nll: " + std::to_string(labels.size()) + " labels for logits " +
                                shape_string(logits.shape()));
  const std::size_t b = logits.dim(0), m = logits.dim(1);
  for (std::size_t r = 0; r < b; ++r)
    if (labels[r] >= m)
      throw std::out_of_range("softmax_nll: label " + std::to_string(labels[r]) + " outside [0," + std::to_string(m) + ")");
  LossResult res{0.0, softmax(logits)};
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t r = 0; r < b; ++r) {
    auto row = logits.slice(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    // log p_y = l_y - mx - log z
    res.loss -= row[labels[r]] - mx - std::log(z);
    auto g = res.grad.slice(r);
    g[labels[r]] -= 1.0;
    for (auto& v : g) v *= inv_b;
  }
  res.loss *= inv_b;
  return res;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Mean (over the batch) of the summed per-attribute binary cross-entropy
/// between sigmoid(logits) and probability targets in [0,1]. Uses
/// softplus(x) - p*x so large logits never overflow.
inline LossResult sigmoid_ce(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape() || logits.rank() != 2)
    throw std::invalid_argument("sigmoid_ce: logits " + shape_string(logits.shape()) + " vs targets " +
                                shape_string(targets.shape()));
  for (double p : targets.data())
    if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("sigmoid_ce: target " + std::to_string(p) + " outside [0,1]");
  const double inv_b = 1.0 / static_cast<double>(logits.dim(0));
  LossResult res{0.0, Tensor::zeros(logits.shape())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i], p = targets[i];
    res.loss += std::max(x, 0.0) - x * p + std::log1p(std::exp(-std::abs(x)));
    res.grad[i] = (sigmoid(x) - p) * inv_b;
  }
  res.loss *= inv_b;
  return res;
}

/// Sigmoid cross-entropy against pseudo-label rows; same functional form as
/// sigmoid_ce with the carving targets substituted.
inline LossResult carving_loss(const Tensor& logits, const Tensor& pseudo_targets) {
  return sigmoid_ce(logits, pseudo_targets);
}

/// [B,M] weak targets: `positive` at each label, `negative` elsewhere.
inline Tensor weak_targets(std::span<const std::size_t> labels, std::size_t num_classes, const LabelEncoding& enc = {}) {
  if (labels.empty()) throw std::invalid_argument("weak_targets: no labels");
  Tensor t = Tensor::fill({labels.size(), num_classes}, enc.negative);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= num_classes) throw std::out_of_range("weak_targets: label out of range");
    t.at(r, labels[r]) = enc.positive;
  }
  return t;
}

/// Sum of binary entropies of the targets divided by the batch size: the
/// minimum value sigmoid_ce can reach for these targets.
inline double sigmoid_ce_lower_bound(const Tensor& targets) {
  double h = 0.0;
  for (double p : targets.data()) {
    if (p > 0.0) h -= p * std::log(p);
    if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  }
  return h / static_cast<double>(targets.dim(0));
}

}  // namespace deepcarve
