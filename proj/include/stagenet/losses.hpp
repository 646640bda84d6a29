#pragma once

// Softmax cross-entropy and its class-balanced variant, where every sample is
// weighted by the effective-number weight of its ground-truth class:
//
//   weight[y] = (1 - beta) / (1 - beta^n_y)
//
// beta = 0 gives no re-weighting; beta -> 1 approaches inverse class frequency.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stagenet/autodiff.hpp"
#include "stagenet/error.hpp"

namespace stagenet {

struct ClassWeights {
  double beta = 0.0;
  std::vector<std::size_t> class_counts;
  std::vector<double> weights;
  bool normalized = false;

  std::size_t num_classes() const { return weights.size(); }
};

inline ClassWeights effective_number_weights(std::span<const std::size_t> class_counts, double beta) {
  if (class_counts.empty()) throw ConfigError("class weights need at least one class");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1], got " + std::to_string(beta));
  ClassWeights out;
  out.beta = beta;
  out.class_counts.assign(class_counts.begin(), class_counts.end());
  out.weights.reserve(class_counts.size());
  for (std::size_t y = 0; y < class_counts.size(); ++y) {
    const std::size_t n = class_counts[y];
    if (n == 0) {
      throw ConfigError("class " + std::to_string(y) + " has no samples; its class-balanced weight is undefined");
    }
    const double nd = static_cast<double>(n);
    if (beta == 1.0) {
      out.weights.push_back(1.0 / nd);
      continue;
    }
    // 1 - beta^n evaluated as -expm1(n * log1p(-(1 - beta))) to stay
    // accurate when beta is within a few ulps of 1.
    const double one_minus_beta = 1.0 - beta;
    const double denom = -std::expm1(nd * std::log1p(-one_minus_beta));
    out.weights.push_back(one_minus_beta / denom);
  }
  return out;
}

// Rescales so the weights sum to the number of classes.
inline ClassWeights normalize_weights(const ClassWeights& w) {
  ClassWeights out = w;
  double total = 0.0;
  for (double v : w.weights) total += v;
  const double factor = static_cast<double>(w.weights.size()) / total;
  for (double& v : out.weights) v *= factor;
  out.normalized = true;
  return out;
}

// -log softmax(logits)[y], with max-subtraction. `logits` may have any shape;
// its flat values are the C class scores.
inline Tensor ce_loss(const Tensor& logits, std::size_t y) {
  const std::size_t c = logits.numel();
  if (y >= c) {
    throw IndexError("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
  }
  const auto p = logits.values();
  const auto top = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  const double mx = p[top];
  // z = 1 + rest; log1p keeps full precision when one logit dominates.
  double rest = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    if (j != top) rest += std::exp(p[j] - mx);
  }
  const double z = 1.0 + rest;
  const double loss = std::log1p(rest) - (p[y] - mx);
  return Tensor::from_op({}, {loss}, {logits}, [y, mx, z](detail::Node& self) {
    auto& ln = *self.parents[0];
    auto g = ln.grad_buffer();
    const double up = self.grad[0];
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double softmax = std::exp(ln.value[j] - mx) / z;
      g[j] += up * (softmax - (j == y ? 1.0 : 0.0));
    }
  });
}

namespace detail {

// Σ coeff_i * terms_i as one node.
inline Tensor weighted_scalar_sum(std::span<const Tensor> terms, std::vector<double> coeffs) {
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) acc += coeffs[i] * terms[i].item();
  std::vector<Tensor> operands(terms.begin(), terms.end());
  return Tensor::from_op({}, {acc}, std::move(operands), [coeffs = std::move(coeffs)](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& pn = *self.parents[i];
      if (pn.requires_grad) pn.grad_buffer()[0] += coeffs[i] * self.grad[0];
    }
  });
}

inline void check_batch(std::span<const Tensor> logits, std::span<const std::size_t> labels) {
  if (logits.empty()) throw ShapeError("empty batch");
  if (logits.size() != labels.size()) {
    throw ShapeError("batch has " + std::to_string(logits.size()) + " logit rows but " +
                     std::to_string(labels.size()) + " labels");
  }
}

}  // namespace detail

// Mean cross-entropy over the batch.
inline Tensor ce_loss(std::span<const Tensor> logits, std::span<const std::size_t> labels) {
  detail::check_batch(logits, labels);
  std::vector<Tensor> terms;
  terms.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) terms.push_back(ce_loss(logits[i], labels[i]));
  const double inv = 1.0 / static_cast<double>(terms.size());
  return detail::weighted_scalar_sum(terms, std::vector<double>(terms.size(), inv));
}

inline Tensor cbce_loss(const Tensor& logits, std::size_t y, const ClassWeights& weights) {
  if (weights.num_classes() != logits.numel()) {
    throw ShapeError("class weights have " + std::to_string(weights.num_classes()) + " entries for " +
                     std::to_string(logits.numel()) + " logits");
  }
  const Tensor term = ce_loss(logits, y);
  return detail::weighted_scalar_sum(std::span(&term, 1), {weights.weights[y]});
}

// Weighted mean: Σ w[y_i] CE_i / Σ w[y_i].
inline Tensor cbce_loss(std::span<const Tensor> logits, std::span<const std::size_t> labels,
                        const ClassWeights& weights) {
  detail::check_batch(logits, labels);
  std::vector<Tensor> terms;
  std::vector<double> coeffs;
  terms.reserve(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (weights.num_classes() != logits[i].numel()) {
      throw ShapeError("class weights have " + std::to_string(weights.num_classes()) + " entries for " +
                       std::to_string(logits[i].numel()) + " logits");
    }
    terms.push_back(ce_loss(logits[i], labels[i]));
    coeffs.push_back(weights.weights[labels[i]]);
    total += coeffs.back();
  }
  for (double& c : coeffs) c /= total;
  return detail::weighted_scalar_sum(terms, std::move(coeffs));
}

}  // namespace stagenet
