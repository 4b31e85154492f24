#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "model.hpp"
#include "sparse_vector.hpp"

namespace jsd {

/// Learnable temperature, stored as log(tau) so tau > 0 structurally.
struct Temperature {
  double log_tau = std::log(kDefaultTemperature);
  double value() const noexcept { return std::exp(log_tau); }
  static Temperature from_value(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be finite and > 0");
    return {std::log(tau)};
  }
};

struct IntegrationWeights {
  double dense = 0.3;   // w1
  double sparse = 0.7;  // w2

  void validate() const {
    if (!(dense >= 0.0) || !(sparse >= 0.0) || !(dense + sparse > 0.0) || !std::isfinite(dense) ||
        !std::isfinite(sparse))
      throw ConfigError("integration weights must be >= 0 with a positive sum");
  }
};

/// Rows are texts, columns are images.
struct ScoreTriple {
  Matrix dense;
  Matrix sparse;
  Matrix inter;

  std::size_t size() const noexcept { return dense.rows(); }
};

inline double dense_score(std::span<const double> text, std::span<const double> image, double tau) {
  if (text.size() != image.size())
    throw ShapeError("dense_score: dims " + std::to_string(text.size()) + " and " +
                     std::to_string(image.size()));
  return dot(text, image) / tau;
}

/// Merge over the sorted supports.
inline double sparse_score(const SparseVector& a, const SparseVector& b) noexcept {
  const auto& ta = a.terms();
  const auto& tb = b.terms();
  const auto& wa = a.weights();
  const auto& wb = b.weights();
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < ta.size() && j < tb.size()) {
    if (ta[i] < tb[j]) ++i;
    else if (tb[j] < ta[i]) ++j;
    else s += wa[i++] * wb[j++];
  }
  return s;
}

inline Matrix integrate(const Matrix& dense, const Matrix& sparse, const IntegrationWeights& w) {
  Matrix inter(dense.rows(), dense.cols());
  for (std::size_t i = 0; i < inter.size(); ++i)
    inter.data()[i] = w.dense * dense.data()[i] + w.sparse * sparse.data()[i];
  return inter;
}

inline ScoreTriple batch_scores(std::span<const Encoded> texts, std::span<const Encoded> images, double tau,
                                const IntegrationWeights& w) {
  if (texts.empty() || images.empty()) throw EmptyBatchError("batch_scores: empty batch");
  if (texts.size() != images.size())
    throw ShapeError("batch_scores: " + std::to_string(texts.size()) + " texts vs " +
                     std::to_string(images.size()) + " images");
  const std::size_t n = texts.size();
  ScoreTriple s{Matrix(n, n), Matrix(n, n), Matrix()};
  for (std::size_t m = 0; m < n; ++m)
    for (std::size_t j = 0; j < n; ++j) {
      s.dense(m, j) = dense_score(texts[m].dense, images[j].dense, tau);
      s.sparse(m, j) = sparse_score(texts[m].sparse, images[j].sparse);
    }
  s.inter = integrate(s.dense, s.sparse, w);
  return s;
}

}  // namespace jsd
