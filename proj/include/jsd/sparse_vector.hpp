#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace jsd {

using TermId = std::uint32_t;

/// Non-negative term-importance vector over a vocabulary of `dim` terms.
/// Only strictly positive weights are stored, indices strictly increasing.
class SparseVector {
 public:
  SparseVector() = default;
  explicit SparseVector(std::size_t dim) : dim_(dim) {}

  /// Builds from sorted (term, weight) entries; validates the invariants.
  SparseVector(std::size_t dim, std::vector<TermId> terms, std::vector<double> weights)
      : dim_(dim), terms_(std::move(terms)), weights_(std::move(weights)) {
    if (terms_.size() != weights_.size()) throw ShapeError("sparse vector: terms/weights length differ");
    for (std::size_t i = 0; i < terms_.size(); ++i) {
      if (terms_[i] >= dim_)
        throw ShapeError("sparse vector: term " + std::to_string(terms_[i]) + " out of range " +
                         std::to_string(dim_));
      if (i > 0 && terms_[i] <= terms_[i - 1])
        throw FormatError("sparse vector: term indices must be strictly increasing");
      if (!(weights_[i] > 0.0) || !std::isfinite(weights_[i]))
        throw NumericError("sparse vector: weights must be finite and > 0");
    }
  }

  /// Keeps the strictly positive entries of a dense vector.
  static SparseVector from_dense(std::span<const double> dense) {
    SparseVector v(dense.size());
    for (std::size_t j = 0; j < dense.size(); ++j)
      if (dense[j] > 0.0) {
        v.terms_.push_back(static_cast<TermId>(j));
        v.weights_.push_back(dense[j]);
      }
    return v;
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t nnz() const noexcept { return terms_.size(); }
  bool empty() const noexcept { return terms_.empty(); }
  const std::vector<TermId>& terms() const noexcept { return terms_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  std::vector<double> densify() const {
    std::vector<double> d(dim_, 0.0);
    for (std::size_t i = 0; i < terms_.size(); ++i) d[terms_[i]] = weights_[i];
    return d;
  }

  double sum() const noexcept {
    double s = 0.0;
    for (double w : weights_) s += w;
    return s;
  }

  friend bool operator==(const SparseVector&, const SparseVector&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<TermId> terms_;
  std::vector<double> weights_;
};

}  // namespace jsd
