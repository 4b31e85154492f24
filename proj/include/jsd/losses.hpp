#pragma once

// Training objectives over an N x N score matrix S (rows = texts, columns =
// images, matched pairs on the diagonal):
//
//   InfoNCE, one direction:  -(1/N) sum_m log softmax(S)[m, m]
//   contrastive L_s:          average of the text->image (row) and
//                             image->text (column) directions
//   L  = l1 L_dense + l2 L_sparse + l3 L_inter
//   L' = (CE(inter -> dense) + CE(inter -> sparse)) / 2, teacher detached
//   total = L + L' + eta_t * mean|z_t| + eta_i * mean|z_i|
//
// Every loss has a matching *_grad returning dLoss/dS of the same shape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "scoring.hpp"
#include "sparse_vector.hpp"

namespace jsd {

enum class Direction { rows, cols };  // rows: text->image, cols: image->text

struct LossWeights {
  double dense = 1.0;   // lambda1
  double sparse = 1.0;  // lambda2
  double inter = 1.0;   // lambda3

  void validate() const {
    for (double v : {dense, sparse, inter})
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
    if (!(dense + sparse + inter > 0.0)) throw ConfigError("at least one loss weight must be positive");
  }
};

struct SparsitySchedule {
  double eta_text_max = 0.0;
  double eta_image_max = 0.0;
  std::uint64_t warmup_steps = 1;

  void validate() const {
    if (!std::isfinite(eta_text_max) || !std::isfinite(eta_image_max) || eta_text_max < 0.0 ||
        eta_image_max < 0.0)
      throw ConfigError("sparsity weights must be finite and >= 0");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  }
};

struct LossBreakdown {
  double contrastive_dense = 0.0;
  double contrastive_sparse = 0.0;
  double contrastive_inter = 0.0;
  double contrastive = 0.0;  // L
  double distill_dense = 0.0;
  double distill_sparse = 0.0;
  double distill = 0.0;  // L'
  double l1_text = 0.0;
  double l1_image = 0.0;
  double eta_text = 0.0;
  double eta_image = 0.0;
  double total = 0.0;
};

namespace detail {

inline void require_square(const Matrix& s, const char* who) {
  if (s.rows() != s.cols() || s.rows() == 0)
    throw ShapeError(std::string(who) + ": expected a non-empty square matrix, got " +
                     std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
}

/// Log-softmax along rows (each row normalised) or columns.
inline Matrix log_softmax(const Matrix& s, Direction dir) {
  const std::size_t n = s.rows(), m = s.cols();
  Matrix out(n, m);
  const std::size_t outer = dir == Direction::rows ? n : m;
  const std::size_t inner = dir == Direction::rows ? m : n;
  auto at = [&](const Matrix& x, std::size_t o, std::size_t i) -> double {
    return dir == Direction::rows ? x(o, i) : x(i, o);
  };
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, at(s, o, i));
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += std::exp(at(s, o, i) - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t i = 0; i < inner; ++i) {
      const double v = at(s, o, i) - lse;
      if (dir == Direction::rows) out(o, i) = v;
      else out(i, o) = v;
    }
  }
  return out;
}

inline Matrix softmax(const Matrix& s, Direction dir) {
  Matrix p = log_softmax(s, dir);
  for (auto& v : p.data()) v = std::exp(v);
  return p;
}

}  // namespace detail

inline double infonce_directional(const Matrix& s, Direction dir) {
  detail::require_square(s, "infonce");
  const auto ls = detail::log_softmax(s, dir);
  double acc = 0.0;
  for (std::size_t m = 0; m < s.rows(); ++m) acc += ls(m, m);
  return -acc / static_cast<double>(s.rows());
}

inline Matrix infonce_directional_grad(const Matrix& s, Direction dir) {
  detail::require_square(s, "infonce");
  Matrix g = detail::softmax(s, dir);
  const double inv_n = 1.0 / static_cast<double>(s.rows());
  for (std::size_t m = 0; m < s.rows(); ++m) g(m, m) -= 1.0;
  for (auto& v : g.data()) v *= inv_n;
  return g;
}

inline double contrastive_bidirectional(const Matrix& s) {
  return 0.5 * (infonce_directional(s, Direction::rows) + infonce_directional(s, Direction::cols));
}

inline Matrix contrastive_bidirectional_grad(const Matrix& s) {
  Matrix g = infonce_directional_grad(s, Direction::rows);
  const Matrix gc = infonce_directional_grad(s, Direction::cols);
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = 0.5 * (g.data()[i] + gc.data()[i]);
  return g;
}

inline double combined_contrastive(const ScoreTriple& t, const LossWeights& w) {
  double total = 0.0;
  if (w.dense != 0.0) total += w.dense * contrastive_bidirectional(t.dense);
  if (w.sparse != 0.0) total += w.sparse * contrastive_bidirectional(t.sparse);
  if (w.inter != 0.0) total += w.inter * contrastive_bidirectional(t.inter);
  return total;
}

/// Mean (over both softmax directions and their rows) of the cross-entropy
/// H(softmax(teacher), softmax(student)). The teacher is a constant.
inline double distill_loss(const Matrix& teacher, const Matrix& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
    throw ShapeError("distill_loss: teacher and student shapes differ");
  detail::require_square(student, "distill_loss");
  double total = 0.0;
  for (Direction dir : {Direction::rows, Direction::cols}) {
    const auto pt = detail::softmax(teacher, dir);
    const auto ls = detail::log_softmax(student, dir);
    double ce = 0.0;
    for (std::size_t i = 0; i < pt.size(); ++i) ce -= pt.data()[i] * ls.data()[i];
    total += ce / static_cast<double>(student.rows());
  }
  return 0.5 * total;
}

/// d distill_loss / d student. Zero wherever the student softmax equals the
/// teacher's.
inline Matrix distill_loss_grad(const Matrix& teacher, const Matrix& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
    throw ShapeError("distill_loss: teacher and student shapes differ");
  detail::require_square(student, "distill_loss");
  Matrix g(student.rows(), student.cols());
  const double scale = 0.5 / static_cast<double>(student.rows());
  for (Direction dir : {Direction::rows, Direction::cols}) {
    const auto pt = detail::softmax(teacher, dir);
    const auto ps = detail::softmax(student, dir);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += scale * (ps.data()[i] - pt.data()[i]);
  }
  return g;
}

/// Mean softmax entropy over both directions; equals distill_loss(t, t).
inline double softmax_entropy(const Matrix& t) {
  detail::require_square(t, "softmax_entropy");
  double total = 0.0;
  for (Direction dir : {Direction::rows, Direction::cols}) {
    const auto ls = detail::log_softmax(t, dir);
    double h = 0.0;
    for (double v : ls.data()) h -= std::exp(v) * v;
    total += h / static_cast<double>(t.rows());
  }
  return 0.5 * total;
}

inline double total_distill(const ScoreTriple& t) {
  return 0.5 * (distill_loss(t.inter, t.dense) + distill_loss(t.inter, t.sparse));
}

inline double l1_penalty(std::span<const SparseVector> batch) {
  if (batch.empty()) return 0.0;
  double s = 0.0;
  for (const auto& v : batch) s += v.sum();
  return s / static_cast<double>(batch.size());
}

struct EtaPair {
  double text = 0.0;
  double image = 0.0;
};

/// eta(step) = eta_max * min(1, (step / warmup)^2)
inline EtaPair eta_at(std::uint64_t step, const SparsitySchedule& s) {
  const double r = std::min(1.0, static_cast<double>(step) / static_cast<double>(s.warmup_steps));
  const double f = step >= s.warmup_steps ? 1.0 : r * r;
  return {s.eta_text_max * f, s.eta_image_max * f};
}

/// `teacher`, when given, replaces s_inter as the distillation target (the
/// contrastive s_inter term always uses t.inter). Finite-difference checks
/// pass the base-point teacher to differentiate the stop-gradient objective.
inline LossBreakdown total_loss(const ScoreTriple& t, std::span<const SparseVector> z_text,
                                std::span<const SparseVector> z_image, const LossWeights& lambda,
                                const SparsitySchedule& schedule, std::uint64_t step,
                                bool self_distillation = true, const Matrix* teacher = nullptr) {
  LossBreakdown b;
  b.contrastive_dense = contrastive_bidirectional(t.dense);
  b.contrastive_sparse = contrastive_bidirectional(t.sparse);
  b.contrastive_inter = contrastive_bidirectional(t.inter);
  b.contrastive = lambda.dense * b.contrastive_dense + lambda.sparse * b.contrastive_sparse +
                  lambda.inter * b.contrastive_inter;
  if (self_distillation) {
    const Matrix& target = teacher != nullptr ? *teacher : t.inter;
    b.distill_dense = distill_loss(target, t.dense);
    b.distill_sparse = distill_loss(target, t.sparse);
    b.distill = 0.5 * (b.distill_dense + b.distill_sparse);
  }
  b.l1_text = l1_penalty(z_text);
  b.l1_image = l1_penalty(z_image);
  const auto eta = eta_at(step, schedule);
  b.eta_text = eta.text;
  b.eta_image = eta.image;
  b.total = b.contrastive + b.distill + eta.text * b.l1_text + eta.image * b.l1_image;
  return b;
}

struct ScoreGradients {
  Matrix dense;   // d total / d s_dense  (including the path through s_inter)
  Matrix sparse;  // d total / d s_sparse
};

/// Gradient of L + L' w.r.t. the two student score matrices. s_inter reaches
/// the students through the lambda3 contrastive term only; as a distillation
/// teacher it is a constant.
inline ScoreGradients score_gradients(const ScoreTriple& t, const LossWeights& lambda,
                                      const IntegrationWeights& w, bool self_distillation) {
  const std::size_t n = t.size();
  ScoreGradients g{Matrix(n, n), Matrix(n, n)};
  auto accumulate = [](Matrix& dst, double a, const Matrix& src) {
    if (a == 0.0) return;
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += a * src.data()[i];
  };
  accumulate(g.dense, lambda.dense, contrastive_bidirectional_grad(t.dense));
  accumulate(g.sparse, lambda.sparse, contrastive_bidirectional_grad(t.sparse));
  if (lambda.inter != 0.0) {
    const Matrix gi = contrastive_bidirectional_grad(t.inter);
    accumulate(g.dense, lambda.inter * w.dense, gi);
    accumulate(g.sparse, lambda.inter * w.sparse, gi);
  }
  if (self_distillation) {
    accumulate(g.dense, 0.5, distill_loss_grad(t.inter, t.dense));
    accumulate(g.sparse, 0.5, distill_loss_grad(t.inter, t.sparse));
  }
  return g;
}

}  // namespace jsd
