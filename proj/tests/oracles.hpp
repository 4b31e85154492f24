#pragma once

// Test-only reference computations. Nothing here calls into the code paths
// it is used to check: losses are written as plain loops without
// max-shifting, the t-test p-value comes from quadrature of the Student-t
// density, rankings from dense brute force.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "jsd/grad.hpp"
#include "jsd/index.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const jsd::Matrix& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

/// -(1/N) sum_m log(exp(S[m][m]) / sum_j exp(S[m][j])), rows or columns.
inline double infonce(const Mat& s, bool rows) {
  const std::size_t n = s.size();
  double total = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(rows ? s[m][j] : s[j][m]);
    total += -std::log(std::exp(s[m][m]) / denom);
  }
  return total / static_cast<double>(n);
}

inline double contrastive(const Mat& s) { return 0.5 * (infonce(s, true) + infonce(s, false)); }

inline std::vector<double> softmax_line(const Mat& s, std::size_t line, bool rows) {
  const std::size_t n = s.size();
  std::vector<double> p(n);
  double denom = 0.0;
  for (std::size_t j = 0; j < n; ++j) denom += std::exp(rows ? s[line][j] : s[j][line]);
  for (std::size_t j = 0; j < n; ++j) p[j] = std::exp(rows ? s[line][j] : s[j][line]) / denom;
  return p;
}

inline double cross_entropy(const Mat& teacher, const Mat& student) {
  const std::size_t n = teacher.size();
  double total = 0.0;
  for (bool rows : {true, false}) {
    double dir = 0.0;
    for (std::size_t m = 0; m < n; ++m) {
      const auto pt = softmax_line(teacher, m, rows);
      const auto ps = softmax_line(student, m, rows);
      for (std::size_t j = 0; j < n; ++j) dir -= pt[j] * std::log(ps[j]);
    }
    total += dir / static_cast<double>(n);
  }
  return total / 2.0;
}

inline double entropy(const Mat& t) {
  const std::size_t n = t.size();
  double total = 0.0;
  for (bool rows : {true, false}) {
    double dir = 0.0;
    for (std::size_t m = 0; m < n; ++m)
      for (double p : softmax_line(t, m, rows)) dir -= p * std::log(p);
    total += dir / static_cast<double>(n);
  }
  return total / 2.0;
}

struct Encoded {
  std::vector<double> h;
  std::vector<double> z;
};

inline Encoded encode(const std::vector<double>& p, const jsd::FinalLayerParams& layer, const jsd::ProjectionHead& head) {
  const std::size_t d = p.size();
  const std::size_t v = head.output_bias.size();
  Encoded e;
  e.h.assign(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = p[i] + layer.bias[i];
    for (std::size_t k = 0; k < d; ++k) acc += layer.weight(i, k) * p[k];
    e.h[i] = acc;
  }
  std::vector<double> g(d);
  for (std::size_t i = 0; i < d; ++i) {
    double a = head.hidden_bias[i];
    for (std::size_t k = 0; k < d; ++k) a += head.hidden_weight(i, k) * e.h[k];
    g[i] = a * 0.5 * std::erfc(-a / std::sqrt(2.0));
  }
  e.z.assign(v, 0.0);
  for (std::size_t j = 0; j < v; ++j) {
    double l = head.output_bias[j];
    for (std::size_t i = 0; i < d; ++i) l += head.output_weight(j, i) * g[i];
    e.z[j] = std::log(1.0 + std::max(0.0, l));
  }
  return e;
}

/// Straight-line evaluation of the full training objective.
inline double total_loss(const jsd::Model& model, const jsd::Batch& batch, const jsd::Objective& obj) {
  const std::size_t n = batch.texts.rows();
  std::vector<Encoded> t, im;
  for (std::size_t r = 0; r < n; ++r) {
    t.push_back(encode(std::vector<double>(batch.texts.row(r).begin(), batch.texts.row(r).end()), model.text, model.head));
    im.push_back(encode(std::vector<double>(batch.images.row(r).begin(), batch.images.row(r).end()), model.image, model.head));
  }
  const double tau = std::exp(model.log_tau);
  Mat dense(n, std::vector<double>(n)), sparse = dense, inter = dense;
  for (std::size_t m = 0; m < n; ++m)
    for (std::size_t j = 0; j < n; ++j) {
      double dd = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < t[m].h.size(); ++i) dd += t[m].h[i] * im[j].h[i];
      for (std::size_t i = 0; i < t[m].z.size(); ++i) ss += t[m].z[i] * im[j].z[i];
      dense[m][j] = dd / tau;
      sparse[m][j] = ss;
      inter[m][j] = obj.weights.dense * dense[m][j] + obj.weights.sparse * sparse[m][j];
    }
  double loss = obj.lambda.dense * contrastive(dense) + obj.lambda.sparse * contrastive(sparse) +
                obj.lambda.inter * contrastive(inter);
  if (obj.self_distillation) loss += (cross_entropy(inter, dense) + cross_entropy(inter, sparse)) / 2.0;
  double l1t = 0.0, l1i = 0.0;
  for (std::size_t m = 0; m < n; ++m)
    for (std::size_t j = 0; j < t[m].z.size(); ++j) l1t += t[m].z[j], l1i += im[m].z[j];
  const double frac = std::min(1.0, static_cast<double>(obj.step) / static_cast<double>(obj.schedule.warmup_steps));
  loss += obj.schedule.eta_text_max * frac * frac * l1t / static_cast<double>(n);
  loss += obj.schedule.eta_image_max * frac * frac * l1i / static_cast<double>(n);
  return loss;
}

/// Two-sided Student-t p-value: 1 - 2 * integral_0^|t| pdf, composite Simpson.
inline double student_t_two_sided(double t, double dof, int intervals = 200000) {
  const double x = std::abs(t);
  const double logc = std::lgamma((dof + 1.0) / 2.0) - std::lgamma(dof / 2.0) - 0.5 * std::log(dof * std::numbers::pi);
  auto pdf = [&](double u) { return std::exp(logc - (dof + 1.0) / 2.0 * std::log1p(u * u / dof)); };
  const double h = x / intervals;
  double s = pdf(0.0) + pdf(x);
  for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

inline double dense_dot(const jsd::SparseVector& a, const jsd::SparseVector& b) {
  const auto da = a.densify(), db = b.densify();
  double s = 0.0;
  for (std::size_t j = 0; j < da.size(); ++j) s += da[j] * db[j];
  return s;
}

/// Brute-force ranking: every doc with a positive score, ordered by score
/// then ascending id.
inline std::vector<jsd::Hit> brute_force_topk(const std::vector<jsd::IndexedDoc>& docs, const jsd::SparseVector& q,
                                              std::size_t k) {
  std::vector<jsd::Hit> all;
  for (const auto& d : docs) {
    const double s = dense_dot(q, d.vector);
    if (s > 0.0) all.push_back({d.id, s});
  }
  std::stable_sort(all.begin(), all.end(), [](const jsd::Hit& a, const jsd::Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc < b.doc;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

/// Mean |support(t) ∩ support(i)| over every text/image pair.
inline double pairwise_flops(const std::vector<jsd::SparseVector>& texts, const std::vector<jsd::SparseVector>& images) {
  double total = 0.0;
  for (const auto& t : texts)
    for (const auto& i : images) {
      const auto dt = t.densify(), di = i.densify();
      for (std::size_t j = 0; j < dt.size(); ++j) total += (dt[j] > 0.0 && di[j] > 0.0) ? 1.0 : 0.0;
    }
  return total / static_cast<double>(texts.size() * images.size());
}

inline jsd::SparseVector random_sparse(jsd::SplitMix64& rng, std::size_t dim, double density) {
  std::vector<double> d(dim, 0.0);
  for (auto& x : d)
    if (rng.uniform() < density) x = 0.05 + rng.uniform();
  return jsd::SparseVector::from_dense(d);
}

}  // namespace oracle
