#pragma once

// Hand-derived reverse pass over the fixed graph
//   penultimate -> final layer -> head -> log(1+relu) -> scores -> total loss,
// a central finite-difference checker for it, and the Adam update.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "errors.hpp"
#include "losses.hpp"
#include "matrix.hpp"
#include "model.hpp"
#include "scoring.hpp"

namespace jsd {

/// N matched pairs of frozen penultimate embeddings; row m of `texts`
/// describes row m of `images`.
struct Batch {
  Matrix texts;
  Matrix images;
  std::size_t size() const noexcept { return texts.rows(); }
};

struct Objective {
  LossWeights lambda;
  IntegrationWeights weights;
  SparsitySchedule schedule;
  bool self_distillation = true;
  std::uint64_t step = 0;
};

/// Gradient container; same shapes as the parameters it differentiates.
using GradSet = Model;

inline GradSet zeros_like(const Model& m) {
  GradSet g = m;
  for_each_tensor(g, [](const std::string&, std::span<double> t) { std::fill(t.begin(), t.end(), 0.0); });
  return g;
}

namespace detail {

struct SampleCache {
  std::vector<double> input;
  std::vector<double> h;
  HeadActivations act;
  std::vector<double> z;  // dense |V|
  Encoded encoded;
};

inline std::vector<SampleCache> forward_side(const Matrix& inputs, Side side, const Model& model) {
  std::vector<SampleCache> out(inputs.rows());
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    auto& c = out[r];
    c.input.assign(inputs.row(r).begin(), inputs.row(r).end());
    c.h = final_layer_forward(c.input, model.layer(side));
    c.act = head_forward(c.h, model.head);
    c.z = log_relu_dense(c.act.logits);
    c.encoded = {c.h, SparseVector::from_dense(c.z)};
  }
  return out;
}

struct Forward {
  std::vector<SampleCache> texts;
  std::vector<SampleCache> images;
  ScoreTriple scores;
  LossBreakdown loss;
};

inline void check_finite(const LossBreakdown& b) {
  const std::pair<const char*, double> terms[] = {
      {"contrastive_dense", b.contrastive_dense}, {"contrastive_sparse", b.contrastive_sparse},
      {"contrastive_inter", b.contrastive_inter}, {"distill_dense", b.distill_dense},
      {"distill_sparse", b.distill_sparse},       {"l1_text", b.l1_text},
      {"l1_image", b.l1_image},                   {"total", b.total}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term: ") + name);
}

inline Forward forward(const Model& model, const Batch& batch, const Objective& obj,
                       const Matrix* frozen_teacher = nullptr) {
  if (batch.size() == 0) throw EmptyBatchError("empty batch");
  if (batch.texts.rows() != batch.images.rows())
    throw ShapeError("batch: text and image counts differ");
  Forward f;
  f.texts = forward_side(batch.texts, Side::text, model);
  f.images = forward_side(batch.images, Side::image, model);
  std::vector<Encoded> te, ie;
  std::vector<SparseVector> zt, zi;
  for (const auto& c : f.texts) te.push_back(c.encoded), zt.push_back(c.encoded.sparse);
  for (const auto& c : f.images) ie.push_back(c.encoded), zi.push_back(c.encoded.sparse);
  f.scores = batch_scores(te, ie, model.tau(), obj.weights);
  f.loss = total_loss(f.scores, zt, zi, obj.lambda, obj.schedule, obj.step, obj.self_distillation,
                      frozen_teacher);
  return f;
}

/// Backpropagates d total / d z (dense |V|) and d total / d h through head
/// and final layer for one sample.
inline void backward_sample(const SampleCache& c, std::vector<double> dz, std::vector<double> dh,
                            const Model& model, FinalLayerParams& layer_grad, ProjectionHead& head_grad) {
  const auto& head = model.head;
  std::vector<double>& dlogit = dz;
  for (std::size_t j = 0; j < dlogit.size(); ++j) {
    const double l = c.act.logits[j];
    dlogit[j] = l > 0.0 ? dlogit[j] / (1.0 + l) : 0.0;
  }
  add_outer(head_grad.output_weight, dlogit, c.act.hidden);
  axpy(1.0, dlogit, head_grad.output_bias);
  auto dpre = matvec_transposed(head.output_weight, dlogit);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= gelu_derivative(c.act.pre_gelu[i]);
  add_outer(head_grad.hidden_weight, dpre, c.h);
  axpy(1.0, dpre, head_grad.hidden_bias);
  const auto dh_head = matvec_transposed(head.hidden_weight, dpre);
  axpy(1.0, dh_head, dh);
  add_outer(layer_grad.weight, dh, c.input);
  axpy(1.0, dh, layer_grad.bias);
}

}  // namespace detail

struct BackwardResult {
  LossBreakdown loss;
  GradSet grads;
};

/// Total loss and its gradient w.r.t. every Model tensor. Inputs receive no
/// gradient.
inline BackwardResult backward(const Model& model, const Batch& batch, const Objective& obj) {
  auto f = detail::forward(model, batch, obj);
  detail::check_finite(f.loss);
  const std::size_t n = batch.size();
  const std::size_t d = model.dim();
  const std::size_t v = model.vocab_size();
  const double tau = model.tau();
  const auto sg = score_gradients(f.scores, obj.lambda, obj.weights, obj.self_distillation);

  GradSet g = zeros_like(model);

  double dlog_tau = 0.0;
  for (std::size_t i = 0; i < sg.dense.size(); ++i) dlog_tau -= sg.dense.data()[i] * f.scores.dense.data()[i];
  g.log_tau = dlog_tau;

  const double l1_text = f.loss.eta_text / static_cast<double>(n);
  const double l1_image = f.loss.eta_image / static_cast<double>(n);

  for (std::size_t m = 0; m < n; ++m) {
    std::vector<double> dh(d, 0.0), dz(v, l1_text);
    for (std::size_t j = 0; j < n; ++j) {
      axpy(sg.dense(m, j) / tau, f.images[j].h, dh);
      if (sg.sparse(m, j) != 0.0) axpy(sg.sparse(m, j), f.images[j].z, dz);
    }
    detail::backward_sample(f.texts[m], std::move(dz), std::move(dh), model, g.text, g.head);
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> dh(d, 0.0), dz(v, l1_image);
    for (std::size_t m = 0; m < n; ++m) {
      axpy(sg.dense(m, j) / tau, f.texts[m].h, dh);
      if (sg.sparse(m, j) != 0.0) axpy(sg.sparse(m, j), f.texts[m].z, dz);
    }
    detail::backward_sample(f.images[j], std::move(dz), std::move(dh), model, g.image, g.head);
  }
  return {f.loss, std::move(g)};
}

inline LossBreakdown evaluate_loss(const Model& model, const Batch& batch, const Objective& obj,
                                   const Matrix* frozen_teacher = nullptr) {
  return detail::forward(model, batch, obj, frozen_teacher).loss;
}

/// s_inter at the given parameters; the constant distillation target.
inline Matrix teacher_scores(const Model& model, const Batch& batch, const Objective& obj) {
  return detail::forward(model, batch, obj).scores.inter;
}

// --------------------------------------------------------------------------
// Finite-difference verification

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;

  double max_rel_error() const noexcept {
    double m = 0.0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
    return m;
  }
  bool passed(double tolerance) const noexcept { return max_rel_error() <= tolerance; }
};

/// Machine-readable lines: name <TAB> max_rel_err <TAB> kink_count.
inline void write_report(std::ostream& os, const GradCheckReport& r) {
  for (const auto& t : r.tensors) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6e", t.max_rel_error);
    os << t.name << '\t' << buf << '\t' << t.kinks << '\n';
  }
}

inline double relative_error(double analytic, double numeric) noexcept {
  return std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic) + std::abs(numeric));
}

namespace detail {

/// relu on/off state of every logit in the batch.
inline std::vector<bool> activation_pattern(const Model& model, const Batch& batch) {
  std::vector<bool> pattern;
  for (auto [inputs, side] : {std::pair{&batch.texts, Side::text}, std::pair{&batch.images, Side::image}})
    for (std::size_t r = 0; r < inputs->rows(); ++r) {
      const auto h = final_layer_forward(inputs->row(r), model.layer(side));
      for (double l : head_forward(h, model.head).logits) pattern.push_back(l > 0.0);
    }
  return pattern;
}

}  // namespace detail

/// Central differences on every coordinate of every tensor. The distillation
/// teacher is held at its base-point value, so the numeric derivative is that
/// of the stop-gradient objective. A coordinate is a kink (excluded, counted)
/// when moving it by +/-10 eps flips any relu.
inline GradCheckReport finite_diff_check(const Model& params, const Batch& batch, const Objective& obj,
                                         double eps = 1e-5) {
  const auto analytic = backward(params, batch, obj).grads;
  std::vector<std::span<const double>> analytic_tensors;
  for_each_tensor(analytic, [&](const std::string&, std::span<const double> t) { analytic_tensors.push_back(t); });

  const auto base_pattern = detail::activation_pattern(params, batch);
  const Matrix teacher = teacher_scores(params, batch, obj);
  Model work = params;
  GradCheckReport report;
  std::size_t tensor_index = 0;
  for_each_tensor(work, [&](const std::string& name, std::span<double> t) {
    TensorCheck tc{name};
    const auto a = analytic_tensors[tensor_index++];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      bool kink = false;
      for (double shift : {10.0 * eps, -10.0 * eps}) {
        t[i] = orig + shift;
        if (detail::activation_pattern(work, batch) != base_pattern) kink = true;
      }
      if (kink) {
        t[i] = orig;
        ++tc.kinks;
        continue;
      }
      t[i] = orig + eps;
      const double up = evaluate_loss(work, batch, obj, &teacher).total;
      t[i] = orig - eps;
      const double down = evaluate_loss(work, batch, obj, &teacher).total;
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      tc.max_rel_error = std::max(tc.max_rel_error, relative_error(a[i], numeric));
      ++tc.checked;
    }
    report.tensors.push_back(std::move(tc));
  });
  return report;
}

/// Seeded problem used by the gradient-check gate: zero-initialised final
/// layers, freshly initialised head, synthetic planted-cluster pairs.
struct GradCheckProblem {
  Model model;
  Batch batch;
};

inline GradCheckProblem make_gradcheck_problem(std::uint64_t seed = 7, std::size_t n = 8, std::size_t d = 16,
                                               std::size_t vocab = 64) {
  SyntheticSpec spec;
  spec.n_images = n;
  spec.n_clusters = n;
  spec.captions_per_image = 1;
  spec.dim = d;
  spec.vocab_size = vocab;
  spec.noise_std = 0.1;
  spec.seed = seed;
  const auto data = generate_synthetic(spec);
  GradCheckProblem p;
  p.model = init_model(synthetic_word_embeddings(spec), seed);
  p.batch.texts = data.captions.to_matrix();
  p.batch.images = data.images.to_matrix();
  return p;
}

// --------------------------------------------------------------------------
// Adam with bias correction and decoupled weight decay

struct OptimizerState {
  GradSet first_moment;
  GradSet second_moment;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  static OptimizerState for_model(const Model& m, double lr) {
    OptimizerState s;
    s.first_moment = zeros_like(m);
    s.second_moment = zeros_like(m);
    s.learning_rate = lr;
    return s;
  }
};

inline void optimizer_step(Model& params, const GradSet& grads, OptimizerState& state) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  std::vector<std::span<const double>> g;
  for_each_tensor(grads, [&](const std::string&, std::span<const double> t) { g.push_back(t); });
  std::vector<std::span<double>> mm, vv;
  for_each_tensor(state.first_moment, [&](const std::string&, std::span<double> t) { mm.push_back(t); });
  for_each_tensor(state.second_moment, [&](const std::string&, std::span<double> t) { vv.push_back(t); });

  std::size_t k = 0;
  for_each_tensor(params, [&](const std::string& name, std::span<double> p) {
    const auto gt = g[k];
    auto m = mm[k];
    auto v = vv[k];
    ++k;
    if (gt.size() != p.size()) throw ShapeError("optimizer_step: gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gt[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gt[i] * gt[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + state.epsilon);
      if (state.weight_decay != 0.0 && name != "log_tau") update += state.weight_decay * p[i];
      p[i] -= state.learning_rate * update;
    }
  });
}

}  // namespace jsd
