#pragma once

// Epoch loop: seeded batching (one sampled caption per image, all images in
// a batch distinct), sparsity warm-up, ablation switches, validation and
// best-checkpoint tracking by validation sparse MRR@10.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "data_model.hpp"
#include "eval.hpp"
#include "grad.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace jsd {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 10;
  double learning_rate = 1e-3;
  LossWeights lambda;
  IntegrationWeights weights;
  SparsitySchedule schedule{0.01, 0.01, 500};
  bool self_distillation = true;
  bool finetune_final_layer = true;
  std::uint64_t seed = 7;
  std::size_t val_every = 1;
  double head_init_noise = 0.01;
  double initial_tau = kDefaultTemperature;
  double weight_decay = 0.0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (val_every < 1) throw ConfigError("val_every must be >= 1");
    if (!(initial_tau > 0.0)) throw ConfigError("initial_tau must be > 0");
    lambda.validate();
    weights.validate();
    schedule.validate();
  }
};

struct BatchPlan {
  std::vector<std::size_t> image_rows;
  std::vector<std::size_t> caption_rows;
};

/// Shuffles images with a stream keyed by (seed, epoch), cuts them into
/// batches of exactly n (a short tail is dropped) and samples one caption per
/// image uniformly.
inline std::vector<BatchPlan> make_batches(const ResolvedPairs& data, std::size_t n, std::uint64_t seed,
                                           std::uint64_t epoch) {
  if (data.size() == 0) throw ConfigError("make_batches: empty dataset");
  if (n > data.size())
    throw ConfigError("batch size " + std::to_string(n) + " exceeds the " + std::to_string(data.size()) +
                      " available images");
  if (n == 0) throw ConfigError("batch size must be positive");
  SplitMix64 rng(derive_seed(derive_seed(seed, 0xba7c4), epoch));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<BatchPlan> batches;
  for (std::size_t start = 0; start + n <= order.size(); start += n) {
    BatchPlan b;
    for (std::size_t i = start; i < start + n; ++i) {
      const std::size_t p = order[i];
      const auto& caps = data.caption_rows[p];
      b.image_rows.push_back(data.image_rows[p]);
      b.caption_rows.push_back(caps[rng.below(caps.size())]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

inline Batch materialize(const BatchPlan& plan, const EmbeddingTable& images, const EmbeddingTable& captions) {
  const std::size_t d = images.dim();
  Batch b{Matrix(plan.image_rows.size(), d), Matrix(plan.image_rows.size(), d)};
  for (std::size_t m = 0; m < plan.image_rows.size(); ++m) {
    const auto t = captions.row(plan.caption_rows[m]);
    const auto i = images.row(plan.image_rows[m]);
    std::copy(t.begin(), t.end(), b.texts.row(m).begin());
    std::copy(i.begin(), i.end(), b.images.row(m).begin());
  }
  return b;
}

struct TrainData {
  const EmbeddingTable& images;
  const EmbeddingTable& captions;
  ResolvedPairs train;
  ResolvedPairs val;
  Matrix word_embeddings;
};

struct ValidationRecord {
  MetricReport sparse;
  MetricReport dense;
  double flops = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before the first update
  std::uint64_t steps = 0;
  LossBreakdown mean_loss;
  double tau = 0.0;
  std::optional<ValidationRecord> validation;

  nlohmann::json to_json() const {
    const auto& l = mean_loss;
    nlohmann::json j{{"epoch", epoch},
                     {"steps", steps},
                     {"tau", tau},
                     {"loss",
                      {{"contrastive_dense", l.contrastive_dense},
                       {"contrastive_sparse", l.contrastive_sparse},
                       {"contrastive_inter", l.contrastive_inter},
                       {"contrastive", l.contrastive},
                       {"distill_dense", l.distill_dense},
                       {"distill_sparse", l.distill_sparse},
                       {"distill", l.distill},
                       {"l1_text", l.l1_text},
                       {"l1_image", l.l1_image},
                       {"eta_text", l.eta_text},
                       {"eta_image", l.eta_image},
                       {"total", l.total}}}};
    if (validation) {
      j["val"] = {{"sparse", validation->sparse.to_json()},
                  {"dense", validation->dense.to_json()},
                  {"flops", validation->flops}};
    }
    return j;
  }
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool diverged = false;
  std::string divergence_reason;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  TrainReport report;
};

namespace detail {

inline void accumulate(LossBreakdown& acc, const LossBreakdown& b, double scale) {
  acc.contrastive_dense += scale * b.contrastive_dense;
  acc.contrastive_sparse += scale * b.contrastive_sparse;
  acc.contrastive_inter += scale * b.contrastive_inter;
  acc.contrastive += scale * b.contrastive;
  acc.distill_dense += scale * b.distill_dense;
  acc.distill_sparse += scale * b.distill_sparse;
  acc.distill += scale * b.distill;
  acc.l1_text += scale * b.l1_text;
  acc.l1_image += scale * b.l1_image;
  acc.eta_text += scale * b.eta_text;
  acc.eta_image += scale * b.eta_image;
  acc.total += scale * b.total;
}

inline bool all_finite(const Model& m) {
  bool ok = true;
  for_each_tensor(m, [&](const std::string&, std::span<const double> t) {
    for (double v : t) ok = ok && std::isfinite(v);
  });
  return ok;
}

}  // namespace detail

inline Model initial_model(const TrainConfig& cfg, const Matrix& word_embeddings) {
  Model m = init_model(word_embeddings, cfg.seed, cfg.head_init_noise);
  m.log_tau = std::log(cfg.initial_tau);
  return m;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult fit(const TrainConfig& cfg, const TrainData& data, std::uint64_t config_hash = 0,
                       const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.word_embeddings.cols() != data.images.dim() || data.captions.dim() != data.images.dim())
    throw ShapeError("fit: embedding dimensions disagree");

  Model model = initial_model(cfg, data.word_embeddings);
  OptimizerState opt = OptimizerState::for_model(model, cfg.learning_rate);
  opt.weight_decay = cfg.weight_decay;

  Objective obj;
  obj.lambda = cfg.lambda;
  obj.weights = cfg.weights;
  obj.schedule = cfg.schedule;
  obj.self_distillation = cfg.self_distillation;

  TrainResult result;
  auto& report = result.report;
  double best_mrr = -1.0;
  std::uint64_t step = 0;

  auto validate = [&](EpochRecord& rec) {
    if (data.val.size() == 0) return;
    const auto ev = evaluate_retrieval(model, data.images, data.captions, data.val);
    rec.validation = ValidationRecord{ev.sparse, ev.dense, ev.flops.flops};
    if (ev.sparse.mrr_10 > best_mrr) {
      best_mrr = ev.sparse.mrr_10;
      report.best_epoch = rec.epoch;
      result.best = {model, step, config_hash};
    }
  };

  {
    EpochRecord init{0, 0, {}, model.tau(), std::nullopt};
    validate(init);
    report.epochs.push_back(init);
    if (on_epoch) on_epoch(init);
  }

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !report.diverged; ++epoch) {
    const auto plans = make_batches(data.train, cfg.batch_size, cfg.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    for (const auto& plan : plans) {
      obj.step = step;
      BackwardResult br;
      try {
        br = backward(model, materialize(plan, data.images, data.captions), obj);
      } catch (const NumericError& e) {
        report.diverged = true;
        report.divergence_reason = e.what();
        break;
      }
      if (!cfg.finetune_final_layer) {
        for (auto* layer : {&br.grads.text, &br.grads.image}) {
          layer->weight.fill(0.0);
          std::fill(layer->bias.begin(), layer->bias.end(), 0.0);
        }
      }
      Model before = model;
      optimizer_step(model, br.grads, opt);
      if (!detail::all_finite(model)) {
        model = std::move(before);
        report.diverged = true;
        report.divergence_reason = "non-finite parameters after update";
        break;
      }
      ++step;
      detail::accumulate(rec.mean_loss, br.loss, 1.0 / static_cast<double>(plans.size()));
    }
    rec.steps = step;
    rec.tau = model.tau();
    if (epoch % cfg.val_every == 0 || epoch == cfg.epochs || report.diverged) validate(rec);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  result.last = {model, step, config_hash};
  if (data.val.size() == 0) {
    result.best = result.last;
    report.best_epoch = report.epochs.back().epoch;
  }
  return result;
}

}  // namespace jsd
