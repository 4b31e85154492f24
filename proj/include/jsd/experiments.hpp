#pragma once

// Analysis drivers: the (w1, w2) integration-weight sweep and the
// effectiveness-vs-FLOPs trade-off table. Both emit fixed-header CSV.

#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "eval.hpp"
#include "index.hpp"
#include "trainer.hpp"

namespace jsd {

inline std::string format_fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

enum class SweepPolicy { retrain, rescore };
enum class SweepMetric { sparse, inter };

struct SweepRow {
  double w1 = 0.0;
  double w2 = 0.0;
  double r_at_1 = 0.0;
};

struct EvalData {
  const EmbeddingTable& images;
  const EmbeddingTable& captions;
  ResolvedPairs pairs;
};

/// One row per grid cell, w1-major. `retrain` fits a model per cell with
/// the cell's integration weights; `rescore` reuses `checkpoint` and only
/// changes the inference-time mixing (so it requires SweepMetric::inter to
/// be informative).
inline std::vector<SweepRow> weight_sweep(const TrainConfig& base, const TrainData& train, const EvalData& eval,
                                          const std::vector<double>& w1_grid, const std::vector<double>& w2_grid,
                                          SweepPolicy policy = SweepPolicy::retrain,
                                          SweepMetric metric = SweepMetric::sparse,
                                          const Model* checkpoint = nullptr, unsigned threads = 1) {
  if (w1_grid.empty() || w2_grid.empty()) throw ConfigError("weight_sweep: empty grid");
  for (double w1 : w1_grid)
    for (double w2 : w2_grid) IntegrationWeights{w1, w2}.validate();
  if (policy == SweepPolicy::rescore && checkpoint == nullptr)
    throw ConfigError("weight_sweep: rescore policy needs a checkpoint");

  std::vector<SweepRow> rows;
  for (double w1 : w1_grid)
    for (double w2 : w2_grid) {
      TrainConfig cfg = base;
      cfg.weights = {w1, w2};
      Model model;
      if (policy == SweepPolicy::retrain) model = fit(cfg, train).best.model;
      else model = *checkpoint;
      EvalOptions opt;
      opt.threads = threads;
      if (metric == SweepMetric::inter) opt.inter = cfg.weights;
      const auto ev = evaluate_retrieval(model, eval.images, eval.captions, eval.pairs, opt);
      rows.push_back({w1, w2, metric == SweepMetric::inter ? ev.inter->recall_1 : ev.sparse.recall_1});
    }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "w1,w2,r_at_1\n";
  for (const auto& r : rows) os << format_fixed(r.w1) << ',' << format_fixed(r.w2) << ',' << format_fixed(r.r_at_1) << '\n';
}

struct TradeoffVariant {
  std::string name;
  Model model;
  std::optional<VocabMask> mask;  // PEC
  bool mask_queries = false;
};

struct TradeoffRow {
  std::string variant;
  double flops = 0.0;
  double r_at_1 = 0.0;
};

inline constexpr char kDenseBaselineName[] = "dense_baseline";

/// Sparse FLOPs and R@1 per variant on the evaluation split, followed by the
/// frozen dense baseline, whose FLOPs column is the d multiplications of one
/// dense dot product.
inline std::vector<TradeoffRow> tradeoff_report(const std::vector<TradeoffVariant>& variants, const EvalData& eval,
                                                unsigned threads = 1) {
  if (variants.empty()) throw ConfigError("tradeoff_report: no variants");
  std::vector<TradeoffRow> rows;
  for (const auto& v : variants) {
    EvalOptions opt;
    opt.threads = threads;
    opt.mask = v.mask ? &*v.mask : nullptr;
    opt.mask_queries = v.mask_queries;
    const auto ev = evaluate_retrieval(v.model, eval.images, eval.captions, eval.pairs, opt);
    rows.push_back({v.name, ev.flops.flops, ev.sparse.recall_1});
  }
  const auto base = frozen_dense_report(eval.images, eval.captions, eval.pairs);
  rows.push_back({kDenseBaselineName, static_cast<double>(eval.images.dim()), base.recall_1});
  return rows;
}

inline void write_tradeoff_csv(std::ostream& os, const std::vector<TradeoffRow>& rows) {
  os << "variant,flops,r_at_1\n";
  for (const auto& r : rows) os << r.variant << ',' << format_fixed(r.flops) << ',' << format_fixed(r.r_at_1) << '\n';
}

/// PEC mask from the support of the (encoded) training captions.
inline VocabMask pec_mask_for(const Model& model, const EmbeddingTable& captions, const ResolvedPairs& train,
                              std::uint32_t min_doc_freq) {
  std::vector<std::vector<TermId>> terms;
  for (const auto& caps : train.caption_rows)
    for (std::size_t c : caps) terms.push_back(encode(captions.row_f64(c), Side::text, model).sparse.terms());
  return build_pec_mask(terms, model.vocab_size(), min_doc_freq);
}

}  // namespace jsd
