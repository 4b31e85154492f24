#pragma once

// Text-to-image evaluation: every caption is a query, its image the single
// relevant document, and the candidate pool is the images of the split.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "data_model.hpp"
#include "index.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "scoring.hpp"

namespace jsd {

/// Runs f(i) for i in [0, n) over `threads` workers, each owning a
/// contiguous block. Writes to distinct slots only, so results are
/// independent of the thread count.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&f, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) f(i);
    });
  }
}

struct EvalSet {
  std::vector<Encoded> images;       // doc id = position
  std::vector<Encoded> captions;     // queries
  std::vector<DocId> gold;           // per caption
  std::vector<std::string> caption_ids;
};

inline EvalSet encode_eval_set(const Model& model, const EmbeddingTable& images, const EmbeddingTable& captions,
                               const ResolvedPairs& pairs) {
  EvalSet s;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    s.images.push_back(encode(images.row_f64(pairs.image_rows[p]), Side::image, model));
    for (std::size_t c : pairs.caption_rows[p]) {
      s.captions.push_back(encode(captions.row_f64(c), Side::text, model));
      s.gold.push_back(static_cast<DocId>(p));
      s.caption_ids.push_back(captions.ids()[c]);
    }
  }
  return s;
}

struct EvalOptions {
  const VocabMask* mask = nullptr;  // applied to image vectors at index time
  bool mask_queries = false;        // also mask caption vectors
  std::size_t k = 10;
  unsigned threads = 1;
  std::optional<IntegrationWeights> inter;  // also rank by w1*s_dense + w2*s_sparse
};

struct RetrievalEval {
  MetricReport sparse;
  MetricReport dense;
  std::optional<MetricReport> inter;
  FlopsStats flops;
  std::vector<QueryResult> sparse_results;
  std::vector<QueryResult> dense_results;
};

namespace detail {

inline QueryResult to_result(std::string id, const std::vector<Hit>& hits, DocId gold) {
  QueryResult r{std::move(id), {}, gold};
  r.ranked.reserve(hits.size());
  for (const auto& h : hits) r.ranked.push_back(h.doc);
  return r;
}

}  // namespace detail

inline RetrievalEval evaluate_encoded(const EvalSet& set, double tau, const EvalOptions& opt = {}) {
  if (set.captions.empty() || set.images.empty()) throw ConfigError("evaluation: no queries or no images");
  std::vector<IndexedDoc> docs;
  std::vector<SparseVector> image_vecs, text_vecs;
  Matrix image_dense(set.images.size(), set.images.front().dense.size());
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    auto v = opt.mask ? apply_mask(set.images[i].sparse, *opt.mask) : set.images[i].sparse;
    image_vecs.push_back(v);
    docs.push_back({static_cast<DocId>(i), std::move(v)});
    std::copy(set.images[i].dense.begin(), set.images[i].dense.end(), image_dense.row(i).begin());
  }
  for (const auto& c : set.captions)
    text_vecs.push_back(opt.mask && opt.mask_queries ? apply_mask(c.sparse, *opt.mask) : c.sparse);
  const auto index = build_index(docs);

  const std::size_t nq = set.captions.size();
  RetrievalEval out;
  out.sparse_results.resize(nq);
  out.dense_results.resize(nq);
  std::vector<QueryResult> inter_results(opt.inter ? nq : 0);
  parallel_for(nq, opt.threads, [&](std::size_t q) {
    out.sparse_results[q] = detail::to_result(set.caption_ids[q], index.search(text_vecs[q], opt.k), set.gold[q]);
    out.dense_results[q] =
        detail::to_result(set.caption_ids[q], dense_search(image_dense, set.captions[q].dense, tau, opt.k), set.gold[q]);
    if (opt.inter) {
      std::vector<Hit> hits(set.images.size());
      for (std::size_t i = 0; i < set.images.size(); ++i)
        hits[i] = {static_cast<DocId>(i),
                   opt.inter->dense * dense_score(set.captions[q].dense, set.images[i].dense, tau) +
                       opt.inter->sparse * sparse_score(text_vecs[q], image_vecs[i])};
      inter_results[q] = detail::to_result(set.caption_ids[q], top_k(std::move(hits), opt.k), set.gold[q]);
    }
  });
  out.sparse = metric_report(out.sparse_results);
  out.dense = metric_report(out.dense_results);
  if (opt.inter) out.inter = metric_report(inter_results);
  out.flops = flops_metric(text_vecs, image_vecs);
  return out;
}

inline RetrievalEval evaluate_retrieval(const Model& model, const EmbeddingTable& images,
                                        const EmbeddingTable& captions, const ResolvedPairs& pairs,
                                        const EvalOptions& opt = {}) {
  return evaluate_encoded(encode_eval_set(model, images, captions, pairs), model.tau(), opt);
}

/// Dense ranking by the frozen input embeddings themselves.
inline MetricReport frozen_dense_report(const EmbeddingTable& images, const EmbeddingTable& captions,
                                        const ResolvedPairs& pairs, std::size_t k = 10) {
  Matrix docs(pairs.size(), images.dim());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto row = images.row(pairs.image_rows[p]);
    std::copy(row.begin(), row.end(), docs.row(p).begin());
  }
  std::vector<QueryResult> results;
  for (std::size_t p = 0; p < pairs.size(); ++p)
    for (std::size_t c : pairs.caption_rows[p])
      results.push_back(detail::to_result(captions.ids()[c], dense_search(docs, captions.row_f64(c), 1.0, k),
                                          static_cast<DocId>(p)));
  return metric_report(results);
}

}  // namespace jsd
