#pragma once

// Exact sparse retrieval over an inverted index, exhaustive dense retrieval,
// the expected-FLOPs efficiency metric and the corpus-frequency vocabulary
// mask used for probabilistic expansion control (PEC).
//
// Index file layout (little-endian):
//   "SDIX" | u32 vocab_size | u32 doc_count
//   | for each term with a non-empty posting list, ascending:
//       u32 term | u32 length | length x (u32 doc, f32 weight)
// Persisted indexes use dense document ids 0..doc_count-1.
//
// Mask file: u32 bit_count | ceil(bit_count/8) bytes, bit j = byte j/8,
// position j%8 (LSB first).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "scoring.hpp"
#include "sparse_vector.hpp"

namespace jsd {

using DocId = std::uint32_t;

struct Hit {
  DocId doc;
  double score;
  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Higher score first, then ascending doc id.
inline bool hit_before(const Hit& a, const Hit& b) noexcept {
  return a.score != b.score ? a.score > b.score : a.doc < b.doc;
}

inline std::vector<Hit> top_k(std::vector<Hit> hits, std::size_t k) {
  if (hits.size() > k) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), hit_before);
    hits.resize(k);
  } else {
    std::sort(hits.begin(), hits.end(), hit_before);
  }
  return hits;
}

// --------------------------------------------------------------------------
// Vocabulary mask

class VocabMask {
 public:
  VocabMask() = default;
  explicit VocabMask(std::vector<bool> admitted, std::vector<std::uint32_t> doc_freq = {},
                     std::uint32_t threshold = 0)
      : admitted_(std::move(admitted)), doc_freq_(std::move(doc_freq)), threshold_(threshold) {}

  static VocabMask all(std::size_t vocab) { return VocabMask(std::vector<bool>(vocab, true)); }

  std::size_t vocab_size() const noexcept { return admitted_.size(); }
  bool admits(TermId t) const noexcept { return t < admitted_.size() && admitted_[t]; }
  std::size_t admitted_count() const noexcept {
    return static_cast<std::size_t>(std::count(admitted_.begin(), admitted_.end(), true));
  }
  const std::vector<bool>& bits() const noexcept { return admitted_; }
  /// Caption document frequency per term (empty when loaded from disk).
  const std::vector<std::uint32_t>& doc_freq() const noexcept { return doc_freq_; }
  std::uint32_t threshold() const noexcept { return threshold_; }

 private:
  std::vector<bool> admitted_;
  std::vector<std::uint32_t> doc_freq_;
  std::uint32_t threshold_ = 0;
};

/// Admits term j iff at least `min_doc_freq` training captions activate it.
inline VocabMask build_pec_mask(std::span<const std::vector<TermId>> caption_terms, std::size_t vocab_size,
                                std::uint32_t min_doc_freq) {
  if (min_doc_freq < 1) throw ConfigError("PEC threshold must be >= 1");
  if (caption_terms.empty()) throw ConfigError("PEC mask needs a non-empty caption corpus");
  std::vector<std::uint32_t> df(vocab_size, 0);
  for (const auto& terms : caption_terms) {
    std::unordered_set<TermId> seen;
    for (TermId t : terms) {
      if (t >= vocab_size) throw ShapeError("PEC mask: term " + std::to_string(t) + " out of range");
      if (seen.insert(t).second) ++df[t];
    }
  }
  std::vector<bool> admitted(vocab_size);
  for (std::size_t j = 0; j < vocab_size; ++j) admitted[j] = df[j] >= min_doc_freq;
  return VocabMask(std::move(admitted), std::move(df), min_doc_freq);
}

inline std::vector<std::vector<TermId>> supports(std::span<const SparseVector> vs) {
  std::vector<std::vector<TermId>> out;
  out.reserve(vs.size());
  for (const auto& v : vs) out.push_back(v.terms());
  return out;
}

inline SparseVector apply_mask(const SparseVector& v, const VocabMask& mask) {
  if (mask.vocab_size() != v.dim()) throw ShapeError("apply_mask: vocabulary sizes differ");
  std::vector<TermId> terms;
  std::vector<double> weights;
  for (std::size_t i = 0; i < v.nnz(); ++i)
    if (mask.admits(v.terms()[i])) {
      terms.push_back(v.terms()[i]);
      weights.push_back(v.weights()[i]);
    }
  return SparseVector(v.dim(), std::move(terms), std::move(weights));
}

inline void save_mask(const std::filesystem::path& path, const VocabMask& mask) {
  io::Writer w;
  const auto& bits = mask.bits();
  w.u32(static_cast<std::uint32_t>(bits.size()));
  for (std::size_t byte = 0; byte < (bits.size() + 7) / 8; ++byte) {
    std::uint8_t b = 0;
    for (std::size_t k = 0; k < 8 && byte * 8 + k < bits.size(); ++k)
      if (bits[byte * 8 + k]) b |= static_cast<std::uint8_t>(1u << k);
    w.u8(b);
  }
  w.save(path);
}

inline VocabMask load_mask(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  const std::uint32_t n = r.u32();
  std::vector<bool> bits(n);
  for (std::size_t byte = 0; byte < (n + 7) / 8; ++byte) {
    const std::uint8_t b = r.u8();
    for (std::size_t k = 0; k < 8 && byte * 8 + k < n; ++k) bits[byte * 8 + k] = (b >> k) & 1u;
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after mask");
  return VocabMask(std::move(bits));
}

// --------------------------------------------------------------------------
// Inverted index

struct Posting {
  DocId doc;
  double weight;
  friend bool operator==(const Posting&, const Posting&) = default;
};

struct IndexedDoc {
  DocId id;
  SparseVector vector;
};

class InvertedIndex {
 public:
  InvertedIndex() = default;

  std::size_t vocab_size() const noexcept { return postings_.size(); }
  std::size_t doc_count() const noexcept { return doc_ids_.size(); }
  /// Document ids in ascending order.
  const std::vector<DocId>& doc_ids() const noexcept { return doc_ids_; }
  std::span<const Posting> postings(TermId t) const { return postings_.at(t); }

  std::size_t posting_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : postings_) n += p.size();
    return n;
  }

  /// Reconstructs the stored (masked) vector of a document.
  SparseVector densify(DocId id) const {
    const auto it = std::lower_bound(doc_ids_.begin(), doc_ids_.end(), id);
    if (it == doc_ids_.end() || *it != id) throw MissingIdError("index: unknown doc " + std::to_string(id));
    const auto ord = static_cast<DocId>(it - doc_ids_.begin());
    std::vector<TermId> terms;
    std::vector<double> weights;
    for (std::size_t t = 0; t < postings_.size(); ++t) {
      const auto& pl = postings_[t];
      const auto p = std::lower_bound(pl.begin(), pl.end(), ord,
                                      [](const Posting& x, DocId d) { return x.doc < d; });
      if (p != pl.end() && p->doc == ord) {
        terms.push_back(static_cast<TermId>(t));
        weights.push_back(p->weight);
      }
    }
    return SparseVector(vocab_size(), std::move(terms), std::move(weights));
  }

  /// Exact top-k by sparse dot product, term-at-a-time into a dense
  /// accumulator. Documents sharing no term with the query are not returned.
  std::vector<Hit> search(const SparseVector& query, std::size_t k) const {
    if (k < 1) throw ConfigError("search: k must be >= 1");
    if (query.dim() != vocab_size()) throw ShapeError("search: query vocabulary size differs from index");
    if (query.empty()) return {};
    std::vector<double> acc(doc_count(), 0.0);
    std::vector<char> seen(doc_count(), 0);
    std::vector<DocId> touched;
    for (std::size_t i = 0; i < query.nnz(); ++i) {
      const double qw = query.weights()[i];
      for (const auto& p : postings_[query.terms()[i]]) {
        if (!seen[p.doc]) {
          seen[p.doc] = 1;
          touched.push_back(p.doc);
        }
        acc[p.doc] += qw * p.weight;
      }
    }
    std::vector<Hit> hits;
    hits.reserve(touched.size());
    for (DocId ord : touched) hits.push_back({doc_ids_[ord], acc[ord]});
    // Ordinals are assigned in ascending id order, so ties resolve by id.
    return top_k(std::move(hits), k);
  }

 private:
  friend InvertedIndex build_index(std::span<const IndexedDoc>, const VocabMask*);
  friend InvertedIndex load_index(const std::filesystem::path&);

  std::vector<std::vector<Posting>> postings_;  // doc field holds the ordinal
  std::vector<DocId> doc_ids_;
};

inline InvertedIndex build_index(std::span<const IndexedDoc> docs, const VocabMask* mask = nullptr) {
  if (docs.empty()) throw ConfigError("build_index: no documents");
  const std::size_t vocab = docs.front().vector.dim();
  if (mask != nullptr && mask->vocab_size() != vocab) throw ShapeError("build_index: mask size differs");
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return docs[a].id < docs[b].id; });

  InvertedIndex idx;
  idx.postings_.resize(vocab);
  idx.doc_ids_.reserve(docs.size());
  for (std::size_t ord = 0; ord < order.size(); ++ord) {
    const auto& d = docs[order[ord]];
    if (!idx.doc_ids_.empty() && idx.doc_ids_.back() == d.id)
      throw DuplicateError("build_index: duplicate doc id " + std::to_string(d.id));
    if (d.vector.dim() != vocab) throw ShapeError("build_index: vocabulary sizes differ");
    idx.doc_ids_.push_back(d.id);
    for (std::size_t i = 0; i < d.vector.nnz(); ++i) {
      const TermId t = d.vector.terms()[i];
      if (mask != nullptr && !mask->admits(t)) continue;
      idx.postings_[t].push_back({static_cast<DocId>(ord), d.vector.weights()[i]});
    }
  }
  return idx;
}

inline void save_index(const std::filesystem::path& path, const InvertedIndex& idx) {
  for (std::size_t i = 0; i < idx.doc_count(); ++i)
    if (idx.doc_ids()[i] != i) throw ConfigError("save_index: persisted indexes need doc ids 0..count-1");
  io::Writer w;
  w.bytes("SDIX");
  w.u32(static_cast<std::uint32_t>(idx.vocab_size()));
  w.u32(static_cast<std::uint32_t>(idx.doc_count()));
  for (std::size_t t = 0; t < idx.vocab_size(); ++t) {
    const auto pl = idx.postings(static_cast<TermId>(t));
    if (pl.empty()) continue;
    w.u32(static_cast<std::uint32_t>(t));
    w.u32(static_cast<std::uint32_t>(pl.size()));
    for (const auto& p : pl) {
      w.u32(p.doc);
      w.f32(static_cast<float>(p.weight));
    }
  }
  w.save(path);
}

inline InvertedIndex load_index(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  if (r.remaining() < 4 || r.bytes(4) != "SDIX") throw FormatError(path.string() + ": bad index magic");
  const std::uint32_t vocab = r.u32();
  const std::uint32_t docs = r.u32();
  InvertedIndex idx;
  idx.postings_.resize(vocab);
  idx.doc_ids_.resize(docs);
  for (std::uint32_t i = 0; i < docs; ++i) idx.doc_ids_[i] = i;
  long last_term = -1;
  while (!r.at_end()) {
    const std::uint32_t t = r.u32();
    const std::uint32_t len = r.u32();
    if (t >= vocab || static_cast<long>(t) <= last_term)
      throw FormatError(path.string() + ": posting blocks out of order or term out of range");
    last_term = t;
    r.need(static_cast<std::size_t>(len) * 8);
    auto& pl = idx.postings_[t];
    pl.reserve(len);
    for (std::uint32_t i = 0; i < len; ++i) {
      const DocId d = r.u32();
      const double w = r.f32();
      if (d >= docs || (!pl.empty() && d <= pl.back().doc) || !(w > 0.0))
        throw FormatError(path.string() + ": malformed posting in term " + std::to_string(t));
      pl.push_back({d, w});
    }
  }
  return idx;
}

// --------------------------------------------------------------------------
// Dense exhaustive search

/// Exact top-k by <query, row>/tau over the rows of `docs` (doc id = row).
inline std::vector<Hit> dense_search(const Matrix& docs, std::span<const double> query, double tau, std::size_t k) {
  if (k < 1) throw ConfigError("dense_search: k must be >= 1");
  if (docs.cols() != query.size())
    throw ShapeError("dense_search: query dim " + std::to_string(query.size()) + " vs table dim " +
                     std::to_string(docs.cols()));
  std::vector<Hit> hits(docs.rows());
  for (std::size_t r = 0; r < docs.rows(); ++r) hits[r] = {static_cast<DocId>(r), dense_score(query, docs.row(r), tau)};
  return top_k(std::move(hits), k);
}

// --------------------------------------------------------------------------
// FLOPs

struct FlopsStats {
  std::vector<double> p_text;
  std::vector<double> p_image;
  double flops = 0.0;
};

inline std::vector<double> activation_probability(std::span<const SparseVector> vs, std::size_t vocab) {
  std::vector<double> p(vocab, 0.0);
  for (const auto& v : vs) {
    if (v.dim() != vocab) throw ShapeError("flops_metric: vocabulary sizes differ");
    for (TermId t : v.terms()) p[t] += 1.0;
  }
  for (auto& x : p) x /= static_cast<double>(vs.size());
  return p;
}

/// E_{t,i}[sum_j 1(z_t[j] > 0) 1(z_i[j] > 0)] = sum_j p_text[j] p_image[j].
inline FlopsStats flops_metric(std::span<const SparseVector> texts, std::span<const SparseVector> images) {
  if (texts.empty() || images.empty()) throw ConfigError("flops_metric: empty sample");
  const std::size_t vocab = texts.front().dim();
  FlopsStats s;
  s.p_text = activation_probability(texts, vocab);
  s.p_image = activation_probability(images, vocab);
  for (std::size_t j = 0; j < vocab; ++j) s.flops += s.p_text[j] * s.p_image[j];
  return s;
}

}  // namespace jsd
