#pragma once

// Embedding tables, paired caption manifests, vocabularies, deterministic
// splits and the planted-cluster synthetic generator.
//
// Embedding file layout (all integers little-endian):
//   "SDE1" | u32 count | u32 dim | count*dim f32 row-major | u64 FNV-1a(rows)
// Row identifiers live in an optional sidecar "<file>.ids" (one per line);
// without it, rows are named by their decimal index.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace jsd {

inline constexpr char kEmbeddingMagic[] = "SDE1";

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  EmbeddingTable(std::vector<std::string> ids, std::size_t dim, std::vector<float> rows)
      : ids_(std::move(ids)), dim_(dim), rows_(std::move(rows)) {
    if (dim_ == 0) throw FormatError("embedding table: dim must be positive");
    if (ids_.empty()) throw FormatError("embedding table: at least one row required");
    if (rows_.size() != ids_.size() * dim_)
      throw ShapeError("embedding table: " + std::to_string(rows_.size()) +
                       " values do not form " + std::to_string(ids_.size()) + " rows of dim " +
                       std::to_string(dim_));
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (!index_.emplace(ids_[i], i).second)
        throw DuplicateError("embedding table: duplicate id '" + ids_[i] + "'");
  }

  static EmbeddingTable from_matrix(std::vector<std::string> ids, const Matrix& m) {
    std::vector<float> rows(m.data().begin(), m.data().end());
    return EmbeddingTable(std::move(ids), m.cols(), std::move(rows));
  }

  std::size_t count() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<float>& values() const noexcept { return rows_; }

  std::span<const float> row(std::size_t i) const noexcept { return {rows_.data() + i * dim_, dim_}; }

  std::vector<double> row_f64(std::size_t i) const {
    const auto r = row(i);
    return {r.begin(), r.end()};
  }

  Matrix to_matrix() const {
    Matrix m(count(), dim_);
    std::copy(rows_.begin(), rows_.end(), m.data().begin());
    return m;
  }

  /// Row index for an id; throws MissingIdError.
  std::size_t find(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw MissingIdError("unknown id '" + id + "'");
    return it->second;
  }
  bool contains(const std::string& id) const { return index_.contains(id); }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.ids_ == b.ids_ && a.dim_ == b.dim_ && a.rows_ == b.rows_;
  }

 private:
  std::vector<std::string> ids_;
  std::size_t dim_ = 0;
  std::vector<float> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::filesystem::path ids_sidecar(const std::filesystem::path& path) {
  auto p = path;
  p += ".ids";
  return p;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  io::Writer w;
  w.bytes(std::string_view(kEmbeddingMagic, 4));
  w.u32(static_cast<std::uint32_t>(table.count()));
  w.u32(static_cast<std::uint32_t>(table.dim()));
  const std::size_t payload_start = w.size();
  for (float v : table.values()) w.f32(v);
  const auto* payload = reinterpret_cast<const unsigned char*>(w.buffer().data() + payload_start);
  w.u64(io::fnv1a64(payload, w.size() - payload_start));
  w.save(path);
  io::write_lines(ids_sidecar(path), table.ids());
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kEmbeddingMagic, 4))
    throw FormatError(path.string() + ": bad magic (expected SDE1)");
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  if (dim == 0) throw FormatError(path.string() + ": dim is 0");
  if (count == 0) throw FormatError(path.string() + ": count is 0");
  const std::size_t n = static_cast<std::size_t>(count) * dim;
  r.need(n * 4 + 8);
  const std::size_t payload_start = r.position();
  std::vector<float> rows(n);
  for (auto& v : rows) v = r.f32();
  const auto* payload = reinterpret_cast<const unsigned char*>(r.data_at(payload_start));
  const std::uint64_t expected = io::fnv1a64(payload, n * 4);
  if (r.u64() != expected) throw FormatError(path.string() + ": checksum mismatch");
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after checksum");

  std::vector<std::string> ids;
  if (const auto sidecar = ids_sidecar(path); std::filesystem::exists(sidecar)) {
    ids = io::read_lines(sidecar);
    if (ids.size() != count)
      throw FormatError(sidecar.string() + ": " + std::to_string(ids.size()) + " ids for " +
                        std::to_string(count) + " rows");
  } else {
    ids.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) ids.push_back(std::to_string(i));
  }
  return EmbeddingTable(std::move(ids), dim, std::move(rows));
}

// --------------------------------------------------------------------------
// Paired datasets

enum class Split { train, val, test };

inline const char* to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct ImageCaptions {
  std::string image_id;
  std::vector<std::string> caption_ids;
  friend bool operator==(const ImageCaptions&, const ImageCaptions&) = default;
};

struct PairedDataset {
  std::vector<ImageCaptions> pairs;
  Split split = Split::train;

  std::size_t caption_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.caption_ids.size();
    return n;
  }
  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

/// Checks the manifest invariants: unique images, k >= 1, and every caption
/// owned by exactly one image.
inline void check_pairs(const PairedDataset& ds) {
  std::unordered_set<std::string> images;
  std::unordered_map<std::string, std::string> owner;
  for (const auto& p : ds.pairs) {
    if (!images.insert(p.image_id).second)
      throw DuplicateError("image '" + p.image_id + "' listed twice");
    if (p.caption_ids.empty())
      throw FormatError("image '" + p.image_id + "' has no captions");
    for (const auto& c : p.caption_ids) {
      const auto [it, fresh] = owner.emplace(c, p.image_id);
      if (!fresh)
        throw DuplicateError("caption '" + c + "' referenced by images '" + it->second + "' and '" +
                             p.image_id + "'");
    }
  }
}

inline void check_ids(const PairedDataset& ds, const EmbeddingTable& images,
                      const EmbeddingTable& captions) {
  for (const auto& p : ds.pairs) {
    if (!images.contains(p.image_id)) throw MissingIdError("unknown image id '" + p.image_id + "'");
    for (const auto& c : p.caption_ids)
      if (!captions.contains(c)) throw MissingIdError("unknown caption id '" + c + "'");
  }
}

inline PairedDataset load_pairs(const std::filesystem::path& path, Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  PairedDataset ds;
  ds.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("image_id") || !j["image_id"].is_string() ||
        !j.contains("caption_ids") || !j["caption_ids"].is_array())
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": expected {\"image_id\": str, \"caption_ids\": [str, ...]}");
    ImageCaptions ic;
    ic.image_id = j["image_id"].get<std::string>();
    for (const auto& c : j["caption_ids"]) {
      if (!c.is_string())
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": caption id not a string");
      ic.caption_ids.push_back(c.get<std::string>());
    }
    ds.pairs.push_back(std::move(ic));
  }
  check_pairs(ds);
  return ds;
}

inline PairedDataset load_pairs(const std::filesystem::path& path, const EmbeddingTable& images,
                                const EmbeddingTable& captions, Split split = Split::train) {
  auto ds = load_pairs(path, split);
  check_ids(ds, images, captions);
  return ds;
}

inline void save_pairs(const std::filesystem::path& path, const PairedDataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  for (const auto& p : ds.pairs) {
    nlohmann::json j{{"image_id", p.image_id}, {"caption_ids", p.caption_ids}};
    out << j.dump() << '\n';
  }
}

/// Row indices of a dataset resolved against its embedding tables.
struct ResolvedPairs {
  std::vector<std::size_t> image_rows;
  std::vector<std::vector<std::size_t>> caption_rows;  // parallel to image_rows

  std::size_t size() const noexcept { return image_rows.size(); }
};

inline ResolvedPairs resolve(const PairedDataset& ds, const EmbeddingTable& images,
                             const EmbeddingTable& captions) {
  ResolvedPairs r;
  for (const auto& p : ds.pairs) {
    r.image_rows.push_back(images.find(p.image_id));
    auto& caps = r.caption_rows.emplace_back();
    for (const auto& c : p.caption_ids) caps.push_back(captions.find(c));
  }
  return r;
}

struct DatasetSplits {
  PairedDataset train, val, test;
};

/// Partitions images (with all their captions) into disjoint train/val/test
/// sets. Relative manifest order is preserved inside each part.
inline DatasetSplits split_dataset(const PairedDataset& ds, std::size_t n_val, std::size_t n_test,
                                   std::uint64_t seed) {
  const std::size_t n = ds.pairs.size();
  if (n_val + n_test > n)
    throw ConfigError("split: " + std::to_string(n_val + n_test) + " held-out images requested from " +
                      std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SplitMix64 rng(derive_seed(seed, 0x5b1u));
  rng.shuffle(order);
  std::vector<Split> tag(n, Split::train);
  for (std::size_t i = 0; i < n_test; ++i) tag[order[i]] = Split::test;
  for (std::size_t i = n_test; i < n_test + n_val; ++i) tag[order[i]] = Split::val;

  DatasetSplits out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = tag[i] == Split::train ? out.train : tag[i] == Split::val ? out.val : out.test;
    dst.pairs.push_back(ds.pairs[i]);
  }
  return out;
}

// --------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (!index_.emplace(tokens_[i], i).second)
        throw DuplicateError("vocabulary: duplicate token '" + tokens_[i] + "'");
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  std::size_t find(const std::string& t) const {
    const auto it = index_.find(t);
    if (it == index_.end()) throw MissingIdError("vocabulary: unknown token '" + t + "'");
    return it->second;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  auto lines = io::read_lines(path);
  return Vocabulary(std::move(lines));
}

inline void save_vocabulary(const std::filesystem::path& path, const Vocabulary& v) {
  io::write_lines(path, v.tokens());
}

// --------------------------------------------------------------------------
// Synthetic planted-cluster data

struct SyntheticSpec {
  std::size_t n_images = 50;
  std::size_t captions_per_image = 2;
  std::size_t dim = 16;
  std::size_t vocab_size = 64;
  std::size_t n_clusters = 50;
  double noise_std = 0.05;
  std::uint64_t seed = 7;
  double word_embedding_std = 1.0;

  void validate() const {
    if (n_images == 0 || captions_per_image == 0 || dim == 0 || vocab_size == 0 || n_clusters == 0)
      throw ConfigError("synthetic: sizes must be positive");
    if (n_clusters > n_images) throw ConfigError("synthetic: n_clusters exceeds n_images");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std))
      throw ConfigError("synthetic: noise_std must be finite and >= 0");
  }
};

struct SyntheticData {
  EmbeddingTable images;
  EmbeddingTable captions;
  PairedDataset pairs;
};

/// Image p sits exactly on unit-norm cluster centre (p mod n_clusters);
/// caption q of image p is that centre plus iid N(0, noise_std^2) noise.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t d = spec.dim;
  SplitMix64 center_rng(derive_seed(spec.seed, 1));
  Matrix centers(spec.n_clusters, d);
  for (std::size_t c = 0; c < spec.n_clusters; ++c) {
    auto row = centers.row(c);
    double norm2 = 0.0;
    do {
      for (auto& v : row) v = center_rng.normal();
      norm2 = dot(row, row);
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : row) v *= inv;
  }

  SplitMix64 noise_rng(derive_seed(spec.seed, 2));
  std::vector<std::string> image_ids, caption_ids;
  std::vector<float> image_rows, caption_rows;
  PairedDataset pairs;
  for (std::size_t p = 0; p < spec.n_images; ++p) {
    const auto center = centers.row(p % spec.n_clusters);
    image_ids.push_back("img" + std::to_string(p));
    for (double v : center) image_rows.push_back(static_cast<float>(v));
    ImageCaptions ic{image_ids.back(), {}};
    for (std::size_t q = 0; q < spec.captions_per_image; ++q) {
      caption_ids.push_back("cap" + std::to_string(p) + "_" + std::to_string(q));
      ic.caption_ids.push_back(caption_ids.back());
      for (double v : center) {
        const double noisy = spec.noise_std == 0.0 ? v : v + spec.noise_std * noise_rng.normal();
        caption_rows.push_back(static_cast<float>(noisy));
      }
    }
    pairs.pairs.push_back(std::move(ic));
  }
  return {EmbeddingTable(std::move(image_ids), d, std::move(image_rows)),
          EmbeddingTable(std::move(caption_ids), d, std::move(caption_rows)), std::move(pairs)};
}

/// Stand-in for a text encoder's word-embedding matrix (|V| x d), iid normal.
inline Matrix synthetic_word_embeddings(const SyntheticSpec& spec) {
  spec.validate();
  SplitMix64 rng(derive_seed(spec.seed, 3));
  Matrix m(spec.vocab_size, spec.dim);
  for (auto& v : m.data()) v = spec.word_embedding_std * rng.normal();
  // Round through f32 so in-memory and on-disk copies agree exactly.
  for (auto& v : m.data()) v = static_cast<double>(static_cast<float>(v));
  return m;
}

inline Vocabulary synthetic_vocabulary(std::size_t size) {
  std::vector<std::string> tokens;
  tokens.reserve(size);
  for (std::size_t i = 0; i < size; ++i) tokens.push_back("tok" + std::to_string(i));
  return Vocabulary(std::move(tokens));
}

}  // namespace jsd
