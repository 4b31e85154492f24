#pragma once

// Trainable surface of the retriever: one residual affine "final layer" per
// modality on top of frozen penultimate embeddings, and a projection head
// shared by both modalities that maps dense embeddings to vocabulary logits.
//
//   h      = p + W p + b                       (final layer, per modality)
//   logits = W2 gelu(W1 h + b1) + b2           (shared head)
//   z      = log(1 + relu(logits))             (term importances)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "sparse_vector.hpp"

namespace jsd {

enum class Side { text, image };

inline double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_derivative(double x) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct FinalLayerParams {
  Matrix weight;                // d x d, residual branch
  std::vector<double> bias;     // d

  static FinalLayerParams identity(std::size_t d) { return {Matrix(d, d), std::vector<double>(d, 0.0)}; }
  std::size_t dim() const noexcept { return bias.size(); }
  friend bool operator==(const FinalLayerParams&, const FinalLayerParams&) = default;
};

struct ProjectionHead {
  Matrix hidden_weight;              // W1: d x d
  std::vector<double> hidden_bias;   // b1: d
  Matrix output_weight;              // W2: |V| x d
  std::vector<double> output_bias;   // b2: |V|

  std::size_t dim() const noexcept { return hidden_bias.size(); }
  std::size_t vocab_size() const noexcept { return output_bias.size(); }
  friend bool operator==(const ProjectionHead&, const ProjectionHead&) = default;
};

inline constexpr double kDefaultTemperature = 0.07;

/// Every trainable tensor. Penultimate embeddings are inputs, not parameters.
struct Model {
  FinalLayerParams text;
  FinalLayerParams image;
  ProjectionHead head;
  double log_tau = std::log(kDefaultTemperature);

  std::size_t dim() const noexcept { return head.dim(); }
  std::size_t vocab_size() const noexcept { return head.vocab_size(); }
  double tau() const noexcept { return std::exp(log_tau); }

  const FinalLayerParams& layer(Side s) const noexcept { return s == Side::text ? text : image; }

  friend bool operator==(const Model&, const Model&) = default;
};

/// Visits every tensor of a Model-shaped structure in a fixed order as a flat
/// span. Works for both parameters and gradients.
template <class M, class F>
void for_each_tensor(M& m, F&& f) {
  f("text.weight", std::span(m.text.weight.data()));
  f("text.bias", std::span(m.text.bias));
  f("image.weight", std::span(m.image.weight.data()));
  f("image.bias", std::span(m.image.bias));
  f("head.hidden_weight", std::span(m.head.hidden_weight.data()));
  f("head.hidden_bias", std::span(m.head.hidden_bias));
  f("head.output_weight", std::span(m.head.output_weight.data()));
  f("head.output_bias", std::span(m.head.output_bias));
  f("log_tau", std::span(&m.log_tau, 1));
}

/// Output layer copies the (vocab x d) word-embedding matrix, i.e. the
/// transpose of the usual d x vocab projection; hidden layer starts at
/// identity + noise_scale * N(0, 1).
inline ProjectionHead init_projection_head(const Matrix& word_embeddings, std::size_t dim,
                                           std::uint64_t seed, double noise_scale = 0.01) {
  if (word_embeddings.cols() != dim || word_embeddings.rows() == 0)
    throw ShapeError("init_projection_head: word embeddings are " +
                     std::to_string(word_embeddings.rows()) + "x" +
                     std::to_string(word_embeddings.cols()) + ", expected |V|x" + std::to_string(dim));
  ProjectionHead head;
  head.hidden_weight = Matrix::identity(dim);
  if (noise_scale != 0.0) {
    SplitMix64 rng(derive_seed(seed, 0x4ead));
    for (auto& v : head.hidden_weight.data()) v += noise_scale * rng.normal();
  }
  head.hidden_bias.assign(dim, 0.0);
  head.output_weight = word_embeddings;
  head.output_bias.assign(word_embeddings.rows(), 0.0);
  return head;
}

inline Model init_model(const Matrix& word_embeddings, std::uint64_t seed, double noise_scale = 0.01) {
  const std::size_t d = word_embeddings.cols();
  Model m;
  m.text = FinalLayerParams::identity(d);
  m.image = FinalLayerParams::identity(d);
  m.head = init_projection_head(word_embeddings, d, seed, noise_scale);
  m.log_tau = std::log(kDefaultTemperature);
  return m;
}

inline std::vector<double> final_layer_forward(std::span<const double> p, const FinalLayerParams& params) {
  if (p.size() != params.dim() || params.weight.rows() != params.dim() ||
      params.weight.cols() != params.dim())
    throw ShapeError("final_layer_forward: input dim " + std::to_string(p.size()) +
                     " does not match layer dim " + std::to_string(params.dim()));
  auto h = matvec(params.weight, p);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += p[i] + params.bias[i];
  return h;
}

struct HeadActivations {
  std::vector<double> pre_gelu;  // W1 h + b1
  std::vector<double> hidden;    // gelu(pre_gelu)
  std::vector<double> logits;    // W2 hidden + b2
};

inline HeadActivations head_forward(std::span<const double> h, const ProjectionHead& head) {
  if (h.size() != head.dim()) throw ShapeError("head_forward: dim mismatch");
  HeadActivations a;
  a.pre_gelu = matvec(head.hidden_weight, h);
  for (std::size_t i = 0; i < a.pre_gelu.size(); ++i) a.pre_gelu[i] += head.hidden_bias[i];
  a.hidden.resize(a.pre_gelu.size());
  for (std::size_t i = 0; i < a.hidden.size(); ++i) a.hidden[i] = gelu(a.pre_gelu[i]);
  a.logits = matvec(head.output_weight, a.hidden);
  for (std::size_t j = 0; j < a.logits.size(); ++j) a.logits[j] += head.output_bias[j];
  return a;
}

/// z_j = ln(1 + max(0, logit_j)), dense form.
inline std::vector<double> log_relu_dense(std::span<const double> logits) {
  std::vector<double> z(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (!std::isfinite(logits[j]))
      throw NumericError("sparse_activation: non-finite logit at term " + std::to_string(j));
    z[j] = logits[j] > 0.0 ? std::log1p(logits[j]) : 0.0;
  }
  return z;
}

inline SparseVector sparse_activation(std::span<const double> logits) {
  return SparseVector::from_dense(log_relu_dense(logits));
}

struct Encoded {
  std::vector<double> dense;
  SparseVector sparse;
};

inline Encoded encode(std::span<const double> penultimate, Side side, const Model& model) {
  auto h = final_layer_forward(penultimate, model.layer(side));
  const auto act = head_forward(h, model.head);
  return {std::move(h), sparse_activation(act.logits)};
}

inline std::vector<Encoded> encode_batch(const Matrix& penultimate, Side side, const Model& model) {
  std::vector<Encoded> out;
  out.reserve(penultimate.rows());
  for (std::size_t r = 0; r < penultimate.rows(); ++r) out.push_back(encode(penultimate.row(r), side, model));
  return out;
}

// --------------------------------------------------------------------------
// Checkpoints
//
//   "SDCK" | u32 version=1 | u64 step | u64 config_hash | f64 log_tau
//   | u32 tensor_count | per tensor: u32 name_len, name bytes, u32 rows,
//     u32 cols, rows*cols f32
//   | u64 FNV-1a over all preceding bytes
//
// Vectors are stored as rows x 1. log_tau is kept in 64-bit.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

inline void tensor_shape(const Model& m, const std::string& name, std::uint32_t& rows, std::uint32_t& cols) {
  auto sz = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  if (name == "text.weight") rows = sz(m.text.weight.rows()), cols = sz(m.text.weight.cols());
  else if (name == "image.weight") rows = sz(m.image.weight.rows()), cols = sz(m.image.weight.cols());
  else if (name == "head.hidden_weight")
    rows = sz(m.head.hidden_weight.rows()), cols = sz(m.head.hidden_weight.cols());
  else if (name == "head.output_weight")
    rows = sz(m.head.output_weight.rows()), cols = sz(m.head.output_weight.cols());
  else if (name == "text.bias") rows = sz(m.text.bias.size()), cols = 1;
  else if (name == "image.bias") rows = sz(m.image.bias.size()), cols = 1;
  else if (name == "head.hidden_bias") rows = sz(m.head.hidden_bias.size()), cols = 1;
  else if (name == "head.output_bias") rows = sz(m.head.output_bias.size()), cols = 1;
  else rows = 1, cols = 1;
}

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const Checkpoint& ck) {
  io::Writer w;
  w.bytes("SDCK");
  w.u32(kCheckpointVersion);
  w.u64(ck.step);
  w.u64(ck.config_hash);
  w.f64(ck.model.log_tau);
  w.u32(8);
  for_each_tensor(ck.model, [&](const std::string& name, std::span<const double> t) {
    if (name == "log_tau") return;
    std::uint32_t rows = 0, cols = 0;
    detail::tensor_shape(ck.model, name, rows, cols);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(rows);
    w.u32(cols);
    for (double v : t) w.f32(static_cast<float>(v));
  });
  const auto& buf = w.buffer();
  w.u64(io::fnv1a64(reinterpret_cast<const unsigned char*>(buf.data()), buf.size()));
  return w.buffer();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  io::Writer w;
  w.bytes(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  if (r.remaining() < 4 || r.bytes(4) != "SDCK") throw FormatError(path.string() + ": bad checkpoint magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  ck.step = r.u64();
  ck.config_hash = r.u64();
  ck.model.log_tau = r.f64();
  const std::uint32_t n = r.u32();
  if (n != 8) throw FormatError(path.string() + ": expected 8 tensors, found " + std::to_string(n));

  auto read_tensor = [&](const std::string& expected_name, std::uint32_t& rows, std::uint32_t& cols) {
    const std::uint32_t len = r.u32();
    const std::string name = r.bytes(len);
    if (name != expected_name)
      throw FormatError(path.string() + ": expected tensor '" + expected_name + "', found '" + name + "'");
    rows = r.u32();
    cols = r.u32();
    std::vector<double> values(static_cast<std::size_t>(rows) * cols);
    for (auto& v : values) v = r.f32();
    return values;
  };
  auto read_matrix = [&](const std::string& name) {
    std::uint32_t rows = 0, cols = 0;
    auto values = read_tensor(name, rows, cols);
    Matrix m(rows, cols);
    m.data() = std::move(values);
    return m;
  };
  auto read_vector = [&](const std::string& name) {
    std::uint32_t rows = 0, cols = 0;
    auto values = read_tensor(name, rows, cols);
    if (cols != 1) throw FormatError(path.string() + ": tensor '" + name + "' is not a vector");
    return values;
  };
  ck.model.text.weight = read_matrix("text.weight");
  ck.model.text.bias = read_vector("text.bias");
  ck.model.image.weight = read_matrix("image.weight");
  ck.model.image.bias = read_vector("image.bias");
  ck.model.head.hidden_weight = read_matrix("head.hidden_weight");
  ck.model.head.hidden_bias = read_vector("head.hidden_bias");
  ck.model.head.output_weight = read_matrix("head.output_weight");
  ck.model.head.output_bias = read_vector("head.output_bias");

  const std::size_t body = r.position();
  const std::uint64_t expected = io::fnv1a64(reinterpret_cast<const unsigned char*>(r.data_at(0)), body);
  if (r.u64() != expected) throw FormatError(path.string() + ": checkpoint checksum mismatch");

  const std::size_t d = ck.model.head.hidden_bias.size();
  const auto& m = ck.model;
  if (m.text.weight.rows() != d || m.text.weight.cols() != d || m.text.bias.size() != d ||
      m.image.weight.rows() != d || m.image.weight.cols() != d || m.image.bias.size() != d ||
      m.head.hidden_weight.rows() != d || m.head.hidden_weight.cols() != d ||
      m.head.output_weight.cols() != d || m.head.output_weight.rows() != m.head.output_bias.size())
    throw ShapeError(path.string() + ": inconsistent tensor shapes");
  return ck;
}

/// Model as it would be after a save/load round trip (f32 tensors).
inline Model round_to_f32(Model m) {
  for_each_tensor(m, [](const std::string& name, std::span<double> t) {
    if (name == "log_tau") return;
    for (auto& v : t) v = static_cast<double>(static_cast<float>(v));
  });
  return m;
}

}  // namespace jsd
