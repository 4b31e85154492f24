#pragma once

// Run configuration: one JSON document per run, validated strictly (unknown
// keys and wrong types are rejected, all problems reported together).
// Relative paths resolve against the directory holding the config file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "experiments.hpp"
#include "trainer.hpp"

namespace jsd {

struct DataPaths {
  std::filesystem::path images, captions, train_pairs, val_pairs, test_pairs, word_embeddings;
  std::optional<std::filesystem::path> vocab;
};

struct SyntheticConfig {
  SyntheticSpec spec;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
};

struct PecConfig {
  bool enabled = false;
  std::uint32_t min_doc_freq = 1;
  bool apply_to_queries = false;
};

struct EvalConfig {
  Split split = Split::test;
  std::size_t k = 10;
  bool flops_on_train = false;
};

struct SweepConfig {
  std::vector<double> w1{0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<double> w2{0.1, 0.3, 0.5, 0.7, 0.9};
  SweepPolicy policy = SweepPolicy::retrain;
  SweepMetric metric = SweepMetric::sparse;
};

struct ReportVariant {
  std::string name;
  std::filesystem::path checkpoint;
  bool pec = false;
};

struct RunConfig {
  std::optional<DataPaths> data;
  std::optional<SyntheticConfig> synthetic;
  TrainConfig train;
  PecConfig pec;
  EvalConfig eval;
  SweepConfig sweep;
  std::vector<ReportVariant> report;
  std::filesystem::path output_dir = "out";
  nlohmann::json document;  // as validated, after overrides
  std::uint64_t hash = 0;   // FNV-1a of document.dump()
};

namespace detail {

class SchemaChecker {
 public:
  explicit SchemaChecker(std::vector<std::string>& errors) : errors_(errors) {}

  bool object(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) {
      errors_.push_back(where + ": expected an object");
      return false;
    }
    for (const auto& [k, v] : j.items())
      if (!allowed.contains(k)) errors_.push_back(where + ": unknown key '" + k + "'");
    return true;
  }

  template <class T>
  void number(const nlohmann::json& j, const std::string& key, const std::string& where, T& out) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) {
        errors_.push_back(where + "." + key + ": expected a non-negative integer");
        return;
      }
      out = v.get<T>();
    } else {
      if (!v.is_number()) {
        errors_.push_back(where + "." + key + ": expected a number");
        return;
      }
      out = v.get<T>();
    }
  }

  void boolean(const nlohmann::json& j, const std::string& key, const std::string& where, bool& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_boolean()) {
      errors_.push_back(where + "." + key + ": expected a boolean");
      return;
    }
    out = j[key].get<bool>();
  }

  void string(const nlohmann::json& j, const std::string& key, const std::string& where, std::string& out,
              bool required = false) {
    if (!j.contains(key)) {
      if (required) errors_.push_back(where + "." + key + ": required");
      return;
    }
    if (!j[key].is_string()) {
      errors_.push_back(where + "." + key + ": expected a string");
      return;
    }
    out = j[key].get<std::string>();
  }

  void numbers(const nlohmann::json& j, const std::string& key, const std::string& where, std::vector<double>& out,
               std::size_t exact_size = 0) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (!v.is_array() || (exact_size != 0 && v.size() != exact_size)) {
      errors_.push_back(where + "." + key + ": expected an array of " +
                        (exact_size ? std::to_string(exact_size) + " " : std::string()) + "numbers");
      return;
    }
    std::vector<double> tmp;
    for (const auto& x : v) {
      if (!x.is_number()) {
        errors_.push_back(where + "." + key + ": expected numbers");
        return;
      }
      tmp.push_back(x.get<double>());
    }
    out = std::move(tmp);
  }

  void error(std::string msg) { errors_.push_back(std::move(msg)); }

 private:
  std::vector<std::string>& errors_;
};

}  // namespace detail

/// Validates `doc` and builds a RunConfig; relative paths resolve against
/// `base_dir`. Throws ConfigError listing every problem found.
inline RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".") {
  std::vector<std::string> errors;
  detail::SchemaChecker check(errors);
  RunConfig rc;
  auto resolve_path = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };

  if (!check.object(doc, "config", {"data", "synthetic", "train", "pec", "eval", "sweep", "report", "output_dir"}))
    throw ConfigError("config: expected a JSON object");

  if (doc.contains("data") && check.object(doc["data"], "data",
                                           {"images", "captions", "train_pairs", "val_pairs", "test_pairs",
                                            "word_embeddings", "vocab"})) {
    const auto& d = doc["data"];
    DataPaths paths;
    std::string s;
    for (auto [key, dst] : {std::pair{"images", &paths.images}, std::pair{"captions", &paths.captions},
                            std::pair{"train_pairs", &paths.train_pairs}, std::pair{"val_pairs", &paths.val_pairs},
                            std::pair{"test_pairs", &paths.test_pairs},
                            std::pair{"word_embeddings", &paths.word_embeddings}}) {
      s.clear();
      check.string(d, key, "data", s, true);
      if (!s.empty()) *dst = resolve_path(s);
    }
    if (d.contains("vocab")) {
      s.clear();
      check.string(d, "vocab", "data", s);
      if (!s.empty()) paths.vocab = resolve_path(s);
    }
    rc.data = paths;
  }

  if (doc.contains("synthetic") &&
      check.object(doc["synthetic"], "synthetic",
                   {"n_images", "captions_per_image", "dim", "vocab_size", "n_clusters", "noise_std", "seed",
                    "word_embedding_std", "n_val", "n_test"})) {
    const auto& s = doc["synthetic"];
    SyntheticConfig sc;
    check.number(s, "n_images", "synthetic", sc.spec.n_images);
    check.number(s, "captions_per_image", "synthetic", sc.spec.captions_per_image);
    check.number(s, "dim", "synthetic", sc.spec.dim);
    check.number(s, "vocab_size", "synthetic", sc.spec.vocab_size);
    check.number(s, "n_clusters", "synthetic", sc.spec.n_clusters);
    check.number(s, "noise_std", "synthetic", sc.spec.noise_std);
    check.number(s, "seed", "synthetic", sc.spec.seed);
    check.number(s, "word_embedding_std", "synthetic", sc.spec.word_embedding_std);
    check.number(s, "n_val", "synthetic", sc.n_val);
    check.number(s, "n_test", "synthetic", sc.n_test);
    rc.synthetic = sc;
  }
  if (doc.contains("data") == doc.contains("synthetic"))
    check.error("config: exactly one of 'data' or 'synthetic' is required");

  if (doc.contains("train") &&
      check.object(doc["train"], "train",
                   {"epochs", "batch_size", "learning_rate", "lambda", "w", "eta_text_max", "eta_image_max",
                    "warmup_steps", "self_distillation", "finetune_final_layer", "seed", "val_every",
                    "head_init_noise", "initial_tau", "weight_decay"})) {
    const auto& t = doc["train"];
    auto& c = rc.train;
    check.number(t, "epochs", "train", c.epochs);
    check.number(t, "batch_size", "train", c.batch_size);
    check.number(t, "learning_rate", "train", c.learning_rate);
    std::vector<double> lambda{c.lambda.dense, c.lambda.sparse, c.lambda.inter};
    check.numbers(t, "lambda", "train", lambda, 3);
    c.lambda = {lambda[0], lambda[1], lambda[2]};
    std::vector<double> w{c.weights.dense, c.weights.sparse};
    check.numbers(t, "w", "train", w, 2);
    c.weights = {w[0], w[1]};
    check.number(t, "eta_text_max", "train", c.schedule.eta_text_max);
    check.number(t, "eta_image_max", "train", c.schedule.eta_image_max);
    check.number(t, "warmup_steps", "train", c.schedule.warmup_steps);
    check.boolean(t, "self_distillation", "train", c.self_distillation);
    check.boolean(t, "finetune_final_layer", "train", c.finetune_final_layer);
    check.number(t, "seed", "train", c.seed);
    check.number(t, "val_every", "train", c.val_every);
    check.number(t, "head_init_noise", "train", c.head_init_noise);
    check.number(t, "initial_tau", "train", c.initial_tau);
    check.number(t, "weight_decay", "train", c.weight_decay);
  }

  if (doc.contains("pec") && check.object(doc["pec"], "pec", {"enabled", "min_doc_freq", "apply_to_queries"})) {
    const auto& p = doc["pec"];
    check.boolean(p, "enabled", "pec", rc.pec.enabled);
    check.number(p, "min_doc_freq", "pec", rc.pec.min_doc_freq);
    check.boolean(p, "apply_to_queries", "pec", rc.pec.apply_to_queries);
    if (rc.pec.min_doc_freq < 1) check.error("pec.min_doc_freq: must be >= 1");
  }

  if (doc.contains("eval") && check.object(doc["eval"], "eval", {"split", "k", "flops_split"})) {
    const auto& e = doc["eval"];
    std::string split = "test", flops = "eval";
    check.string(e, "split", "eval", split);
    check.string(e, "flops_split", "eval", flops);
    check.number(e, "k", "eval", rc.eval.k);
    if (split == "train") rc.eval.split = Split::train;
    else if (split == "val") rc.eval.split = Split::val;
    else if (split == "test") rc.eval.split = Split::test;
    else check.error("eval.split: expected train|val|test");
    if (flops == "train") rc.eval.flops_on_train = true;
    else if (flops != "eval") check.error("eval.flops_split: expected eval|train");
    if (rc.eval.k < 10) check.error("eval.k: must be >= 10 (MRR@10 needs ten ranks)");
  }

  if (doc.contains("sweep") && check.object(doc["sweep"], "sweep", {"w1", "w2", "policy", "metric"})) {
    const auto& s = doc["sweep"];
    check.numbers(s, "w1", "sweep", rc.sweep.w1);
    check.numbers(s, "w2", "sweep", rc.sweep.w2);
    std::string policy = "retrain", metric = "sparse";
    check.string(s, "policy", "sweep", policy);
    check.string(s, "metric", "sweep", metric);
    if (policy == "rescore") rc.sweep.policy = SweepPolicy::rescore;
    else if (policy != "retrain") check.error("sweep.policy: expected retrain|rescore");
    if (metric == "inter") rc.sweep.metric = SweepMetric::inter;
    else if (metric != "sparse") check.error("sweep.metric: expected sparse|inter");
    if (rc.sweep.w1.empty() || rc.sweep.w2.empty()) check.error("sweep: grids must be non-empty");
  }

  if (doc.contains("report") && check.object(doc["report"], "report", {"variants"})) {
    const auto& variants = doc["report"].value("variants", nlohmann::json::array());
    if (!variants.is_array()) check.error("report.variants: expected an array");
    else
      for (std::size_t i = 0; i < variants.size(); ++i) {
        const std::string where = "report.variants[" + std::to_string(i) + "]";
        if (!check.object(variants[i], where, {"name", "checkpoint", "pec"})) continue;
        ReportVariant v;
        std::string ck;
        check.string(variants[i], "name", where, v.name, true);
        check.string(variants[i], "checkpoint", where, ck, true);
        check.boolean(variants[i], "pec", where, v.pec);
        v.checkpoint = resolve_path(ck);
        rc.report.push_back(std::move(v));
      }
  }

  if (doc.contains("output_dir")) {
    std::string out;
    check.string(doc, "output_dir", "config", out);
    if (!out.empty()) rc.output_dir = resolve_path(out);
  } else {
    rc.output_dir = base_dir / "out";
  }

  if (errors.empty()) {
    try {
      rc.train.validate();
      if (rc.synthetic) rc.synthetic->spec.validate();
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid configuration:";
    for (const auto& e : errors) os << "\n  - " << e;
    throw ConfigError(os.str());
  }
  rc.document = doc;
  rc.hash = io::fnv1a64(doc.dump());
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  if (seed_override) {
    if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
    doc["train"]["seed"] = *seed_override;
  }
  return parse_run_config(doc, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

// --------------------------------------------------------------------------
// Materialised inputs for a run

struct Workspace {
  EmbeddingTable images;
  EmbeddingTable captions;
  PairedDataset train, val, test;
  Matrix word_embeddings;
  std::optional<Vocabulary> vocab;

  const PairedDataset& split(Split s) const noexcept {
    return s == Split::train ? train : s == Split::val ? val : test;
  }
  ResolvedPairs resolved(Split s) const { return resolve(split(s), images, captions); }

  TrainData train_data() const { return {images, captions, resolved(Split::train), resolved(Split::val), word_embeddings}; }
  EvalData eval_data(Split s) const { return {images, captions, resolved(s)}; }
};

/// Loads (or generates) everything the config points at. Missing or
/// malformed files surface as the corresponding library errors.
inline Workspace load_workspace(const RunConfig& rc) {
  Workspace ws;
  if (rc.synthetic) {
    const auto& sc = *rc.synthetic;
    auto gen = generate_synthetic(sc.spec);
    ws.images = std::move(gen.images);
    ws.captions = std::move(gen.captions);
    auto parts = split_dataset(gen.pairs, sc.n_val, sc.n_test, sc.spec.seed);
    ws.train = std::move(parts.train);
    // Without held-out images the planted set doubles as validation and test.
    ws.val = sc.n_val ? std::move(parts.val) : PairedDataset{ws.train.pairs, Split::val};
    ws.test = sc.n_test ? std::move(parts.test) : PairedDataset{ws.val.pairs, Split::test};
    ws.word_embeddings = synthetic_word_embeddings(sc.spec);
    ws.vocab = synthetic_vocabulary(sc.spec.vocab_size);
    return ws;
  }
  const auto& d = *rc.data;
  ws.images = load_embeddings(d.images);
  ws.captions = load_embeddings(d.captions);
  if (ws.images.dim() != ws.captions.dim()) throw ShapeError("image and caption embeddings differ in dim");
  ws.train = load_pairs(d.train_pairs, ws.images, ws.captions, Split::train);
  ws.val = load_pairs(d.val_pairs, ws.images, ws.captions, Split::val);
  ws.test = load_pairs(d.test_pairs, ws.images, ws.captions, Split::test);
  std::set<std::string> seen;
  for (const auto* part : {&ws.train, &ws.val, &ws.test})
    for (const auto& p : part->pairs)
      if (!seen.insert(p.image_id).second)
        throw DuplicateError("image '" + p.image_id + "' appears in more than one split");
  ws.word_embeddings = load_embeddings(d.word_embeddings).to_matrix();
  if (ws.word_embeddings.cols() != ws.images.dim())
    throw ShapeError("word embeddings have dim " + std::to_string(ws.word_embeddings.cols()) + ", expected " +
                     std::to_string(ws.images.dim()));
  if (d.vocab) {
    ws.vocab = load_vocabulary(*d.vocab);
    if (ws.vocab->size() != ws.word_embeddings.rows())
      throw ShapeError("vocabulary has " + std::to_string(ws.vocab->size()) + " tokens but word embeddings have " +
                       std::to_string(ws.word_embeddings.rows()) + " rows");
  }
  return ws;
}

}  // namespace jsd
