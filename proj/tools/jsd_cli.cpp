// Command-line entry point. Exit codes: 0 ok, 2 config/input error,
// 3 numeric failure, 4 verification failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "jsd/config.hpp"
#include "jsd/data_model.hpp"
#include "jsd/eval.hpp"
#include "jsd/experiments.hpp"
#include "jsd/grad.hpp"
#include "jsd/index.hpp"
#include "jsd/model.hpp"
#include "jsd/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInputError = 2;
constexpr int kNumericError = 3;
constexpr int kVerificationError = 4;
constexpr double kGradTolerance = 1e-4;

unsigned thread_count() {
  if (const char* env = std::getenv("JSD_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return 1;
}

struct Options {
  fs::path config;
  std::optional<std::uint64_t> seed;
  fs::path out;
  std::size_t k = 10;
  std::optional<std::size_t> eval_k;
  bool skip_gradcheck = false;
  fs::path checkpoint;
  std::string side = "image";
  fs::path index;
  fs::path queries;
  std::string query_id;
  fs::path mask;
  fs::path pairs;
};

jsd::RunConfig load_config(const Options& o) { return jsd::load_run_config(o.config, o.seed); }

fs::path out_dir(const Options& o, const jsd::RunConfig& rc) {
  const fs::path dir = o.out.empty() ? rc.output_dir : o.out;
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw jsd::FormatError("cannot open '" + p.string() + "' for writing");
  return out;
}

jsd::Objective gate_objective(const jsd::TrainConfig& cfg) {
  jsd::Objective obj;
  obj.lambda = cfg.lambda;
  obj.weights = cfg.weights;
  obj.schedule = cfg.schedule;
  obj.self_distillation = cfg.self_distillation;
  obj.step = cfg.schedule.warmup_steps;
  return obj;
}

int run_gradcheck(const jsd::TrainConfig& cfg, std::uint64_t seed, std::ostream& os) {
  const auto problem = jsd::make_gradcheck_problem(seed);
  const auto report = jsd::finite_diff_check(problem.model, problem.batch, gate_objective(cfg));
  jsd::write_report(os, report);
  return report.passed(kGradTolerance) ? kOk : kVerificationError;
}

void write_sparse_jsonl(std::ostream& os, const std::string& id, const jsd::SparseVector& v) {
  nlohmann::json j{{"id", id}, {"dim", v.dim()}, {"terms", v.terms()}, {"weights", v.weights()}};
  os << j.dump() << '\n';
}

jsd::SparseVector parse_sparse(const nlohmann::json& j) {
  return jsd::SparseVector(j.at("dim").get<std::size_t>(), j.at("terms").get<std::vector<jsd::TermId>>(),
                           j.at("weights").get<std::vector<double>>());
}

// ---------------------------------------------------------------- commands

int cmd_synth(const Options& o) {
  const auto rc = load_config(o);
  const auto ws = jsd::load_workspace(rc);
  const auto dir = out_dir(o, rc);
  jsd::save_embeddings(dir / "images.sde", ws.images);
  jsd::save_embeddings(dir / "captions.sde", ws.captions);
  jsd::save_pairs(dir / "train_pairs.jsonl", ws.train);
  jsd::save_pairs(dir / "val_pairs.jsonl", ws.val);
  jsd::save_pairs(dir / "test_pairs.jsonl", ws.test);
  std::vector<std::string> word_ids;
  for (std::size_t i = 0; i < ws.word_embeddings.rows(); ++i)
    word_ids.push_back(ws.vocab ? ws.vocab->token(i) : std::to_string(i));
  jsd::save_embeddings(dir / "word_embeddings.sde", jsd::EmbeddingTable::from_matrix(word_ids, ws.word_embeddings));
  if (ws.vocab) jsd::save_vocabulary(dir / "vocab.txt", *ws.vocab);
  std::cout << "wrote synthetic data to " << dir.string() << '\n';
  return kOk;
}

int cmd_train(const Options& o) {
  const auto rc = load_config(o);
  if (!o.skip_gradcheck) {
    std::ostringstream report;
    if (run_gradcheck(rc.train, rc.train.seed, report) != kOk) {
      std::cerr << "gradient check gate failed:\n" << report.str();
      return kVerificationError;
    }
  }
  const auto ws = jsd::load_workspace(rc);
  const auto dir = out_dir(o, rc);
  auto log = open_out(dir / "train_report.jsonl");
  const auto result = jsd::fit(rc.train, ws.train_data(), rc.hash, [&](const jsd::EpochRecord& rec) {
    auto j = rec.to_json();
    j["config_hash"] = rc.hash;
    log << j.dump() << '\n';
  });
  jsd::save_checkpoint(dir / "checkpoint.bin", result.best);
  jsd::save_checkpoint(dir / "checkpoint_last.bin", result.last);
  if (result.report.diverged) {
    std::cerr << "training diverged: " << result.report.divergence_reason << " (kept last good checkpoint)\n";
    return kNumericError;
  }
  std::cout << "best epoch " << result.report.best_epoch << ", checkpoint " << (dir / "checkpoint.bin").string()
            << '\n';
  return kOk;
}

int cmd_encode(const Options& o) {
  const auto rc = load_config(o);
  const auto ws = jsd::load_workspace(rc);
  const auto model = jsd::load_checkpoint(o.checkpoint).model;
  const auto dir = out_dir(o, rc);
  const auto pairs = ws.split(rc.eval.split);
  const bool text = o.side == "text";
  const auto& table = text ? ws.captions : ws.images;
  std::vector<std::string> ids;
  for (const auto& p : pairs.pairs) {
    if (text) ids.insert(ids.end(), p.caption_ids.begin(), p.caption_ids.end());
    else ids.push_back(p.image_id);
  }
  auto sparse_out = open_out(dir / (o.side + "_sparse.jsonl"));
  jsd::Matrix dense(ids.size(), table.dim());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto enc = jsd::encode(table.row_f64(table.find(ids[r])), text ? jsd::Side::text : jsd::Side::image, model);
    std::copy(enc.dense.begin(), enc.dense.end(), dense.row(r).begin());
    write_sparse_jsonl(sparse_out, ids[r], enc.sparse);
  }
  jsd::save_embeddings(dir / (o.side + "_dense.sde"), jsd::EmbeddingTable::from_matrix(ids, dense));
  return kOk;
}

int cmd_index(const Options& o) {
  const auto rc = load_config(o);
  const auto ws = jsd::load_workspace(rc);
  const auto model = jsd::load_checkpoint(o.checkpoint).model;
  const auto dir = out_dir(o, rc);
  std::optional<jsd::VocabMask> mask;
  if (rc.pec.enabled) {
    mask = jsd::pec_mask_for(model, ws.captions, ws.resolved(jsd::Split::train), rc.pec.min_doc_freq);
    jsd::save_mask(dir / "pec_mask.bin", *mask);
  }
  const auto& pairs = ws.split(rc.eval.split);
  std::vector<jsd::IndexedDoc> docs;
  std::vector<std::string> ids;
  for (const auto& p : pairs.pairs) {
    const auto enc = jsd::encode(ws.images.row_f64(ws.images.find(p.image_id)), jsd::Side::image, model);
    docs.push_back({static_cast<jsd::DocId>(docs.size()), enc.sparse});
    ids.push_back(p.image_id);
  }
  if (docs.empty()) throw jsd::ConfigError("index: evaluation split has no images");
  const auto index = jsd::build_index(docs, mask ? &*mask : nullptr);
  jsd::save_index(dir / "index.sdix", index);
  jsd::io::write_lines(jsd::ids_sidecar(dir / "index.sdix"), ids);
  std::cout << index.doc_count() << " documents, " << index.posting_count() << " postings\n";
  return kOk;
}

int cmd_search(const Options& o) {
  if (o.k < 1) throw jsd::ConfigError("--k must be >= 1");
  const auto index = jsd::load_index(o.index);
  std::vector<std::string> names;
  if (const auto sidecar = jsd::ids_sidecar(o.index); fs::exists(sidecar)) names = jsd::io::read_lines(sidecar);
  std::ifstream in(o.queries);
  if (!in) throw jsd::FormatError("cannot open queries '" + o.queries.string() + "'");
  std::optional<jsd::SparseVector> query;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (o.query_id.empty() || j.at("id").get<std::string>() == o.query_id) {
        query = parse_sparse(j);
        break;
      }
    } catch (const nlohmann::json::exception& e) {
      throw jsd::FormatError(o.queries.string() + ": " + e.what());
    }
  }
  if (!query) throw jsd::ConfigError("no matching query in '" + o.queries.string() + "'");
  if (!o.mask.empty()) query = jsd::apply_mask(*query, jsd::load_mask(o.mask));
  const auto hits = index.search(*query, o.k);
  for (std::size_t r = 0; r < hits.size(); ++r) {
    const auto& h = hits[r];
    const std::string name = h.doc < names.size() ? names[h.doc] : std::to_string(h.doc);
    std::cout << (r + 1) << '\t' << name << '\t' << jsd::format_fixed(h.score) << '\n';
  }
  return kOk;
}

int cmd_eval(const Options& o) {
  const auto rc = load_config(o);
  auto ws = jsd::load_workspace(rc);
  if (!o.pairs.empty()) {
    auto& dst = rc.eval.split == jsd::Split::train ? ws.train : rc.eval.split == jsd::Split::val ? ws.val : ws.test;
    dst = jsd::load_pairs(o.pairs, ws.images, ws.captions, rc.eval.split);
  }
  if (ws.split(rc.eval.split).caption_count() == 0) throw jsd::ConfigError("eval: no queries in evaluation split");
  const auto ck = jsd::load_checkpoint(o.checkpoint);
  std::optional<jsd::VocabMask> mask;
  if (rc.pec.enabled)
    mask = jsd::pec_mask_for(ck.model, ws.captions, ws.resolved(jsd::Split::train), rc.pec.min_doc_freq);
  jsd::EvalOptions opt;
  opt.k = o.eval_k.value_or(rc.eval.k);
  if (opt.k < 10) throw jsd::ConfigError("--k must be >= 10 for MRR@10");
  opt.threads = thread_count();
  opt.mask = mask ? &*mask : nullptr;
  opt.mask_queries = rc.pec.apply_to_queries;
  const auto ev = jsd::evaluate_retrieval(ck.model, ws.images, ws.captions, ws.resolved(rc.eval.split), opt);
  double flops = ev.flops.flops;
  if (rc.eval.flops_on_train) {
    auto train_opt = opt;
    flops = jsd::evaluate_retrieval(ck.model, ws.images, ws.captions, ws.resolved(jsd::Split::train), train_opt)
                .flops.flops;
  }
  nlohmann::json report{{"config_hash", rc.hash},
                        {"checkpoint_config_hash", ck.config_hash},
                        {"split", jsd::to_string(rc.eval.split)},
                        {"sparse", ev.sparse.to_json()},
                        {"dense", ev.dense.to_json()},
                        {"flops", flops},
                        {"flops_split", rc.eval.flops_on_train ? "train" : "eval"},
                        {"pec", rc.pec.enabled}};
  const auto dir = out_dir(o, rc);
  open_out(dir / "metrics.json") << report.dump(2) << '\n';
  std::cout << report.dump(2) << '\n';
  return kOk;
}

int cmd_sweep(const Options& o) {
  const auto rc = load_config(o);
  const auto ws = jsd::load_workspace(rc);
  std::optional<jsd::Model> ck;
  if (!o.checkpoint.empty()) ck = jsd::load_checkpoint(o.checkpoint).model;
  const auto rows = jsd::weight_sweep(rc.train, ws.train_data(), ws.eval_data(rc.eval.split), rc.sweep.w1,
                                      rc.sweep.w2, rc.sweep.policy, rc.sweep.metric, ck ? &*ck : nullptr,
                                      thread_count());
  const auto dir = out_dir(o, rc);
  auto out = open_out(dir / "sweep.csv");
  jsd::write_sweep_csv(out, rows);
  jsd::write_sweep_csv(std::cout, rows);
  return kOk;
}

int cmd_gradcheck(const Options& o) {
  jsd::TrainConfig cfg;
  std::uint64_t seed = 7;
  if (!o.config.empty()) {
    const auto rc = load_config(o);
    cfg = rc.train;
    seed = rc.train.seed;
  } else {
    cfg.schedule = {0.01, 0.01, 1};
    if (o.seed) seed = *o.seed;
  }
  return run_gradcheck(cfg, seed, std::cout);
}

int cmd_report(const Options& o) {
  const auto rc = load_config(o);
  if (rc.report.empty()) throw jsd::ConfigError("report: config lists no variants");
  const auto ws = jsd::load_workspace(rc);
  std::vector<jsd::TradeoffVariant> variants;
  for (const auto& v : rc.report) {
    jsd::TradeoffVariant tv{v.name, jsd::load_checkpoint(v.checkpoint).model, std::nullopt, rc.pec.apply_to_queries};
    if (v.pec) tv.mask = jsd::pec_mask_for(tv.model, ws.captions, ws.resolved(jsd::Split::train), rc.pec.min_doc_freq);
    variants.push_back(std::move(tv));
  }
  const auto rows = jsd::tradeoff_report(variants, ws.eval_data(rc.eval.split), thread_count());
  const auto dir = out_dir(o, rc);
  auto out = open_out(dir / "tradeoff.csv");
  jsd::write_tradeoff_csv(out, rows);
  jsd::write_tradeoff_csv(std::cout, rows);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint sparse-dense text-image retriever"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub, bool required = true) {
    auto* opt = sub->add_option("--config", o.config, "Run configuration (JSON)");
    if (required) opt->required();
  };
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s; }, "Override train.seed");
  };
  auto add_out = [&](CLI::App* sub) { sub->add_option("--out", o.out, "Output directory"); };

  auto* synth = app.add_subcommand("synth", "Write the configured synthetic dataset to disk");
  add_config(synth);
  add_out(synth);

  auto* train = app.add_subcommand("train", "Train and write checkpoint + per-epoch report");
  add_config(train);
  add_seed(train);
  add_out(train);
  train->add_flag("--skip-gradcheck", o.skip_gradcheck, "Skip the gradient-check gate");

  auto* encode = app.add_subcommand("encode", "Encode one side of the evaluation split");
  add_config(encode);
  add_out(encode);
  encode->add_option("--checkpoint", o.checkpoint)->required();
  encode->add_option("--side", o.side)->check(CLI::IsMember({"text", "image"}));

  auto* index = app.add_subcommand("index", "Build the inverted index over evaluation images");
  add_config(index);
  add_out(index);
  index->add_option("--checkpoint", o.checkpoint)->required();

  auto* search = app.add_subcommand("search", "Top-k search; prints rank, id, score as TSV");
  search->add_option("--index", o.index)->required();
  search->add_option("--queries", o.queries, "Sparse query vectors (JSON lines)")->required();
  search->add_option("--query-id", o.query_id, "Query to run (default: first)");
  search->add_option("--mask", o.mask, "Vocabulary mask applied to the query");
  search->add_option("--k", o.k);

  auto* eval = app.add_subcommand("eval", "Write metrics.json for the evaluation split");
  add_config(eval);
  add_seed(eval);
  add_out(eval);
  eval->add_option("--checkpoint", o.checkpoint)->required();
  eval->add_option("--pairs", o.pairs, "Override the evaluation pairs manifest");
  eval->add_option_function<std::size_t>("--k", [&](const std::size_t& k) { o.eval_k = k; }, "Ranking depth");

  auto* sweep = app.add_subcommand("sweep", "Integration-weight grid; writes sweep.csv");
  add_config(sweep);
  add_seed(sweep);
  add_out(sweep);
  sweep->add_option("--checkpoint", o.checkpoint, "Checkpoint for the rescore policy");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient report");
  add_config(gradcheck, false);
  add_seed(gradcheck);

  auto* report = app.add_subcommand("report", "Effectiveness vs FLOPs table; writes tradeoff.csv");
  add_config(report);
  add_out(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o);
    if (*encode) return cmd_encode(o);
    if (*index) return cmd_index(o);
    if (*search) return cmd_search(o);
    if (*eval) return cmd_eval(o);
    if (*sweep) return cmd_sweep(o);
    if (*gradcheck) return cmd_gradcheck(o);
    if (*report) return cmd_report(o);
  } catch (const jsd::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const jsd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  }
  return kInputError;
}
