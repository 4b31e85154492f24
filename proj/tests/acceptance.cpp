// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Tolerances and runtime limits are fixed here.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "jsd/experiments.hpp"
#include "jsd/grad.hpp"
#include "oracles.hpp"

using namespace jsd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!o.pass) ++failures;
  std::printf("%s [%d] %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Planted {
  SyntheticSpec spec;
  SyntheticData data;
  ResolvedPairs pairs;
  Matrix words;
  explicit Planted(std::uint64_t seed = 7) {
    spec.seed = seed;  // defaults: 50 images, k=2, d=16, |V|=64, noise 0.05
    data = generate_synthetic(spec);
    pairs = resolve(data.pairs, data.images, data.captions);
    words = synthetic_word_embeddings(spec);
  }
  TrainData train() const { return {data.images, data.captions, pairs, pairs, words}; }
  RetrievalEval evaluate(const Model& m, const VocabMask* mask = nullptr) const {
    EvalOptions opt;
    opt.mask = mask;
    return evaluate_retrieval(m, data.images, data.captions, pairs, opt);
  }
};

TrainConfig full_config(std::uint64_t seed = 7) {
  TrainConfig cfg;  // 200 epochs, batch 10, lambda (1,1,1), w (0.3,0.7), eta warm-up over 500 steps
  cfg.seed = seed;
  return cfg;
}

// ------------------------------------------------------------------ criteria

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto p = make_gradcheck_problem(7, 8, 16, 64);
  Objective obj;
  obj.lambda = {1, 1, 1};
  obj.weights = {0.3, 0.7};
  obj.schedule = {0.01, 0.01, 500};
  obj.step = 250;  // mid warm-up: every term of the objective is active
  const auto report = finite_diff_check(p.model, p.batch, obj, 1e-5);
  const double secs = seconds_since(t0);
  std::size_t kinks = 0, checked = 0, covered = 0, total = 0;
  for (const auto& t : report.tensors) kinks += t.kinks, checked += t.checked;
  for_each_tensor(p.model, [&](const std::string&, std::span<const double> t) { total += t.size(); });
  covered = kinks + checked;
  const bool ok = report.passed(1e-4) && covered == total && report.tensors.size() == 9 && secs < 30.0;
  return {ok, fmt("max rel err %.3e over %zu tensors, %zu coords checked, %zu kinks (tol 1e-4, < 30 s)",
                  report.max_rel_error(), report.tensors.size(), checked, kinks)};
}

Outcome loss_closed_forms() {
  double worst_lnn = 0.0;
  for (std::size_t n : {2u, 4u, 8u, 64u}) {
    const Matrix s(n, n, 0.3);
    worst_lnn = std::max(worst_lnn, std::abs(contrastive_bidirectional(s) - std::log(double(n))));
  }
  SplitMix64 rng(2);
  double worst_entropy = 0.0, worst_shift = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix t(8, 8);
    for (auto& v : t.data()) v = 2.0 * rng.normal();
    worst_entropy = std::max(worst_entropy, std::abs(distill_loss(t, t) - oracle::entropy(oracle::to_mat(t))));
    Matrix shifted = t;
    for (std::size_t r = 0; r < 8; ++r)
      for (auto& v : shifted.row(r)) v += 5.0 * static_cast<double>(r) - 7.0;
    worst_shift = std::max(worst_shift, std::abs(infonce_directional(shifted, Direction::rows) -
                                                 infonce_directional(t, Direction::rows)));
  }
  const bool ok = worst_lnn <= 1e-9 && worst_entropy <= 1e-9 && worst_shift <= 1e-12;
  return {ok, fmt("|InfoNCE - ln N| %.2e (tol 1e-9), |distill(T,T) - H(T)| %.2e (tol 1e-9), row-shift delta %.2e "
                  "(tol 1e-12)",
                  worst_lnn, worst_entropy, worst_shift)};
}

Outcome index_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(3);
  const std::size_t vocab = 256;
  // Weights from a small grid so equal scores (and id tie-breaks) occur.
  auto draw = [&](double density) {
    std::vector<double> d(vocab, 0.0);
    for (auto& x : d)
      if (rng.uniform() < density) x = 0.5 * static_cast<double>(1 + rng.below(4));
    return SparseVector::from_dense(d);
  };
  std::vector<IndexedDoc> docs;
  for (std::size_t i = 0; i < 1000; ++i) docs.push_back({static_cast<DocId>(i), draw(0.03)});
  const auto idx = build_index(docs);
  std::size_t id_mismatch = 0, ties_seen = 0;
  double worst = 0.0;
  for (int q = 0; q < 100; ++q) {
    const auto query = draw(0.05);
    const auto got = idx.search(query, 10);
    const auto want = oracle::brute_force_topk(docs, query, 10);
    if (got.size() != want.size()) {
      ++id_mismatch;
      continue;
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
      id_mismatch += got[i].doc != want[i].doc;
      worst = std::max(worst, std::abs(got[i].score - want[i].score));
      if (i && got[i].score == got[i - 1].score) ++ties_seen;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = id_mismatch == 0 && worst <= 1e-9 && secs < 10.0;
  return {ok, fmt("1000 docs x 100 queries: %zu id mismatches, max score diff %.2e (tol 1e-9), %zu tied neighbours, "
                  "< 10 s",
                  id_mismatch, worst, ties_seen)};
}

Outcome synthetic_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  const Planted p;
  const auto result = fit(full_config(), p.train());
  const double secs = seconds_since(t0);
  const auto init = p.evaluate(initial_model(full_config(), p.words));
  const auto best = p.evaluate(result.best.model);
  const bool ok = !result.report.diverged && best.sparse.recall_1 >= 0.95 && best.dense.recall_1 >= init.dense.recall_1 &&
                  result.report.epochs.size() - 1 <= 200 && secs < 300.0;
  return {ok, fmt("best epoch %zu: sparse R@1 %.4f (>= 0.95), dense R@1 %.4f vs %.4f at init (>=), 200 epochs in "
                  "%.1f s (< 300 s)",
                  result.report.best_epoch, best.sparse.recall_1, best.dense.recall_1, init.dense.recall_1, secs)};
}

Outcome sparsity_monotonicity() {
  const Planted p;
  std::vector<double> flops;
  bool pec_ok = true;
  std::string pec_detail;
  for (double eta : {0.0, 0.01, 0.1}) {
    auto cfg = full_config();
    cfg.schedule.eta_text_max = cfg.schedule.eta_image_max = eta;
    const Model m = fit(cfg, p.train()).last.model;
    const double base = p.evaluate(m).flops.flops;
    flops.push_back(base);
    for (std::uint32_t thr : {2u, 5u, 20u}) {
      const auto mask = pec_mask_for(m, p.data.captions, p.pairs, thr);
      const double masked = p.evaluate(m, &mask).flops.flops;
      if (masked > base) pec_ok = false;
      if (thr == 5u) pec_detail += fmt(" %.3f->%.3f", base, masked);
    }
  }
  const bool mono = flops[1] <= flops[0] && flops[2] <= flops[1];
  return {mono && pec_ok, fmt("final FLOPs at eta_max 0/0.01/0.1: %.3f / %.3f / %.3f (non-increasing); PEC "
                              "(df>=2,5,20) never increases FLOPs:%s",
                              flops[0], flops[1], flops[2], pec_detail.c_str())};
}

Outcome ablation_directionality() {
  struct Variant {
    const char* name;
    bool final_layer;
    bool self_distillation;
  };
  const Variant variants[] = {{"full", true, true}, {"no_final_layer", false, true}, {"no_self_distillation", true, false}};
  std::vector<double> mean(3, 0.0);
  std::vector<std::vector<double>> rr(3);
  const std::uint64_t seeds[] = {1, 2, 3, 4, 5};
  for (std::uint64_t seed : seeds) {
    const Planted p(seed);
    for (std::size_t v = 0; v < 3; ++v) {
      auto cfg = full_config(seed);
      cfg.finetune_final_layer = variants[v].final_layer;
      cfg.self_distillation = variants[v].self_distillation;
      const auto ev = p.evaluate(fit(cfg, p.train()).best.model);
      mean[v] += ev.sparse.mrr_10 / 5.0;
      rr[v].insert(rr[v].end(), ev.sparse.reciprocal_ranks.begin(), ev.sparse.reciprocal_ranks.end());
    }
  }
  std::string table;
  bool ok = true;
  for (std::size_t v = 0; v < 3; ++v) {
    table += fmt("\n       %-22s sparse MRR@10 %.4f", variants[v].name, mean[v]);
    if (v > 0) {
      const auto t = paired_t_test(rr[0], rr[v]);
      table += fmt("  vs full: t %.3f p %.4f%s", t.t, t.p, t.p < 0.05 ? "" : " (not significant)");
      if (mean[0] < mean[v]) ok = false;
    }
  }
  return {ok, "full >= each ablation (5 seeds, per-query paired t-test):" + table};
}

Outcome sweep_artifact(const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  {
    std::ofstream cfg(work / "sweep.json");
    cfg << R"({"synthetic": {}, "sweep": {"w1": [0.1, 0.3, 0.5, 0.7, 0.9], "w2": [0.1, 0.3, 0.5, 0.7, 0.9]}})";
  }
  auto run = [&](const std::string& out) {
    const std::string cmd = std::string(JSD_CLI_PATH) + " sweep --config " + (work / "sweep.json").string() +
                            " --out " + (work / out).string() + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(work / out / "sweep.csv", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return std::pair{WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
  };
  const auto [code_a, csv_a] = run("a");
  const auto [code_b, csv_b] = run("b");
  std::istringstream lines(csv_a);
  std::string line, header;
  std::getline(lines, header);
  std::size_t rows = 0;
  std::string low_w1;
  while (std::getline(lines, line)) {
    ++rows;
    if ((line.rfind("0.100000,", 0) == 0 || line.rfind("0.300000,", 0) == 0) && line.find(",0.900000,") != std::string::npos)
      low_w1 += " " + line;
  }
  const bool ok = code_a == 0 && code_b == 0 && header == "w1,w2,r_at_1" && rows == 25 && csv_a == csv_b;
  return {ok, fmt("exit %d/%d, header '%s', %zu rows (25), reruns byte-identical: %s; low-w1/high-w2 cells:%s", code_a,
                  code_b, header.c_str(), rows, csv_a == csv_b ? "yes" : "no", low_w1.c_str())};
}

Outcome baseline_preservation() {
  const Planted p;
  const Model m = initial_model(full_config(), p.words);
  Matrix frozen_docs(p.pairs.size(), p.spec.dim), encoded_docs(p.pairs.size(), p.spec.dim);
  for (std::size_t i = 0; i < p.pairs.size(); ++i) {
    const auto raw = p.data.images.row_f64(p.pairs.image_rows[i]);
    const auto h = encode(raw, Side::image, m).dense;
    std::copy(raw.begin(), raw.end(), frozen_docs.row(i).begin());
    std::copy(h.begin(), h.end(), encoded_docs.row(i).begin());
  }
  std::size_t queries = 0, mismatched = 0;
  for (const auto& caps : p.pairs.caption_rows)
    for (std::size_t c : caps) {
      const auto raw = p.data.captions.row_f64(c);
      const auto frozen = dense_search(frozen_docs, raw, m.tau(), p.pairs.size());
      const auto ours = dense_search(encoded_docs, encode(raw, Side::text, m).dense, m.tau(), p.pairs.size());
      ++queries;
      bool same = frozen.size() == ours.size();
      for (std::size_t i = 0; same && i < frozen.size(); ++i) same = frozen[i].doc == ours[i].doc;
      mismatched += !same;
    }
  const auto ev = p.evaluate(m);
  const auto base = frozen_dense_report(p.data.images, p.data.captions, p.pairs);
  const bool ok = mismatched == 0 && ev.dense.reciprocal_ranks == base.reciprocal_ranks;
  return {ok, fmt("%zu/%zu full rankings identical id-for-id at step 0; dense R@1 %.4f = frozen %.4f", queries - mismatched,
                  queries, ev.dense.recall_1, base.recall_1)};
}

Outcome statistics() {
  const std::vector<double> a{0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0};
  const std::vector<double> b{1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4};
  const auto r = paired_t_test(a, b);
  const double textbook = 0.00283289019738427;  // Student's sleep data, paired, df 9
  const auto same = paired_t_test(a, a);
  const bool ok = std::abs(r.p - textbook) <= 1e-6 && r.dof == 9 && same.p == 1.0 && same.t == 0.0;
  return {ok, fmt("sleep data t %.6f p %.8f vs %.8f (tol 1e-6); A=B gives t %.1f p %.1f", r.t, r.p, textbook, same.t,
                  same.p)};
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "jsd_acceptance";
  criterion(1, "gradient correctness", gradient_check);
  criterion(2, "loss closed forms", loss_closed_forms);
  criterion(3, "index exactness", index_exactness);
  criterion(4, "synthetic convergence", synthetic_convergence);
  criterion(5, "sparsity/efficiency monotonicity", sparsity_monotonicity);
  criterion(6, "ablation directionality", ablation_directionality);
  criterion(7, "sweep artifact", [&] { return sweep_artifact(work); });
  criterion(8, "baseline preservation", baseline_preservation);
  criterion(9, "statistics", statistics);
  std::printf("%s: %d of 9 criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
