#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "jsd/experiments.hpp"
#include "oracles.hpp"

using namespace jsd;

namespace {

QueryResult at_rank(std::size_t rank, std::uint32_t gold = 1000) {
  QueryResult r{"q", {}, gold};
  for (std::size_t i = 1; i <= std::max<std::size_t>(rank, 10); ++i)
    r.ranked.push_back(i == rank ? gold : static_cast<std::uint32_t>(i));
  return r;
}

struct Planted {
  SyntheticSpec spec;
  SyntheticData data;
  ResolvedPairs pairs;
  Matrix words;
  Planted() {
    spec.n_images = 20;
    spec.n_clusters = 20;
    data = generate_synthetic(spec);
    pairs = resolve(data.pairs, data.images, data.captions);
    words = synthetic_word_embeddings(spec);
  }
  TrainData train() const { return {data.images, data.captions, pairs, pairs, words}; }
  EvalData eval() const { return {data.images, data.captions, pairs}; }
};

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 5;
  cfg.learning_rate = 5e-3;
  cfg.schedule = {0.01, 0.01, 5};
  return cfg;
}

}  // namespace

TEST(Metrics, RankOneEverywhere) {
  const std::vector<QueryResult> rs{at_rank(1), at_rank(1)};
  EXPECT_EQ(recall_at_k(rs, 1), 1.0);
  EXPECT_EQ(mrr_at_10(rs), 1.0);
}

TEST(Metrics, RankThree) {
  const std::vector<QueryResult> rs{at_rank(3), at_rank(3), at_rank(3)};
  EXPECT_EQ(recall_at_k(rs, 1), 0.0);
  EXPECT_EQ(recall_at_k(rs, 5), 1.0);
  EXPECT_NEAR(mrr_at_10(rs), 1.0 / 3.0, 1e-15);
}

TEST(Metrics, RankElevenAndMissing) {
  const std::vector<QueryResult> rs{at_rank(11)};
  EXPECT_EQ(mrr_at_10(rs), 0.0);
  const std::vector<QueryResult> absent{QueryResult{"q", {1, 2, 3}, 9}};
  EXPECT_EQ(absent[0].gold_rank(), 0u);
  EXPECT_EQ(recall_at_k(absent, 5), 0.0);
}

TEST(Metrics, MixedRanks) {
  const std::vector<QueryResult> rs{at_rank(1), at_rank(2), at_rank(10), at_rank(12)};
  EXPECT_NEAR(mrr_at_10(rs), (1 + 0.5 + 0.1 + 0) / 4.0, 1e-15);
  EXPECT_NEAR(mrr_at_10(rs), 0.4, 1e-15);
  const auto m = metric_report(rs);
  EXPECT_EQ(m.reciprocal_ranks, (std::vector<double>{1.0, 0.5, 0.1, 0.0}));
  EXPECT_LE(m.recall_1, m.recall_5);
}

TEST(Metrics, RandomPermutationsGiveChanceRecall) {
  SplitMix64 rng(1);
  std::vector<QueryResult> rs;
  for (int q = 0; q < 1000; ++q) {
    std::vector<std::uint32_t> perm(100);
    for (std::uint32_t i = 0; i < 100; ++i) perm[i] = i;
    rng.shuffle(perm);
    rs.push_back({"q", perm, static_cast<std::uint32_t>(rng.below(100))});
  }
  EXPECT_NEAR(recall_at_k(rs, 1), 0.01, 0.01);
  const auto m = metric_report(rs);
  EXPECT_LE(m.recall_1, m.recall_5);
  for (double v : {m.recall_1, m.recall_5, m.mrr_10}) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(TTest, TextbookSleepData) {
  // Student's sleep data, drug 1 vs drug 2.
  const std::vector<double> a{0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0};
  const std::vector<double> b{1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4};
  const auto r = paired_t_test(a, b);
  EXPECT_EQ(r.dof, 9u);
  EXPECT_NEAR(r.t, -4.062127683382037, 1e-9);
  EXPECT_NEAR(r.p, 0.00283289019738427, 1e-9);
  EXPECT_NEAR(r.p, oracle::student_t_two_sided(r.t, 9), 1e-9);
}

TEST(TTest, TableCriticalValues) {
  EXPECT_NEAR(oracle::student_t_two_sided(2.2281388519649385, 10), 0.05, 1e-9);
  EXPECT_NEAR(oracle::student_t_two_sided(2.0, 10), 0.07338803477074039, 1e-9);
  const std::vector<double> d{1.0, 0.4, 0.9, -0.3, 1.2, 0.8, -0.6, 0.5, 0.1, 0.7, 1.1};
  const std::vector<double> zeros(11, 0.0);
  const auto r = paired_t_test(d, zeros);
  EXPECT_NEAR(r.p, oracle::student_t_two_sided(r.t, 10), 1e-9);
}

TEST(TTest, SeededGaussianAgainstQuadrature) {
  SplitMix64 rng(42);
  std::vector<double> a(100), b(100);
  for (std::size_t i = 0; i < 100; ++i) {
    b[i] = rng.normal();
    a[i] = rng.normal() + 0.5;
  }
  const auto r = paired_t_test(a, b);
  EXPECT_EQ(r.dof, 99u);
  EXPECT_NEAR(r.p, oracle::student_t_two_sided(r.t, 99), 1e-6);
  EXPECT_LT(r.p, 0.05);
}

TEST(TTest, SymmetryAndDegenerateCases) {
  SplitMix64 rng(3);
  std::vector<double> a(20), b(20);
  for (std::size_t i = 0; i < 20; ++i) a[i] = rng.normal(), b[i] = rng.normal();
  const auto ab = paired_t_test(a, b), ba = paired_t_test(b, a);
  EXPECT_NEAR(ab.t, -ba.t, 1e-12);
  EXPECT_NEAR(ab.p, ba.p, 1e-12);

  const auto same = paired_t_test(a, a);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 1.0);
  EXPECT_FALSE(same.constant_difference);

  std::vector<double> shifted(30), base(30);
  for (std::size_t i = 0; i < 30; ++i) base[i] = 0.25 * static_cast<double>(i % 4), shifted[i] = base[i] + 1.0;
  const auto c = paired_t_test(shifted, base);
  EXPECT_TRUE(c.constant_difference);
  EXPECT_EQ(c.p, 0.0);
  EXPECT_TRUE(std::isinf(c.t) && c.t > 0);

  EXPECT_THROW(paired_t_test(std::vector<double>{1.0}, std::vector<double>{1.0}), ConfigError);
  EXPECT_THROW(paired_t_test(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0}), ShapeError);
}

TEST(Retrieval, ThreadCountDoesNotChangeResults) {
  const Planted p;
  const Model m = initial_model(tiny_config(), p.words);
  EvalOptions one, four;
  four.threads = 4;
  const auto a = evaluate_retrieval(m, p.data.images, p.data.captions, p.pairs, one);
  const auto b = evaluate_retrieval(m, p.data.images, p.data.captions, p.pairs, four);
  EXPECT_EQ(a.sparse.reciprocal_ranks, b.sparse.reciprocal_ranks);
  EXPECT_EQ(a.dense.reciprocal_ranks, b.dense.reciprocal_ranks);
  EXPECT_EQ(a.flops.flops, b.flops.flops);
  EXPECT_EQ(a.sparse_results.size(), p.data.captions.count());
}

TEST(Retrieval, FreshModelDenseEqualsFrozenEmbeddings) {
  const Planted p;
  const auto ev = evaluate_retrieval(initial_model(tiny_config(), p.words), p.data.images, p.data.captions, p.pairs);
  const auto frozen = frozen_dense_report(p.data.images, p.data.captions, p.pairs);
  EXPECT_EQ(ev.dense.reciprocal_ranks, frozen.reciprocal_ranks);
}

TEST(Sweep, SingleCellEqualsDirectEvaluation) {
  const Planted p;
  const auto rows = weight_sweep(tiny_config(), p.train(), p.eval(), {0.3}, {0.7});
  ASSERT_EQ(rows.size(), 1u);
  auto cfg = tiny_config();
  cfg.weights = {0.3, 0.7};
  const auto direct = evaluate_retrieval(fit(cfg, p.train()).best.model, p.data.images, p.data.captions, p.pairs);
  EXPECT_EQ(rows[0].r_at_1, direct.sparse.recall_1);
}

TEST(Sweep, DeterministicCsv) {
  const Planted p;
  auto run = [&] {
    std::ostringstream os;
    write_sweep_csv(os, weight_sweep(tiny_config(), p.train(), p.eval(), {0.0, 0.5}, {0.5, 1.0}));
    return os.str();
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.substr(0, 13), "w1,w2,r_at_1\n");
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 5);
  EXPECT_THROW(weight_sweep(tiny_config(), p.train(), p.eval(), {}, {1.0}), ConfigError);
  EXPECT_THROW(weight_sweep(tiny_config(), p.train(), p.eval(), {0.0}, {0.0}), ConfigError);
}

TEST(Sweep, RescoreMixesAtInferenceOnly) {
  const Planted p;
  const Model m = fit(tiny_config(), p.train()).last.model;
  const auto rows =
      weight_sweep(tiny_config(), p.train(), p.eval(), {0.0, 1.0}, {1.0}, SweepPolicy::rescore, SweepMetric::inter, &m);
  ASSERT_EQ(rows.size(), 2u);
  const auto ev = evaluate_retrieval(m, p.data.images, p.data.captions, p.pairs);
  // w = (0, 1): integrated ranking is the sparse ranking.
  EXPECT_EQ(rows[0].r_at_1, ev.sparse.recall_1);
  EXPECT_THROW(weight_sweep(tiny_config(), p.train(), p.eval(), {0.0}, {1.0}, SweepPolicy::rescore), ConfigError);
}

TEST(Tradeoff, SingleVariantPlusBaselineAndPecMonotone) {
  const Planted p;
  const Model m = fit(tiny_config(), p.train()).last.model;
  const auto rows1 = tradeoff_report({{"late", m, std::nullopt, false}}, p.eval());
  ASSERT_EQ(rows1.size(), 2u);
  EXPECT_EQ(rows1[1].variant, "dense_baseline");
  EXPECT_EQ(rows1[1].flops, static_cast<double>(p.spec.dim));

  const auto mask = pec_mask_for(m, p.data.captions, p.pairs, 3);
  const auto rows = tradeoff_report({{"off", m, std::nullopt, false}, {"on", m, mask, true}}, p.eval());
  EXPECT_LE(rows[1].flops, rows[0].flops);
  std::ostringstream os;
  write_tradeoff_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, 21), "variant,flops,r_at_1\n");
}
