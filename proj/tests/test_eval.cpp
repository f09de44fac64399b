#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "muse/eval.hpp"
#include "test_support.hpp"

namespace muse {
namespace {

AttributionMatrix single_row(std::vector<double> values) {
  AttributionMatrix a;
  a.n_query = 1;
  a.n_train = values.size();
  a.values = std::move(values);
  a.query_ids = {100};
  for (std::size_t m = 0; m < a.n_train; ++m) a.train_ids.push_back(m + 1);
  return a;
}

TEST(GroupAttribution, SumsSelectedEntries) {
  const auto a = single_row({0.1, 0.2, 0.3});
  const std::vector<std::uint64_t> ids{1, 3};
  EXPECT_NEAR(group_attribution(a, 0, ids), 0.4, 1e-15);
  EXPECT_EQ(group_attribution(a, 0, std::vector<std::uint64_t>{}), 0.0);
  const std::vector<std::uint64_t> all{1, 2, 3};
  EXPECT_NEAR(group_attribution(a, 0, all), 0.6, 1e-15);
  const std::vector<std::uint64_t> unknown{9};
  EXPECT_THROW((void)group_attribution(a, 0, unknown), Error);
  EXPECT_THROW((void)group_attribution(a, 1, ids), Error);
}

TEST(GroupAttribution, HandExample) {
  const std::vector<double> row{0.2, -0.1, 0.4};
  const std::vector<std::size_t> positions{0, 2};
  EXPECT_NEAR(group_attribution(row, positions), 0.6, 1e-15);
}

TEST(GroupAttribution, AdditiveOverDisjointSubsets) {
  CounterRng rng(6);
  std::vector<double> row(30);
  for (auto& v : row) v = rng.uniform(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> left, right, both;
    for (std::size_t i = 0; i < row.size(); ++i) {
      const auto pick = rng.below(3);
      if (pick == 0) left.push_back(i);
      if (pick == 1) right.push_back(i);
      if (pick != 2) both.push_back(i);
    }
    ASSERT_NEAR(group_attribution(row, both), group_attribution(row, left) + group_attribution(row, right),
                1e-12);
  }
}

TEST(Lds, SubsetSize) {
  EXPECT_EQ(lds_subset_size(10, 0.5), 5u);
  EXPECT_EQ(lds_subset_size(11, 0.5), 6u);
  EXPECT_EQ(lds_subset_size(3, 0.1), 1u);
  EXPECT_EQ(lds_subset_size(100, 0.07), 7u);
  EXPECT_EQ(lds_subset_size(10, 0.3), 3u);
  EXPECT_EQ(lds_subset_size(4, 1.0), 4u);
}

TEST(Lds, SubsetsAreDistinctPositionsOfTheRightSize) {
  LdsConfig cfg;
  cfg.n_subsets = 20;
  cfg.sampling_ratio = 0.3;
  const auto subsets = sample_subsets(17, cfg);
  ASSERT_EQ(subsets.size(), 20u);
  for (const auto& s : subsets) {
    ASSERT_EQ(s.size(), 6u);
    std::vector<std::size_t> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    ASSERT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
    ASSERT_LT(sorted.back(), 17u);
  }
  EXPECT_EQ(sample_subsets(17, cfg), subsets);
}

TEST(Lds, InclusionFrequencyIsAlpha) {
  LdsConfig cfg;
  cfg.n_subsets = 10000;
  cfg.sampling_ratio = 0.5;
  cfg.seed = 77;
  const std::size_t n = 10;
  const auto subsets = sample_subsets(n, cfg);
  std::vector<double> counts(n, 0.0);
  for (const auto& s : subsets) {
    for (std::size_t i : s) counts[i] += 1;
  }
  const double se = std::sqrt(0.5 * 0.5 / 10000.0);
  for (double c : counts) EXPECT_NEAR(c / 10000.0, 0.5, 3 * se);
}

TEST(Lds, StubOutcomesGivePlusMinusOne) {
  CounterRng rng(8);
  AttributionMatrix a;
  a.n_query = 3;
  a.n_train = 12;
  for (std::size_t i = 0; i < a.n_query * a.n_train; ++i) a.values.push_back(rng.uniform(-1, 1));
  a.query_ids = {0, 1, 2};
  for (std::size_t m = 0; m < a.n_train; ++m) a.train_ids.push_back(50 + m);
  LdsConfig cfg;
  cfg.n_subsets = 25;
  for (double sign : {1.0, -1.0}) {
    const auto report = run_lds(a, cfg, [&](std::size_t, std::span<const std::size_t> positions) {
      std::vector<double> out;
      for (std::size_t q = 0; q < a.n_query; ++q) {
        out.push_back(sign * std::exp(group_attribution(a.row(q), positions)));
      }
      return out;
    });
    EXPECT_DOUBLE_EQ(report.mean_lds, sign);
    EXPECT_EQ(report.n_excluded, 0u);
    EXPECT_EQ(report.subsets.size(), 25u);
  }
}

TEST(Lds, ThreeSubsetHandExample) {
  // g values (0.9, 0.1, 0.5) against outcomes (3, 1, 2)
  const auto a = single_row({0.9, 0.1, 0.5});
  const std::vector<std::vector<std::size_t>> subsets{{0}, {1}, {2}};
  const std::vector<std::vector<double>> outcomes{{3}, {1}, {2}};
  EXPECT_DOUBLE_EQ(score_lds(a, subsets, outcomes).mean_lds, 1.0);
  const std::vector<std::vector<double>> mixed{{1}, {3}, {2}};
  EXPECT_NEAR(score_lds(a, subsets, mixed).mean_lds, -1.0, 1e-15);
}

TEST(Lds, ConstantOutcomeIsExcluded) {
  AttributionMatrix a;
  a.n_query = 2;
  a.n_train = 3;
  a.values = {1, 2, 3, 1, 2, 3};
  a.query_ids = {0, 1};
  a.train_ids = {0, 1, 2};
  const std::vector<std::vector<std::size_t>> subsets{{0}, {1}, {2}};
  const std::vector<std::vector<double>> outcomes{{1, 0.2}, {1, 0.4}, {1, 0.3}};
  const auto r = score_lds(a, subsets, outcomes);
  EXPECT_EQ(r.n_excluded, 1u);
  EXPECT_TRUE(r.degenerate[0]);
  EXPECT_NEAR(r.mean_lds, 0.5, 1e-15);
}

TEST(Lds, ConfigErrors) {
  const auto a = single_row({1.0, 2.0});
  LdsConfig cfg;
  cfg.n_subsets = 1;
  auto stub = [](std::size_t, std::span<const std::size_t>) { return std::vector<double>{0.0}; };
  EXPECT_THROW((void)run_lds(a, cfg, stub), Error);
  cfg = {};
  cfg.sampling_ratio = 0.0;
  EXPECT_THROW((void)run_lds(a, cfg, stub), Error);
  cfg.sampling_ratio = 1.5;
  EXPECT_THROW((void)run_lds(a, cfg, stub), Error);
}

TEST(Lds, ToyRetrainingIsDeterministicAcrossWorkers) {
  SyntheticSpec spec;
  spec.per_class = 10;
  spec.dims = 4;
  const auto train = make_synthetic(spec);
  spec.seed = 1;
  spec.per_class = 3;
  spec.id_offset = 1000;
  const auto query = make_synthetic(spec);
  AttributionMatrix a;
  a.n_query = query.size();
  a.n_train = train.size();
  a.query_ids = query.sample_ids;
  a.train_ids = train.sample_ids;
  CounterRng rng(3);
  for (std::size_t i = 0; i < a.n_query * a.n_train; ++i) a.values.push_back(rng.uniform(-1, 1));
  TrainConfig tcfg;
  tcfg.epochs = 3;
  LdsConfig cfg;
  cfg.n_subsets = 6;
  cfg.retrains_per_subset = 2;
  cfg.measurable = Measurable::negative_query_loss;
  const auto one = run_lds(train, query, a, tcfg, cfg);
  cfg.workers = 4;
  const auto four = run_lds(train, query, a, tcfg, cfg);
  EXPECT_EQ(one.per_query, four.per_query);
  EXPECT_EQ(one.mean_lds, four.mean_lds);

  AttributionMatrix wrong = a;
  wrong.train_ids[0] = 999999;
  EXPECT_THROW((void)run_lds(train, query, wrong, tcfg, cfg), Error);
}

class BrittlenessTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticSpec spec;
    spec.per_class = 40;
    spec.dims = 5;
    spec.cluster_spread = 0.3;
    train = make_synthetic(spec);
    spec.seed = 9;
    spec.per_class = 20;
    spec.id_offset = 10000;
    query = make_synthetic(spec);
    tcfg.epochs = 10;
  }
  LabeledDataset train, query;
  TrainConfig tcfg;
};

TEST_F(BrittlenessTest, ZeroRemovalFlipsNothing) {
  std::vector<double> scores(train.size());
  CounterRng rng(2);
  for (auto& s : scores) s = rng.uniform(-1, 1);
  BrittlenessConfig cfg;
  cfg.k_values = {0};
  cfg.retrains = 3;
  const auto r = run_brittleness(train, query, scores, tcfg, cfg);
  EXPECT_EQ(r.flip_fraction[0], 0.0);
  EXPECT_EQ(r.flip_stddev[0], 0.0);
}

TEST_F(BrittlenessTest, RemovingAClassFlipsItsQueries) {
  // class 0 scores highest, so removing k = |class 0| removes exactly that class
  std::vector<double> scores(train.size());
  std::size_t class0 = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    scores[i] = train.labels[i] == 0 ? 1.0 : 0.0;
    class0 += train.labels[i] == 0;
  }
  BrittlenessConfig cfg;
  cfg.k_values = {class0};
  cfg.retrains = 2;
  cfg.seed = 5;
  const auto r = run_brittleness(train, query, scores, tcfg, cfg);
  for (std::size_t rep = 0; rep < cfg.retrains; ++rep) {
    TrainConfig ref_cfg = tcfg;
    ref_cfg.seed = derive_seed(cfg.seed, {rep});
    const auto ref = predict_all(train_model(train, ref_cfg), query);
    const double predicted_zero =
        static_cast<double>(std::count(ref.begin(), ref.end(), 0u)) / static_cast<double>(query.size());
    EXPECT_GE(r.per_retrain[0][rep], predicted_zero);
    EXPECT_GT(predicted_zero, 0.25);
  }
}

TEST_F(BrittlenessTest, FractionsAreBoundedAndReportIsStable) {
  std::vector<double> scores(train.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = static_cast<double>(i % 7);
  BrittlenessConfig cfg;
  cfg.k_values = {0, 5, 30};
  cfg.retrains = 3;
  cfg.reference = FlipReference::correct_to_incorrect;
  const auto r = run_brittleness(train, query, scores, tcfg, cfg);
  for (double f : r.flip_fraction) {
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
  cfg.workers = 3;
  const auto again = run_brittleness(train, query, scores, tcfg, cfg);
  EXPECT_EQ(r.per_retrain, again.per_retrain);
  EXPECT_EQ(r.reference_digest, again.reference_digest);
  const auto j = to_json(r, cfg);
  EXPECT_EQ(j["points"].size(), 3u);
  EXPECT_EQ(j["flip_reference"], "correct_to_incorrect");
}

TEST_F(BrittlenessTest, Errors) {
  std::vector<double> scores(train.size(), 0.0);
  BrittlenessConfig cfg;
  cfg.k_values = {train.size()};
  EXPECT_THROW((void)run_brittleness(train, query, scores, tcfg, cfg), Error);
  cfg.k_values = {1};
  scores.pop_back();
  EXPECT_THROW((void)run_brittleness(train, query, scores, tcfg, cfg), Error);
}

TEST(RankByScore, DescendingThenId) {
  const std::vector<double> scores{0.5, 0.9, 0.5, 0.1};
  const std::vector<std::uint64_t> ids{7, 3, 2, 1};
  EXPECT_EQ(rank_by_score(scores, ids), (std::vector<std::size_t>{1, 2, 0, 3}));
}

TEST(AttributionFiles, CsvAndLtcm) {
  LtcMatrix64 m;
  m.n_query = 2;
  m.n_train = 3;
  m.values = {0.1, -0.2, 0.3, 0.25, 0.5, -1.0};
  m.degenerate.assign(6, 0);
  m.query_ids = {40, 41};
  m.train_ids = {1, 2, 3};
  std::stringstream csv;
  write_ltc_csv(m, csv);
  const auto from_csv = read_attribution_csv(csv);
  EXPECT_EQ(from_csv.values, m.values);
  EXPECT_EQ(from_csv.query_ids, m.query_ids);

  testing::TempDir dir;
  write_ltc_matrix_file(m, dir.file("a.ltcm"));
  const auto from_bin = load_attribution_file(dir.file("a.ltcm"));
  EXPECT_EQ(from_bin.values, m.values);
  EXPECT_EQ(from_bin.train_ids, m.train_ids);

  std::stringstream bad("query_id,1,2\n40,0.1\n");
  EXPECT_THROW((void)read_attribution_csv(bad), Error);
}

TEST(ReportJson, LdsFields) {
  const auto a = single_row({1.0, 2.0, 4.0});
  const auto r = score_lds(a, {{0}, {1}, {2}}, {{0.1}, {0.5}, {0.9}});
  LdsConfig cfg;
  const auto j = to_json(r, cfg);
  EXPECT_EQ(j["mean_lds"], 1.0);
  EXPECT_EQ(j["per_query"][0]["query_id"], 100);
  EXPECT_EQ(j["measurable"], "query_correctness");
}

}  // namespace
}  // namespace muse
