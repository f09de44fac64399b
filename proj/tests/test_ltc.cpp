#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <sstream>

#include "muse/ltc.hpp"
#include "test_support.hpp"

namespace muse {
namespace {

using V = std::vector<double>;

DeltaMatrix random_deltas(CounterRng& rng, std::size_t n, std::size_t t, std::uint64_t id_base) {
  DeltaMatrix d;
  d.n_samples = n;
  d.n_deltas = t;
  for (std::size_t i = 0; i < n; ++i) d.sample_ids.push_back(id_base + i);
  for (std::size_t i = 0; i < n * t; ++i) d.deltas.push_back(rng.normal());
  return d;
}

DeltaMatrix from_rows(const std::vector<V>& rows, std::uint64_t id_base = 0) {
  DeltaMatrix d;
  d.n_samples = rows.size();
  d.n_deltas = rows.front().size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.sample_ids.push_back(id_base + i);
    d.deltas.insert(d.deltas.end(), rows[i].begin(), rows[i].end());
  }
  return d;
}

V row_vec(const DeltaMatrix& d, std::size_t i) {
  const auto r = d.row(i);
  return V(r.begin(), r.end());
}

LtcMatrix64 literal_matrix(std::size_t q, std::size_t n, V values) {
  LtcMatrix64 m;
  m.n_query = q;
  m.n_train = n;
  m.values = std::move(values);
  m.degenerate.assign(q * n, 0);
  for (std::size_t i = 0; i < q; ++i) m.query_ids.push_back(100 + i);
  for (std::size_t i = 0; i < n; ++i) m.train_ids.push_back(i);
  return m;
}

TEST(LtcPair, AlignedAndConflicting) {
  const V a{-1.5, -0.5, 0.25};
  const V neg{1.5, 0.5, -0.25};
  EXPECT_DOUBLE_EQ(ltc_pair(a, a).value, 1.0);
  EXPECT_DOUBLE_EQ(ltc_pair(a, neg).value, -1.0);
}

TEST(LtcPair, EqualsPearson) {
  const V a{-1.5, -0.5, 0.25};
  const V b{-1.0, -1.0, 0.5};
  EXPECT_EQ(ltc_pair(a, b).value, pearson(a, b).value);
  EXPECT_NEAR(ltc_pair(a, b).value, testing::naive_pearson(a, b), 1e-15);
}

TEST(LtcMatrix, DuplicatedRowGivesOne) {
  CounterRng rng(1);
  const auto train = random_deltas(rng, 6, 5, 0);
  const auto query = from_rows({row_vec(train, 3)}, 1000);
  const auto m = ltc_matrix<double>(train, query);
  EXPECT_DOUBLE_EQ(m.at(0, 3), 1.0);
}

TEST(LtcMatrix, MatchesNaiveOracle) {
  CounterRng rng(2);
  const auto train = random_deltas(rng, 5, 4, 0);
  const auto query = random_deltas(rng, 3, 4, 100);
  const auto m = ltc_matrix<double>(train, query, 2);
  ASSERT_EQ(m.n_query, 3u);
  ASSERT_EQ(m.n_train, 5u);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t n = 0; n < 5; ++n) {
      EXPECT_NEAR(m.at(q, n), testing::naive_pearson(row_vec(train, n), row_vec(query, q)), 1e-10);
    }
  }
  EXPECT_EQ(m.train_ids, train.sample_ids);
  EXPECT_EQ(m.query_ids, query.sample_ids);
}

TEST(LtcMatrix, AgreesBitForBitWithPearson) {
  CounterRng rng(3);
  const auto train = random_deltas(rng, 8, 7, 0);
  const auto query = random_deltas(rng, 4, 7, 100);
  const auto m = ltc_matrix<double>(train, query);
  for (std::size_t q = 0; q < 4; ++q) {
    for (std::size_t n = 0; n < 8; ++n) {
      ASSERT_EQ(m.at(q, n), pearson(row_vec(train, n), row_vec(query, q)).value);
    }
  }
}

TEST(LtcMatrix, FloatStorageRoundsDoubleResult) {
  CounterRng rng(4);
  const auto train = random_deltas(rng, 8, 7, 0);
  const auto query = random_deltas(rng, 4, 7, 100);
  const auto m32 = ltc_matrix(train, query);
  const auto m64 = ltc_matrix<double>(train, query);
  for (std::size_t i = 0; i < m32.values.size(); ++i) {
    ASSERT_EQ(m32.values[i], static_cast<float>(m64.values[i]));
  }
}

TEST(LtcMatrix, DegenerateRowsFlaggedAndZero) {
  const auto train = from_rows({{0, 0, 0}, {1, 2, 3}});
  const auto query = from_rows({{1, 2, 4}, {5, 5, 5}}, 10);
  const auto m = ltc_matrix<double>(train, query);
  EXPECT_TRUE(m.is_degenerate(0, 0));
  EXPECT_EQ(m.at(0, 0), 0.0);
  EXPECT_FALSE(m.is_degenerate(0, 1));
  EXPECT_TRUE(m.is_degenerate(1, 0));
  EXPECT_TRUE(m.is_degenerate(1, 1));
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (m.degenerate[i]) {
      EXPECT_EQ(m.values[i], 0.0);
    }
    EXPECT_LE(std::abs(m.values[i]), 1.0);
  }
}

TEST(LtcMatrix, WorkerCountDoesNotChangeBits) {
  CounterRng rng(5);
  const auto train = random_deltas(rng, 40, 9, 0);
  const auto query = random_deltas(rng, 17, 9, 100);
  const auto ref = ltc_matrix(train, query, 1);
  for (std::size_t w : {2u, 3u, 8u, 32u}) {
    const auto m = ltc_matrix(train, query, w);
    ASSERT_EQ(std::memcmp(ref.values.data(), m.values.data(), ref.values.size() * sizeof(float)), 0);
    ASSERT_EQ(ref.degenerate, m.degenerate);
  }
}

TEST(LtcMatrix, Errors) {
  CounterRng rng(6);
  try {
    (void)ltc_matrix(random_deltas(rng, 2, 4, 0), random_deltas(rng, 2, 5, 10));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("snapshot count mismatch"), std::string::npos);
  }
  EXPECT_THROW((void)ltc_matrix(random_deltas(rng, 2, 1, 0), random_deltas(rng, 2, 1, 10)), Error);
}

TEST(LtcMatrix, AffineTransformOfOneTrajectory) {
  CounterRng rng(7);
  auto train = testing::random_dataset(rng, 6, 8, 2, Dtype::f64);
  const auto query = testing::random_dataset(rng, 3, 8, 2, Dtype::f64, "query");
  const auto before = ltc_matrix<double>(compute_deltas(train), compute_deltas(query));
  for (std::size_t t = 0; t < train.n_snapshots; ++t) {
    double& v = train.losses[2 * train.n_snapshots + t];
    v = 3.5 * v + 0.75;
  }
  const auto after = ltc_matrix<double>(compute_deltas(train), compute_deltas(query));
  for (std::size_t q = 0; q < 3; ++q) EXPECT_NEAR(after.at(q, 2), before.at(q, 2), 1e-9);
}

TEST(LtcMatrix, PermutingTrainPermutesColumns) {
  CounterRng rng(8);
  const auto train = random_deltas(rng, 7, 6, 0);
  const auto query = random_deltas(rng, 3, 6, 100);
  std::vector<std::size_t> perm{4, 2, 6, 0, 1, 5, 3};
  DeltaMatrix shuffled;
  shuffled.n_samples = 7;
  shuffled.n_deltas = 6;
  for (std::size_t i : perm) {
    shuffled.sample_ids.push_back(train.sample_ids[i]);
    const auto r = train.row(i);
    shuffled.deltas.insert(shuffled.deltas.end(), r.begin(), r.end());
  }
  const auto a = ltc_matrix<double>(train, query);
  const auto b = ltc_matrix<double>(shuffled, query);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t j = 0; j < perm.size(); ++j) {
      ASSERT_EQ(b.at(q, j), a.at(q, perm[j]));
      ASSERT_EQ(b.train_ids[j], a.train_ids[perm[j]]);
    }
  }
}

TEST(LtcAvg, ColumnMeans) {
  const auto m = literal_matrix(2, 3, {1, 0, -1, 0, 0.5, -0.5});
  const auto s = ltc_avg(m);
  EXPECT_EQ(s.scores, (V{0.5, 0.25, -0.75}));
  EXPECT_EQ(s.train_ids, m.train_ids);
}

TEST(LtcAvg, SingleRowAndConstant) {
  const auto one = literal_matrix(1, 3, {0.3, -0.2, 0.9});
  EXPECT_EQ(ltc_avg(one).scores, (V{0.3, -0.2, 0.9}));
  const auto half = literal_matrix(4, 2, V(8, 0.5));
  EXPECT_EQ(ltc_avg(half).scores, (V{0.5, 0.5}));
  EXPECT_THROW((void)ltc_avg(literal_matrix(0, 0, {})), Error);
}

TEST(Influencers, Directions) {
  const auto m = literal_matrix(1, 3, {0.9, -0.8, 0.1});
  const auto pos = top_influencers(m, 0, {}, std::nullopt, 1, Direction::most_positive);
  ASSERT_EQ(pos.size(), 1u);
  EXPECT_EQ(pos[0].train_index, 0u);
  const auto neg = top_influencers(m, 0, {}, std::nullopt, 1, Direction::most_negative);
  EXPECT_EQ(neg[0].train_index, 1u);
}

TEST(Influencers, FullCountIsPermutationAndTiesByAscendingId) {
  auto m = literal_matrix(1, 4, {0.5, 0.5, 0.7, 0.5});
  m.train_ids = {40, 10, 30, 20};
  const auto all = top_influencers(m, 0, {}, std::nullopt, 10, Direction::most_positive);
  ASSERT_EQ(all.size(), 4u);
  EXPECT_EQ(all[0].train_id, 30u);
  EXPECT_EQ(all[1].train_id, 10u);
  EXPECT_EQ(all[2].train_id, 20u);
  EXPECT_EQ(all[3].train_id, 40u);
}

TEST(Influencers, ClassFilterAndErrors) {
  const auto m = literal_matrix(2, 4, {0.1, 0.9, 0.4, 0.8, 0, 0, 0, 0});
  const std::vector<std::uint32_t> labels{0, 1, 0, 1};
  const auto only0 = top_influencers(m, 0, labels, 0u, 5, Direction::most_positive);
  ASSERT_EQ(only0.size(), 2u);
  EXPECT_EQ(only0[0].train_index, 2u);
  EXPECT_THROW((void)top_influencers(m, 2, labels, std::nullopt, 1, Direction::most_positive), Error);
  EXPECT_THROW((void)top_influencers(m, 0, labels, 7u, 1, Direction::most_positive), Error);
  EXPECT_THROW((void)top_influencers(m, 0, labels, std::nullopt, 0, Direction::most_positive), Error);
}

TEST(LtcmFormat, RoundTripBothPrecisions) {
  CounterRng rng(9);
  const auto train = from_rows({{0, 0, 0}, {1, 2, 3}, {3, 1, 2}});
  const auto query = random_deltas(rng, 5, 3, 100);
  const auto m32 = ltc_matrix(train, query);
  const auto back32 = decode_ltc_matrix<float>(encode_ltc_matrix(m32));
  EXPECT_EQ(back32.values, m32.values);
  EXPECT_EQ(back32.degenerate, m32.degenerate);
  EXPECT_EQ(back32.query_ids, m32.query_ids);
  EXPECT_EQ(back32.train_ids, m32.train_ids);
  const auto m64 = ltc_matrix<double>(train, query);
  const auto back64 = decode_ltc_matrix<double>(encode_ltc_matrix(m64));
  EXPECT_EQ(back64.values, m64.values);
  const auto widened = decode_ltc_matrix<double>(encode_ltc_matrix(m32));
  for (std::size_t i = 0; i < m32.values.size(); ++i) EXPECT_EQ(widened.values[i], m32.values[i]);
}

TEST(LtcmFormat, CorruptionDetected) {
  CounterRng rng(10);
  const auto m = ltc_matrix(random_deltas(rng, 3, 4, 0), random_deltas(rng, 2, 4, 50));
  const auto good = encode_ltc_matrix(m);
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW((void)decode_ltc_matrix<float>(bad), Error);
  bad = good;
  bad[bad.size() - 6] ^= 1;
  EXPECT_THROW((void)decode_ltc_matrix<float>(bad), Error);
  for (std::size_t len = 0; len < good.size(); len += 7) {
    EXPECT_THROW((void)decode_ltc_matrix<float>(std::span(good).first(len)), Error);
  }
}

TEST(LtcmFormat, FileRoundTrip) {
  testing::TempDir dir;
  CounterRng rng(11);
  const auto m = ltc_matrix(random_deltas(rng, 3, 4, 0), random_deltas(rng, 2, 4, 50));
  write_ltc_matrix_file(m, dir.file("m.ltcm"));
  EXPECT_EQ(read_ltc_matrix_file(dir.file("m.ltcm")).values, m.values);
}

TEST(LtcCsv, WideLayout) {
  const auto m = literal_matrix(2, 2, {0.5, -0.25, 1, 0});
  std::ostringstream out;
  write_ltc_csv(m, out);
  EXPECT_EQ(out.str(), "query_id,0,1\n100,0.5,-0.25\n101,1,0\n");
  std::ostringstream scores;
  write_scores_csv(ltc_avg(m), scores);
  EXPECT_EQ(scores.str(), "train_id,score\n0,0.75\n1,-0.125\n");
}

}  // namespace
}  // namespace muse
