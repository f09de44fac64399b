#pragma once

// Loss-trajectory correlation: Pearson correlation between the loss-delta
// series of a training sample and a query sample, for all query × train
// pairs, plus the per-train-sample average used for coreset ranking.

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "muse/detail/bytes.hpp"
#include "muse/error.hpp"
#include "muse/parallel.hpp"
#include "muse/stats.hpp"
#include "muse/trajectory.hpp"

namespace muse {

/// Query-by-train correlation matrix. Row q holds the correlations of query q
/// against every training sample.
template <std::floating_point Real>
struct BasicLtcMatrix {
  std::size_t n_query = 0;
  std::size_t n_train = 0;
  std::vector<Real> values;              // n_query × n_train
  std::vector<std::uint8_t> degenerate;  // 1 where either trajectory is constant
  std::vector<std::uint64_t> query_ids;
  std::vector<std::uint64_t> train_ids;

  [[nodiscard]] Real at(std::size_t q, std::size_t m) const { return values[q * n_train + m]; }
  [[nodiscard]] bool is_degenerate(std::size_t q, std::size_t m) const {
    return degenerate[q * n_train + m] != 0;
  }
  [[nodiscard]] std::span<const Real> row(std::size_t q) const {
    return {values.data() + q * n_train, n_train};
  }

  bool operator==(const BasicLtcMatrix&) const = default;
};

using LtcMatrix = BasicLtcMatrix<float>;
using LtcMatrix64 = BasicLtcMatrix<double>;

struct LtcScores {
  std::vector<double> scores;
  std::vector<std::uint64_t> train_ids;
};

[[nodiscard]] inline CorrelationResult ltc_pair(std::span<const double> train_deltas,
                                                std::span<const double> query_deltas) {
  return pearson(train_deltas, query_deltas);
}

namespace detail {

inline std::vector<CenteredSeries> center_rows(const DeltaMatrix& deltas) {
  std::vector<CenteredSeries> rows;
  rows.reserve(deltas.n_samples);
  for (std::size_t m = 0; m < deltas.n_samples; ++m) rows.push_back(center(deltas.row(m)));
  return rows;
}

}  // namespace detail

/// Every train and query delta row is centered once; each entry is then a
/// dot product of centered rows divided by the product of their norms. Work
/// is split across query rows, and each entry is reduced sequentially over T,
/// so the result does not depend on `workers`.
template <std::floating_point Real = float>
[[nodiscard]] BasicLtcMatrix<Real> ltc_matrix(const DeltaMatrix& train, const DeltaMatrix& query,
                                              std::size_t workers = 1) {
  if (train.n_deltas != query.n_deltas) {
    throw_data("snapshot count mismatch: train has " + std::to_string(train.n_deltas + 1) +
               " snapshots, query has " + std::to_string(query.n_deltas + 1));
  }
  if (train.n_deltas < 2) throw_data("LTC needs at least 2 loss deltas (3 snapshots)");
  for (const DeltaMatrix* m : {&train, &query}) {
    for (double v : m->deltas) {
      if (!std::isfinite(v)) throw_data("non-finite loss delta");
    }
  }

  BasicLtcMatrix<Real> out;
  out.n_query = query.n_samples;
  out.n_train = train.n_samples;
  out.query_ids = query.sample_ids;
  out.train_ids = train.sample_ids;
  out.values.assign(out.n_query * out.n_train, Real{0});
  out.degenerate.assign(out.n_query * out.n_train, 0);

  const auto train_rows = detail::center_rows(train);
  const auto query_rows = detail::center_rows(query);

  parallel_for(out.n_query, workers, [&](std::size_t q) {
    const CenteredSeries& qs = query_rows[q];
    for (std::size_t m = 0; m < out.n_train; ++m) {
      const CenteredSeries& ts = train_rows[m];
      const CorrelationResult r =
          correlate_centered(ts.values, ts.sum_squares, qs.values, qs.sum_squares);
      out.values[q * out.n_train + m] = static_cast<Real>(r.value);
      out.degenerate[q * out.n_train + m] = r.degenerate ? 1 : 0;
    }
  });
  return out;
}

/// Column means of the matrix: the average LTC of each training sample over
/// all queries. Degenerate entries count as 0.
template <std::floating_point Real>
[[nodiscard]] LtcScores ltc_avg(const BasicLtcMatrix<Real>& matrix) {
  if (matrix.n_query == 0 || matrix.n_train == 0) throw_data("ltc_avg: empty matrix");
  std::vector<double> sums(matrix.n_train, 0.0);
  for (std::size_t q = 0; q < matrix.n_query; ++q) {
    const auto row = matrix.row(q);
    for (std::size_t m = 0; m < matrix.n_train; ++m) sums[m] += static_cast<double>(row[m]);
  }
  LtcScores out;
  out.train_ids = matrix.train_ids;
  out.scores.resize(matrix.n_train);
  const double n = static_cast<double>(matrix.n_query);
  for (std::size_t m = 0; m < matrix.n_train; ++m) out.scores[m] = sums[m] / n;
  return out;
}

enum class Direction { most_positive, most_negative };

struct Influencer {
  std::uint64_t train_id = 0;
  std::size_t train_index = 0;
  double value = 0.0;
};

/// Ranked training samples for one query. `train_labels` may be empty when no
/// class filter is given.
template <std::floating_point Real>
[[nodiscard]] std::vector<Influencer> top_influencers(const BasicLtcMatrix<Real>& matrix,
                                                      std::size_t query_index,
                                                      std::span<const std::uint32_t> train_labels,
                                                      std::optional<std::uint32_t> class_filter,
                                                      std::size_t count, Direction direction) {
  if (query_index >= matrix.n_query) {
    throw_usage("query index " + std::to_string(query_index) + " out of range");
  }
  if (count == 0) throw_usage("influencer count must be at least 1");
  if (class_filter && train_labels.size() != matrix.n_train) {
    throw_usage("class filter requires one label per training sample");
  }
  std::vector<Influencer> candidates;
  const auto row = matrix.row(query_index);
  for (std::size_t m = 0; m < matrix.n_train; ++m) {
    if (class_filter && train_labels[m] != *class_filter) continue;
    candidates.push_back({matrix.train_ids[m], m, static_cast<double>(row[m])});
  }
  if (candidates.empty()) {
    throw_usage("class " + std::to_string(*class_filter) + " has no training samples");
  }
  const bool descending = direction == Direction::most_positive;
  auto better = [descending](const Influencer& a, const Influencer& b) {
    if (a.value != b.value) return descending ? a.value > b.value : a.value < b.value;
    return a.train_id < b.train_id;
  };
  const std::size_t keep = std::min(count, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                    candidates.end(), better);
  candidates.resize(keep);
  return candidates;
}

// ---------------------------------------------------------------------------
// LTCM binary format
//
//   "LTCM" | u16 version=1 | u8 dtype (0 f32, 1 f64) | u8 reserved=0
//   | u64 n_query | u64 n_train | query ids (u64 × Q) | train ids (u64 × N)
//   | values, query-major (Q × N) | degenerate bitset, ⌈QN/8⌉ bytes, bit i of
//   the flattened index at byte i/8, position i%8 | u32 CRC32
// ---------------------------------------------------------------------------

inline constexpr std::array<std::uint8_t, 4> kLtcmMagic{'L', 'T', 'C', 'M'};
inline constexpr std::uint16_t kLtcmVersion = 1;

template <std::floating_point Real>
[[nodiscard]] std::vector<std::uint8_t> encode_ltc_matrix(const BasicLtcMatrix<Real>& m) {
  const std::size_t cells = m.n_query * m.n_train;
  if (m.values.size() != cells || m.degenerate.size() != cells ||
      m.query_ids.size() != m.n_query || m.train_ids.size() != m.n_train) {
    throw_internal("LTC matrix dimensions are inconsistent");
  }
  detail::ByteWriter w;
  for (std::uint8_t b : kLtcmMagic) w.put(b);
  w.put(kLtcmVersion);
  w.put(static_cast<std::uint8_t>(std::is_same_v<Real, double> ? 1 : 0));
  w.put(std::uint8_t{0});
  w.put(static_cast<std::uint64_t>(m.n_query));
  w.put(static_cast<std::uint64_t>(m.n_train));
  for (auto id : m.query_ids) w.put(id);
  for (auto id : m.train_ids) w.put(id);
  for (Real v : m.values) {
    if constexpr (std::is_same_v<Real, double>) {
      w.put_f64(v);
    } else {
      w.put_f32(v);
    }
  }
  std::vector<std::uint8_t> mask((cells + 7) / 8, 0);
  for (std::size_t i = 0; i < cells; ++i) {
    if (m.degenerate[i]) mask[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  for (auto b : mask) w.put(b);
  w.put_crc();
  return w.take();
}

template <std::floating_point Real>
[[nodiscard]] BasicLtcMatrix<Real> decode_ltc_matrix(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto fail_eof = [] { throw_data("LTCM: unexpected EOF"); };
  std::array<std::uint8_t, 4> magic{};
  for (auto& b : magic) {
    auto v = r.get<std::uint8_t>();
    if (!v) fail_eof();
    b = *v;
  }
  if (magic != kLtcmMagic) throw_data("LTCM: bad magic");
  const auto version = r.get<std::uint16_t>();
  const auto dtype = r.get<std::uint8_t>();
  const auto reserved = r.get<std::uint8_t>();
  const auto nq = r.get<std::uint64_t>();
  const auto nt = r.get<std::uint64_t>();
  if (!nt) fail_eof();
  if (*version != kLtcmVersion) throw_data("LTCM: unsupported version");
  if (*dtype > 1) throw_data("LTCM: unknown dtype");
  if (*reserved != 0) throw_data("LTCM: reserved byte is not zero");
  const std::size_t esize = *dtype == 1 ? 8 : 4;
  const std::uint64_t avail = r.remaining();
  if (*nq > avail / 8 || *nt > avail / 8 ||
      (*nt != 0 && *nq > avail / (*nt * esize + 1))) {
    fail_eof();
  }
  BasicLtcMatrix<Real> m;
  m.n_query = *nq;
  m.n_train = *nt;
  const std::size_t cells = m.n_query * m.n_train;
  if (r.remaining() < 8 * (m.n_query + m.n_train) + esize * cells + (cells + 7) / 8 + 4) {
    fail_eof();
  }
  m.query_ids.resize(m.n_query);
  for (auto& id : m.query_ids) id = *r.get<std::uint64_t>();
  m.train_ids.resize(m.n_train);
  for (auto& id : m.train_ids) id = *r.get<std::uint64_t>();
  m.values.resize(cells);
  for (auto& v : m.values) {
    const double x = esize == 8 ? std::bit_cast<double>(*r.get<std::uint64_t>())
                                : static_cast<double>(std::bit_cast<float>(*r.get<std::uint32_t>()));
    v = static_cast<Real>(x);
  }
  m.degenerate.resize(cells);
  std::vector<std::uint8_t> mask((cells + 7) / 8);
  for (auto& b : mask) b = *r.get<std::uint8_t>();
  for (std::size_t i = 0; i < cells; ++i) m.degenerate[i] = (mask[i / 8] >> (i % 8)) & 1u;
  const std::size_t crc_offset = r.position();
  const auto crc = r.get<std::uint32_t>();
  if (*crc != detail::crc32_of(bytes.first(crc_offset))) throw_data("LTCM: checksum mismatch");
  if (r.remaining() != 0) throw_data("LTCM: trailing bytes after checksum");
  return m;
}

template <std::floating_point Real>
std::size_t write_ltc_matrix_file(const BasicLtcMatrix<Real>& m, const std::string& path) {
  return detail::write_file(path, encode_ltc_matrix(m));
}

template <std::floating_point Real = float>
[[nodiscard]] BasicLtcMatrix<Real> read_ltc_matrix_file(const std::string& path) {
  return decode_ltc_matrix<Real>(detail::read_file(path));
}

/// Wide CSV: header "query_id,<train ids...>", then one row per query.
template <std::floating_point Real>
void write_ltc_csv(const BasicLtcMatrix<Real>& m, std::ostream& out) {
  out << "query_id";
  for (auto id : m.train_ids) out << ',' << id;
  out << '\n';
  char buf[32];
  for (std::size_t q = 0; q < m.n_query; ++q) {
    out << m.query_ids[q];
    for (Real v : m.row(q)) {
      std::snprintf(buf, sizeof(buf), "%.*g", std::is_same_v<Real, double> ? 17 : 9,
                    static_cast<double>(v));
      out << ',' << buf;
    }
    out << '\n';
  }
}

/// Two-column CSV "train_id,score".
inline void write_scores_csv(const LtcScores& scores, std::ostream& out) {
  out << "train_id,score\n";
  char buf[32];
  for (std::size_t m = 0; m < scores.scores.size(); ++m) {
    std::snprintf(buf, sizeof(buf), "%.17g", scores.scores[m]);
    out << scores.train_ids[m] << ',' << buf << '\n';
  }
}

}  // namespace muse
