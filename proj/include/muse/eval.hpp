#pragma once

// Attribution quality measures: the linear datamodeling score (rank
// correlation between summed attributions over random training subsets and
// the outcomes of models retrained on those subsets) and prediction
// brittleness (how many query predictions change once the top-scored
// training samples are removed).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "muse/detail/bytes.hpp"
#include "muse/detail/csv.hpp"
#include "muse/error.hpp"
#include "muse/ltc.hpp"
#include "muse/parallel.hpp"
#include "muse/rng.hpp"
#include "muse/stats.hpp"
#include "muse/trainer.hpp"

namespace muse {

/// τ(query, train) for every pair; row q belongs to query q.
struct AttributionMatrix {
  std::size_t n_query = 0;
  std::size_t n_train = 0;
  std::vector<double> values;
  std::vector<std::uint64_t> query_ids;
  std::vector<std::uint64_t> train_ids;

  [[nodiscard]] std::span<const double> row(std::size_t q) const {
    return {values.data() + q * n_train, n_train};
  }
};

template <std::floating_point Real>
[[nodiscard]] AttributionMatrix to_attribution(const BasicLtcMatrix<Real>& m) {
  AttributionMatrix out;
  out.n_query = m.n_query;
  out.n_train = m.n_train;
  out.values.assign(m.values.begin(), m.values.end());
  out.query_ids = m.query_ids;
  out.train_ids = m.train_ids;
  return out;
}

inline void check_attribution(const AttributionMatrix& attr) {
  if (attr.values.size() != attr.n_query * attr.n_train ||
      attr.query_ids.size() != attr.n_query || attr.train_ids.size() != attr.n_train) {
    throw_data("attribution matrix dimensions are inconsistent");
  }
  for (double v : attr.values) {
    if (!std::isfinite(v)) throw_data("non-finite attribution value");
  }
}

/// Reads the wide CSV layout written by write_ltc_csv.
[[nodiscard]] inline AttributionMatrix read_attribution_csv(std::istream& in) {
  const auto lines = detail::read_lines(in);
  if (lines.empty()) throw_data("attribution CSV: empty file");
  const auto header = detail::split_csv_line(lines.front());
  if (header.empty() || header[0] != "query_id") throw_data("attribution CSV: bad header");
  AttributionMatrix out;
  for (std::size_t j = 1; j < header.size(); ++j) {
    out.train_ids.push_back(detail::parse_u64(header[j], "train id"));
  }
  out.n_train = out.train_ids.size();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto fields = detail::split_csv_line(lines[i]);
    if (fields.size() != header.size()) {
      throw_data("attribution CSV: wrong field count on line " + std::to_string(i + 1));
    }
    out.query_ids.push_back(detail::parse_u64(fields[0], "query id"));
    for (std::size_t j = 1; j < fields.size(); ++j) {
      out.values.push_back(detail::parse_double(fields[j], "attribution value"));
    }
  }
  out.n_query = out.query_ids.size();
  check_attribution(out);
  return out;
}

/// LTCM by magic, otherwise CSV.
[[nodiscard]] inline AttributionMatrix load_attribution_file(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && std::equal(kLtcmMagic.begin(), kLtcmMagic.end(), bytes.begin())) {
    return to_attribution(decode_ltc_matrix<double>(bytes));
  }
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  return read_attribution_csv(in);
}

// ---------------------------------------------------------------------------
// Group attribution
// ---------------------------------------------------------------------------

[[nodiscard]] inline double group_attribution(std::span<const double> row,
                                              std::span<const std::size_t> positions) {
  double sum = 0.0;
  for (std::size_t i : positions) {
    if (i >= row.size()) throw_usage("subset position out of range");
    sum += row[i];
  }
  return sum;
}

/// Sum of query q's attributions over the training samples with the given ids.
[[nodiscard]] inline double group_attribution(const AttributionMatrix& attr, std::size_t q,
                                              std::span<const std::uint64_t> subset_ids) {
  if (q >= attr.n_query) throw_usage("query index out of range");
  std::unordered_map<std::uint64_t, std::size_t> index;
  for (std::size_t m = 0; m < attr.n_train; ++m) index.emplace(attr.train_ids[m], m);
  std::vector<std::size_t> positions;
  positions.reserve(subset_ids.size());
  for (auto id : subset_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw_usage("unknown train id " + std::to_string(id));
    positions.push_back(it->second);
  }
  return group_attribution(attr.row(q), positions);
}

// ---------------------------------------------------------------------------
// Linear datamodeling score
// ---------------------------------------------------------------------------

enum class Measurable { query_correctness, negative_query_loss };

[[nodiscard]] inline std::string to_string(Measurable m) {
  return m == Measurable::query_correctness ? "query_correctness" : "negative_query_loss";
}

struct LdsConfig {
  std::size_t n_subsets = 100;
  double sampling_ratio = 0.5;
  std::size_t retrains_per_subset = 1;
  std::uint64_t seed = 0;
  Measurable measurable = Measurable::query_correctness;
  std::size_t workers = 1;
};

struct LdsReport {
  std::vector<std::uint64_t> query_ids;
  std::vector<double> per_query;         // Spearman per query; 0 when degenerate
  std::vector<std::uint8_t> degenerate;  // constant outcome or attribution series
  double mean_lds = 0.0;                 // over non-degenerate queries
  std::size_t n_excluded = 0;
  std::vector<std::vector<std::uint64_t>> subsets;  // train ids per subset, for audit
};

/// ⌈αN⌉, guarded against α·N landing a rounding step above an integer.
[[nodiscard]] inline std::size_t lds_subset_size(std::size_t n, double alpha) {
  const double raw = alpha * static_cast<double>(n);
  auto size = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(size, 1, n);
}

inline void check_lds_config(const LdsConfig& config, std::size_t n_train) {
  if (config.n_subsets < 2) throw_usage("LDS needs at least 2 subsets");
  if (config.retrains_per_subset < 1) throw_usage("LDS needs at least 1 retrain per subset");
  if (!(config.sampling_ratio > 0.0 && config.sampling_ratio <= 1.0)) {
    throw_usage("sampling ratio must lie in (0, 1]");
  }
  if (n_train == 0) throw_usage("LDS needs a non-empty training set");
}

/// C subsets of ⌈αN⌉ training positions each, drawn uniformly without
/// replacement; subset j depends only on (seed, j).
[[nodiscard]] inline std::vector<std::vector<std::size_t>> sample_subsets(std::size_t n_train,
                                                                          const LdsConfig& config) {
  check_lds_config(config, n_train);
  const std::size_t size = lds_subset_size(n_train, config.sampling_ratio);
  std::vector<std::vector<std::size_t>> out(config.n_subsets);
  for (std::size_t j = 0; j < config.n_subsets; ++j) {
    CounterRng rng(derive_seed(config.seed, {0x5b5e7, j}));
    out[j] = sample_without_replacement(n_train, size, rng);
  }
  return out;
}

/// outcomes[j][q] is the mean measured outcome for query q over the models
/// retrained on subset j.
[[nodiscard]] inline LdsReport score_lds(const AttributionMatrix& attr,
                                         const std::vector<std::vector<std::size_t>>& subsets,
                                         const std::vector<std::vector<double>>& outcomes) {
  check_attribution(attr);
  if (subsets.size() != outcomes.size() || subsets.size() < 2) {
    throw_usage("LDS needs matching subset and outcome lists of length >= 2");
  }
  LdsReport report;
  report.query_ids = attr.query_ids;
  report.per_query.assign(attr.n_query, 0.0);
  report.degenerate.assign(attr.n_query, 0);
  for (const auto& s : subsets) {
    std::vector<std::uint64_t> ids;
    ids.reserve(s.size());
    for (std::size_t i : s) {
      if (i >= attr.n_train) throw_usage("subset position out of range");
      ids.push_back(attr.train_ids[i]);
    }
    report.subsets.push_back(std::move(ids));
  }
  std::vector<double> measured(subsets.size());
  std::vector<double> predicted(subsets.size());
  double sum = 0.0;
  for (std::size_t q = 0; q < attr.n_query; ++q) {
    for (std::size_t j = 0; j < subsets.size(); ++j) {
      if (outcomes[j].size() != attr.n_query) throw_usage("outcome vector has wrong length");
      measured[j] = outcomes[j][q];
      predicted[j] = group_attribution(attr.row(q), subsets[j]);
    }
    const CorrelationResult r = spearman(std::span<const double>(measured),
                                         std::span<const double>(predicted));
    report.per_query[q] = r.value;
    report.degenerate[q] = r.degenerate ? 1 : 0;
    if (r.degenerate) {
      ++report.n_excluded;
    } else {
      sum += r.value;
    }
  }
  const std::size_t included = attr.n_query - report.n_excluded;
  report.mean_lds = included > 0 ? sum / static_cast<double>(included) : 0.0;
  return report;
}

/// Computes the per-query mean outcome for one subset (positions into the
/// training set). Injected so the scoring can run against a stub.
using OutcomeFn =
    std::function<std::vector<double>(std::size_t subset_index, std::span<const std::size_t> positions)>;

[[nodiscard]] inline LdsReport run_lds(const AttributionMatrix& attr, const LdsConfig& config,
                                       const OutcomeFn& outcome) {
  const auto subsets = sample_subsets(attr.n_train, config);
  std::vector<std::vector<double>> outcomes(subsets.size());
  parallel_for(subsets.size(), config.workers,
               [&](std::size_t j) { outcomes[j] = outcome(j, subsets[j]); });
  return score_lds(attr, subsets, outcomes);
}

namespace detail {

inline void check_alignment(const LabeledDataset& train, const LabeledDataset& query,
                            const AttributionMatrix& attr) {
  if (attr.n_train != train.size() || attr.n_query != query.size() ||
      attr.train_ids != train.sample_ids || attr.query_ids != query.sample_ids) {
    throw_data("attribution matrix ids do not match the train/query datasets");
  }
}

inline double measure(const ToyModel& model, const LabeledDataset& query, std::size_t q,
                      Measurable what) {
  if (what == Measurable::query_correctness) {
    return predict(model, query.row(q)) == query.labels[q] ? 1.0 : 0.0;
  }
  return -loss_of(model, query.row(q), query.labels[q]);
}

}  // namespace detail

/// Outcomes from retraining the toy model: outcomes[j][q] is the mean over R
/// retrains (seeds derived from (seed, j, r)) of the measurable on query q.
/// All C·R jobs are independent and run on `config.workers` threads.
[[nodiscard]] inline std::vector<std::vector<double>> measure_subset_outcomes(
    const LabeledDataset& train, const LabeledDataset& query,
    const std::vector<std::vector<std::size_t>>& subsets, const TrainConfig& tconfig,
    const LdsConfig& config) {
  const std::size_t c = subsets.size();
  const std::size_t r_count = config.retrains_per_subset;
  std::vector<std::vector<double>> per_job(c * r_count);
  parallel_for(c * r_count, config.workers, [&](std::size_t job) {
    const std::size_t j = job / r_count;
    const std::size_t r = job % r_count;
    TrainConfig cfg = tconfig;
    cfg.seed = derive_seed(config.seed, {j, r});
    const ToyModel model = train_model(train.subset(subsets[j]), cfg);
    std::vector<double> values(query.size());
    for (std::size_t q = 0; q < query.size(); ++q) {
      values[q] = detail::measure(model, query, q, config.measurable);
    }
    per_job[job] = std::move(values);
  });
  std::vector<std::vector<double>> out(c, std::vector<double>(query.size(), 0.0));
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t r = 0; r < r_count; ++r) {
      const auto& values = per_job[j * r_count + r];
      for (std::size_t q = 0; q < query.size(); ++q) out[j][q] += values[q];
    }
    for (double& v : out[j]) v /= static_cast<double>(r_count);
  }
  return out;
}

[[nodiscard]] inline LdsReport run_lds(const LabeledDataset& train, const LabeledDataset& query,
                                       const AttributionMatrix& attr, const TrainConfig& tconfig,
                                       const LdsConfig& config) {
  check_attribution(attr);
  detail::check_alignment(train, query, attr);
  check_config(tconfig);
  const auto subsets = sample_subsets(train.size(), config);
  const auto outcomes = measure_subset_outcomes(train, query, subsets, tconfig, config);
  return score_lds(attr, subsets, outcomes);
}

// ---------------------------------------------------------------------------
// Prediction brittleness
// ---------------------------------------------------------------------------

enum class FlipReference {
  reference_model,       // prediction differs from the full-data model's
  correct_to_incorrect,  // full-data model was right, retrained model is wrong
};

struct BrittlenessConfig {
  std::vector<std::size_t> k_values;
  std::size_t retrains = 5;
  std::uint64_t seed = 0;
  FlipReference reference = FlipReference::reference_model;
  std::size_t workers = 1;
};

struct BrittlenessReport {
  std::vector<std::size_t> k_values;
  std::vector<double> flip_fraction;  // mean over retrains, per k
  std::vector<double> flip_stddev;    // sample standard deviation over retrains, per k
  std::vector<std::vector<double>> per_retrain;  // [k index][retrain]
  std::size_t retrains = 0;
  std::string reference_digest;
};

/// Training positions sorted best-first: descending score, ascending id.
[[nodiscard]] inline std::vector<std::size_t> rank_by_score(std::span<const double> scores,
                                                            std::span<const std::uint64_t> ids) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  return order;
}

/// Retrain r (for every k, and for the full-data reference) uses seed
/// derive_seed(seed, {r}). Reference r and retrain r therefore differ only in
/// the removed samples, which makes k = 0 report exactly 0.
[[nodiscard]] inline BrittlenessReport run_brittleness(const LabeledDataset& train,
                                                       const LabeledDataset& query,
                                                       std::span<const double> scores,
                                                       const TrainConfig& tconfig,
                                                       const BrittlenessConfig& config) {
  check_config(tconfig);
  if (scores.size() != train.size()) throw_usage("one score per training sample required");
  if (config.retrains < 1) throw_usage("brittleness needs at least 1 retrain");
  for (std::size_t k : config.k_values) {
    if (k >= train.size()) {
      throw_usage("k=" + std::to_string(k) + " must be smaller than N=" + std::to_string(train.size()));
    }
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw_data("non-finite score");
  }
  const auto ranked = rank_by_score(scores, train.sample_ids);
  const std::size_t n_k = config.k_values.size();
  const std::size_t r_count = config.retrains;

  auto config_for = [&](std::size_t r) {
    TrainConfig cfg = tconfig;
    cfg.seed = derive_seed(config.seed, {r});
    return cfg;
  };

  std::vector<std::vector<std::uint32_t>> reference(r_count);
  parallel_for(r_count, config.workers, [&](std::size_t r) {
    reference[r] = predict_all(train_model(train, config_for(r)), query);
  });

  BrittlenessReport report;
  report.k_values = config.k_values;
  report.retrains = r_count;
  report.per_retrain.assign(n_k, std::vector<double>(r_count, 0.0));
  parallel_for(n_k * r_count, config.workers, [&](std::size_t job) {
    const std::size_t ki = job / r_count;
    const std::size_t r = job % r_count;
    const std::size_t k = config.k_values[ki];
    std::vector<std::size_t> keep(ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end());
    std::sort(keep.begin(), keep.end());
    const auto predicted = predict_all(train_model(train.subset(keep), config_for(r)), query);
    std::size_t flips = 0;
    for (std::size_t q = 0; q < query.size(); ++q) {
      if (config.reference == FlipReference::reference_model) {
        flips += predicted[q] != reference[r][q];
      } else {
        flips += reference[r][q] == query.labels[q] && predicted[q] != query.labels[q];
      }
    }
    report.per_retrain[ki][r] =
        query.size() ? static_cast<double>(flips) / static_cast<double>(query.size()) : 0.0;
  });

  for (const auto& values : report.per_retrain) {
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(r_count);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    report.flip_fraction.push_back(mean);
    report.flip_stddev.push_back(r_count > 1 ? std::sqrt(ss / static_cast<double>(r_count - 1)) : 0.0);
  }

  detail::ByteWriter w;
  for (const auto& preds : reference) {
    for (auto p : preds) w.put(p);
  }
  report.reference_digest = "crc32:" + detail::hex32(detail::crc32_of(w.bytes()));
  return report;
}

// ---------------------------------------------------------------------------
// Report JSON (sorted keys, like manifests)
// ---------------------------------------------------------------------------

[[nodiscard]] inline nlohmann::json to_json(const LdsReport& report, const LdsConfig& config) {
  nlohmann::json j;
  j["version"] = 1;
  j["n_subsets"] = config.n_subsets;
  j["sampling_ratio"] = config.sampling_ratio;
  j["retrains_per_subset"] = config.retrains_per_subset;
  j["seed"] = config.seed;
  j["measurable"] = to_string(config.measurable);
  j["mean_lds"] = report.mean_lds;
  j["n_excluded"] = report.n_excluded;
  j["per_query"] = nlohmann::json::array();
  for (std::size_t q = 0; q < report.per_query.size(); ++q) {
    j["per_query"].push_back({{"query_id", report.query_ids[q]},
                              {"lds", report.per_query[q]},
                              {"degenerate", report.degenerate[q] != 0}});
  }
  j["subsets"] = report.subsets;
  return j;
}

[[nodiscard]] inline nlohmann::json to_json(const BrittlenessReport& report,
                                            const BrittlenessConfig& config) {
  nlohmann::json j;
  j["version"] = 1;
  j["seed"] = config.seed;
  j["retrains"] = report.retrains;
  j["flip_reference"] = config.reference == FlipReference::reference_model
                            ? "reference_model"
                            : "correct_to_incorrect";
  j["reference_digest"] = report.reference_digest;
  j["points"] = nlohmann::json::array();
  for (std::size_t i = 0; i < report.k_values.size(); ++i) {
    j["points"].push_back({{"k", report.k_values[i]},
                           {"flip_fraction", report.flip_fraction[i]},
                           {"flip_stddev", report.flip_stddev[i]},
                           {"per_retrain", report.per_retrain[i]}});
  }
  return j;
}

}  // namespace muse
