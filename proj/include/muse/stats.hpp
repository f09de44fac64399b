#pragma once

// Correlation primitives. All accumulation is in double regardless of the
// input element type.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "muse/error.hpp"

namespace muse {

struct CorrelationResult {
  double value = 0.0;
  bool degenerate = false;

  bool operator==(const CorrelationResult&) const = default;
};

/// A series after subtracting its mean, with the squared norm of the result.
/// `constant` is set when every input element is identical, which is checked
/// directly because the computed mean of a constant series need not equal the
/// element exactly.
struct CenteredSeries {
  std::vector<double> values;
  double sum_squares = 0.0;
  bool constant = false;
};

namespace detail {

template <std::floating_point T>
void check_series(std::span<const T> x, const char* what) {
  for (T v : x) {
    if (!std::isfinite(v)) throw_usage(std::string(what) + ": non-finite input");
  }
}

template <std::floating_point T, std::floating_point U>
void check_pair(std::span<const T> x, std::span<const U> y, const char* what) {
  if (x.size() != y.size()) throw_usage(std::string(what) + ": length mismatch");
  if (x.size() < 2) throw_usage(std::string(what) + ": series length must be at least 2");
  check_series(x, what);
  check_series(y, what);
}

}  // namespace detail

template <std::floating_point T>
[[nodiscard]] CenteredSeries center(std::span<const T> x) {
  CenteredSeries out;
  out.values.resize(x.size());
  double sum = 0.0;
  for (T v : x) sum += static_cast<double>(v);
  const double mean = sum / static_cast<double>(x.size());
  out.constant = std::all_of(x.begin(), x.end(), [&](T v) { return v == x.front(); });
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    out.values[i] = d;
    out.sum_squares += d * d;
  }
  if (out.constant) out.sum_squares = 0.0;
  return out;
}

/// Pearson correlation of two pre-centered series. This is the single
/// arithmetic path used both by pearson() and by the LTC matrix engine, so
/// the two agree bit for bit.
[[nodiscard]] inline CorrelationResult correlate_centered(std::span<const double> x,
                                                          double x_sum_squares,
                                                          std::span<const double> y,
                                                          double y_sum_squares) {
  if (x_sum_squares == 0.0 || y_sum_squares == 0.0) return {0.0, true};
  double cross = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) cross += x[i] * y[i];
  const double r = cross / std::sqrt(x_sum_squares * y_sum_squares);
  return {std::clamp(r, -1.0, 1.0), false};
}

template <std::floating_point T, std::floating_point U>
[[nodiscard]] CorrelationResult pearson(std::span<const T> x, std::span<const U> y) {
  detail::check_pair(x, y, "pearson");
  const CenteredSeries cx = center(x);
  const CenteredSeries cy = center(y);
  return correlate_centered(cx.values, cx.sum_squares, cy.values, cy.sum_squares);
}

template <std::floating_point T>
[[nodiscard]] CorrelationResult pearson(const std::vector<T>& x, const std::vector<T>& y) {
  return pearson(std::span<const T>(x), std::span<const T>(y));
}

/// 1-based ranks; tied elements share the mean of the ranks they span.
template <std::floating_point T>
[[nodiscard]] std::vector<double> rank_average_ties(std::span<const T> x) {
  detail::check_series(x, "rank_average_ties");
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j
    const double shared = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = shared;
    i = j;
  }
  return ranks;
}

template <std::floating_point T>
[[nodiscard]] std::vector<double> rank_average_ties(const std::vector<T>& x) {
  return rank_average_ties(std::span<const T>(x));
}

template <std::floating_point T, std::floating_point U>
[[nodiscard]] CorrelationResult spearman(std::span<const T> x, std::span<const U> y) {
  detail::check_pair(x, y, "spearman");
  const auto rx = rank_average_ties(x);
  const auto ry = rank_average_ties(y);
  return pearson(std::span<const double>(rx), std::span<const double>(ry));
}

template <std::floating_point T>
[[nodiscard]] CorrelationResult spearman(const std::vector<T>& x, const std::vector<T>& y) {
  return spearman(std::span<const T>(x), std::span<const T>(y));
}

}  // namespace muse
