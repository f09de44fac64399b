#pragma once

// Closed-form compute (FLOPs) and storage (bytes) overheads of coreset
// selection and training-data-attribution methods, as functions of the
// workload size. Constant factors (the 2s and 3s counting forward/backward
// passes) are kept.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "muse/error.hpp"

namespace muse {

/// Workload symbols. Unset fields are only an error for methods that use them.
struct WorkloadParams {
  std::optional<double> n_train;           // N
  std::optional<double> n_query;           // Q
  std::optional<double> epochs;            // T
  std::optional<double> flops_per_forward; // f
  std::optional<double> params;            // p
  std::optional<double> input_dim;         // d
  std::optional<double> classes;           // c
  std::optional<double> coreset_size;      // k, defaults to ⌈0.1·N⌉
  std::optional<double> selection_frequency;  // γ
  std::optional<double> tolerance;         // ε
  std::optional<double> repeats;           // R
  std::optional<double> sampling_ratio;    // α
  std::optional<double> projection_dim;    // p′
  std::optional<double> batch_size;        // b
  double bytes_per_param = 4.0;
};

/// ImageNet-1k / ResNet-18 reference workload (90 epochs, R = 10, γ = 1,
/// ε = 0.01, 10% coreset).
[[nodiscard]] inline WorkloadParams reference_workload() {
  WorkloadParams w;
  w.n_train = 1281167;
  w.n_query = 50000;
  w.epochs = 90;
  w.flops_per_forward = 1818228160;
  w.params = 11689128;
  w.input_dim = 224.0 * 224.0 * 3.0;
  w.classes = 1000;
  w.repeats = 10;
  w.selection_frequency = 1;
  w.tolerance = 0.01;
  w.bytes_per_param = 4;
  return w;
}

/// Sets a field by its config-file key (N, Q, T, f, p, d, c, k, gamma,
/// epsilon, R, alpha, p_prime, b, bytes_per_param).
inline void set_workload_param(WorkloadParams& w, std::string_view key, double value) {
  if (!std::isfinite(value)) throw_usage("workload parameter '" + std::string(key) + "' is not finite");
  const std::map<std::string_view, std::optional<double> WorkloadParams::*> fields{
      {"N", &WorkloadParams::n_train},
      {"Q", &WorkloadParams::n_query},
      {"T", &WorkloadParams::epochs},
      {"f", &WorkloadParams::flops_per_forward},
      {"p", &WorkloadParams::params},
      {"d", &WorkloadParams::input_dim},
      {"c", &WorkloadParams::classes},
      {"k", &WorkloadParams::coreset_size},
      {"gamma", &WorkloadParams::selection_frequency},
      {"epsilon", &WorkloadParams::tolerance},
      {"R", &WorkloadParams::repeats},
      {"alpha", &WorkloadParams::sampling_ratio},
      {"p_prime", &WorkloadParams::projection_dim},
      {"b", &WorkloadParams::batch_size},
  };
  if (key == "bytes_per_param") {
    if (!(value > 0)) throw_usage("bytes_per_param must be positive");
    w.bytes_per_param = value;
    return;
  }
  const auto it = fields.find(key);
  if (it == fields.end()) throw_usage("unknown workload parameter '" + std::string(key) + "'");
  w.*(it->second) = value;
}

[[nodiscard]] inline std::vector<std::string> workload_param_keys() {
  return {"N", "Q", "T", "f", "p", "d", "c", "k", "gamma", "epsilon",
          "R", "alpha", "p_prime", "b", "bytes_per_param"};
}

struct OverheadRow {
  std::string method;
  double compute_flops = 0.0;
  double storage_bytes = 0.0;
};

struct OverheadTable {
  std::vector<OverheadRow> rows;

  [[nodiscard]] const OverheadRow& at(std::string_view method) const {
    for (const auto& r : rows) {
      if (r.method == method) return r;
    }
    throw_usage("no row for method '" + std::string(method) + "'");
  }
};

namespace detail {

inline double need(const std::optional<double>& value, const char* symbol, const char* method) {
  if (!value) {
    throw_usage(std::string("missing parameter ") + symbol + " required by " + method);
  }
  if (!(*value > 0.0)) {
    throw_usage(std::string("parameter ") + symbol + " must be positive (used by " + method + ")");
  }
  return *value;
}

inline double need_tolerance(const WorkloadParams& w, const char* method) {
  const double eps = need(w.tolerance, "epsilon", method);
  if (eps >= 1.0) throw_usage(std::string("epsilon must lie in (0, 1) for ") + method);
  return eps;
}

inline double need_alpha(const WorkloadParams& w, const char* method) {
  const double alpha = need(w.sampling_ratio, "alpha", method);
  if (alpha > 1.0) throw_usage(std::string("alpha must lie in (0, 1] for ") + method);
  return alpha;
}

inline double coreset_k(const WorkloadParams& w, const char* method) {
  if (w.coreset_size) return need(w.coreset_size, "k", method);
  return std::ceil(0.1 * need(w.n_train, "N", method));
}

inline double ceil_alpha_n(const WorkloadParams& w, const char* method) {
  return std::ceil(need_alpha(w, method) * need(w.n_train, "N", method));
}

}  // namespace detail

[[nodiscard]] inline OverheadRow ltc_overhead(const WorkloadParams& w) {
  const char* m = "LTC";
  using detail::need;
  return {m, need(w.n_query, "Q", m) * need(w.epochs, "T", m) * need(w.flops_per_forward, "f", m),
          need(w.n_train, "N", m) * need(w.epochs, "T", m) * w.bytes_per_param};
}

/// Coreset-selection overheads. `methods` restricts the rows (by name);
/// empty means all eight.
[[nodiscard]] inline OverheadTable coreset_overheads(const WorkloadParams& w,
                                                     const std::vector<std::string>& methods = {}) {
  using detail::need;
  const double B = w.bytes_per_param;
  auto wanted = [&](std::string_view name) {
    return methods.empty() || std::find(methods.begin(), methods.end(), name) != methods.end();
  };
  OverheadTable t;
  if (wanted("Glister")) {
    const char* m = "Glister";
    const double n = need(w.n_train, "N", m), q = need(w.n_query, "Q", m);
    const double epochs = need(w.epochs, "T", m), f = need(w.flops_per_forward, "f", m);
    const double gamma = need(w.selection_frequency, "gamma", m);
    const double eps = detail::need_tolerance(w, m);
    t.rows.push_back({m, n * q * epochs * f / gamma * std::log10(1.0 / eps), q * B});
  }
  if (wanted("Forgetting")) {
    const char* m = "Forgetting";
    t.rows.push_back({m, 0.0, need(w.n_train, "N", m) * need(w.epochs, "T", m) * B});
  }
  if (wanted("GraphCut")) {
    const char* m = "GraphCut";
    const double n = need(w.n_train, "N", m);
    t.rows.push_back({m, n * n * detail::coreset_k(w, m), n * n * B});
  }
  if (wanted("Cal")) {
    const char* m = "Cal";
    const double n = need(w.n_train, "N", m), d = need(w.input_dim, "d", m);
    t.rows.push_back({m, n * need(w.n_query, "Q", m) * d, n * d * B});
  }
  if (wanted("GraNd")) {
    const char* m = "GraNd";
    const double n = need(w.n_train, "N", m), epochs = need(w.epochs, "T", m);
    const double r = need(w.repeats, "R", m);
    t.rows.push_back({m, 3.0 * n * epochs * r * need(w.flops_per_forward, "f", m),
                      n * epochs * r * need(w.params, "p", m) * B});
  }
  if (wanted("Herding")) {
    const char* m = "Herding";
    const double n = need(w.n_train, "N", m), d = need(w.input_dim, "d", m);
    t.rows.push_back({m, n * need(w.epochs, "T", m) * d, n * d * B});
  }
  if (wanted("Slocurv")) {
    const char* m = "Slocurv";
    const double n = need(w.n_train, "N", m), r = need(w.repeats, "R", m);
    t.rows.push_back({m, 3.0 * n * r * need(w.flops_per_forward, "f", m),
                      n * r * need(w.input_dim, "d", m) * B});
  }
  if (wanted("LTC")) t.rows.push_back(ltc_overhead(w));
  return t;
}

/// Training-data-attribution overheads, same conventions as coreset_overheads.
[[nodiscard]] inline OverheadTable tda_overheads(const WorkloadParams& w,
                                                 const std::vector<std::string>& methods = {}) {
  using detail::need;
  const double B = w.bytes_per_param;
  auto wanted = [&](std::string_view name) {
    return methods.empty() || std::find(methods.begin(), methods.end(), name) != methods.end();
  };
  OverheadTable t;
  if (wanted("Infl")) {
    const char* m = "Infl";
    const double an = detail::ceil_alpha_n(w, m), r = need(w.repeats, "R", m);
    t.rows.push_back({m,
                      3.0 * an * need(w.n_query, "Q", m) * r * need(w.epochs, "T", m) *
                          need(w.flops_per_forward, "f", m),
                      r * need(w.params, "p", m) * B});
  }
  if (wanted("Datamodels")) {
    const char* m = "Datamodels";
    const double an = detail::ceil_alpha_n(w, m), r = need(w.repeats, "R", m);
    t.rows.push_back({m, 3.0 * an * r * need(w.epochs, "T", m) * need(w.flops_per_forward, "f", m),
                      r * need(w.n_train, "N", m) * B});
  }
  if (wanted("TRAK")) {
    const char* m = "TRAK";
    const double n = need(w.n_train, "N", m), pp = need(w.projection_dim, "p_prime", m);
    t.rows.push_back({m, 2.0 * n * need(w.repeats, "R", m) * need(w.params, "p", m) * pp, n * pp * B});
  }
  if (wanted("Arnoldi")) {
    const char* m = "Arnoldi";
    const double n = need(w.n_train, "N", m), q = need(w.n_query, "Q", m), p = need(w.params, "p", m);
    t.rows.push_back({m, 2.0 * n * q * p * need(w.projection_dim, "p_prime", m), n * q * p * B});
  }
  if (wanted("TracIn")) {
    const char* m = "TracIn";
    const double n = need(w.n_train, "N", m), epochs = need(w.epochs, "T", m);
    t.rows.push_back({m, 3.0 * n * epochs * need(w.flops_per_forward, "f", m),
                      n * epochs * need(w.params, "p", m) * B});
  }
  if (wanted("LTC")) t.rows.push_back(ltc_overhead(w));
  return t;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

enum class UnitMode { raw, engineering };

inline constexpr double kFlopsPerPflop = 1e15;
inline constexpr double kBytesPerGb = 1e9;

/// Three significant digits: fixed notation in [0.01, 1000), scientific
/// otherwise.
[[nodiscard]] inline std::string format_sig3(double value) {
  char buf[48];
  const double mag = std::abs(value);
  if (value == 0.0) {
    std::snprintf(buf, sizeof(buf), "0.00");
  } else if (mag >= 0.01 && mag < 999.5) {
    const int exponent = static_cast<int>(std::floor(std::log10(mag)));
    const int decimals = std::max(0, 2 - exponent);
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, value);
  } else {
    std::snprintf(buf, sizeof(buf), "%.2e", value);
  }
  return buf;
}

[[nodiscard]] inline std::string format_raw(double value) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", value);
  return buf;
}

[[nodiscard]] inline std::string format_compute(double flops, UnitMode mode) {
  return mode == UnitMode::engineering ? format_sig3(flops / kFlopsPerPflop) + " PFLOPs"
                                       : format_raw(flops) + " FLOPs";
}

[[nodiscard]] inline std::string format_storage(double bytes, UnitMode mode) {
  return mode == UnitMode::engineering ? format_sig3(bytes / kBytesPerGb) + " GB"
                                       : format_raw(bytes) + " B";
}

/// Column-aligned plain-text table.
[[nodiscard]] inline std::string render_report(const OverheadTable& table, UnitMode mode) {
  std::vector<std::array<std::string, 3>> cells;
  cells.push_back({"method", "compute", "storage"});
  for (const auto& r : table.rows) {
    cells.push_back({r.method, format_compute(r.compute_flops, mode),
                     format_storage(r.storage_bytes, mode)});
  }
  std::array<std::size_t, 3> width{};
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < 3; ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : cells) {
    out << row[0] << std::string(width[0] - row[0].size() + 2, ' ');
    // numeric columns right-aligned
    out << std::string(width[1] - row[1].size(), ' ') << row[1] << "  ";
    out << std::string(width[2] - row[2].size(), ' ') << row[2] << '\n';
  }
  return out.str();
}

[[nodiscard]] inline std::string render_csv(const OverheadTable& table) {
  std::ostringstream out;
  out << "method,compute_flops,storage_bytes,compute_pflops,storage_gb\n";
  char buf[160];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.6g,%.6g\n", r.method.c_str(),
                  r.compute_flops, r.storage_bytes, r.compute_flops / kFlopsPerPflop,
                  r.storage_bytes / kBytesPerGb);
    out << buf;
  }
  return out.str();
}

}  // namespace muse
