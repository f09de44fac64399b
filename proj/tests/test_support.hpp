#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "muse/rng.hpp"
#include "muse/trajectory.hpp"

namespace muse::testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("muse_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] std::string file(const std::string& name) const { return (path_ / name).string(); }
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Random valid dataset. Losses are quantized to the dtype so that they
/// round-trip exactly.
inline TrajectoryDataset random_dataset(CounterRng& rng, std::size_t n, std::uint32_t s,
                                        std::uint32_t c, Dtype dtype, std::string tag = "train") {
  TrajectoryDataset d;
  d.split_tag = std::move(tag);
  d.dtype = dtype;
  d.n_classes = c;
  d.n_snapshots = s;
  std::uint64_t id = rng.below(1000);
  for (std::size_t i = 0; i < n; ++i) {
    id += 1 + rng.below(1u << 20);
    d.sample_ids.push_back(id);
    d.labels.push_back(static_cast<std::uint32_t>(rng.below(c)));
  }
  for (std::size_t i = 0; i < n * s; ++i) d.losses.push_back(quantize(rng.uniform(0.0, 5.0), dtype));
  return d;
}

/// Definitional Pearson formula evaluated in long double, independent of the
/// library's centered-series path. Returns 0 for a constant series.
inline double naive_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  bool x_const = true, y_const = true;
  for (std::size_t i = 1; i < n; ++i) {
    x_const = x_const && x[i] == x[0];
    y_const = y_const && y[i] == y[0];
  }
  if (x_const || y_const) return 0.0;
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

inline std::vector<std::uint8_t> bytes_of(const TrajectoryDataset& d) { return encode_dataset(d); }

}  // namespace muse::testing
