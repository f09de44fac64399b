#pragma once

// LTRJ: the on-disk per-sample loss-trajectory format.
//
//   offset  size  field
//   0       4     magic "LTRJ"
//   4       2     u16 version (1)
//   6       1     u8 dtype (0 = f32, 1 = f64)
//   7       1     u8 reserved (0)
//   8       8     u64 n_samples N
//   16      4     u32 n_snapshots S
//   20      4     u32 n_classes c
//   24      2     u16 split-tag length L
//   26      L     split tag (UTF-8)
//   ...     8N    sample ids (u64)
//   ...     4N    labels (u32)
//   ...     e·NS  losses, sample-major, e = 4 or 8
//   ...     4     CRC32 of every preceding byte
//
// All integers little-endian. Snapshot 0 is the pre-training loss; snapshot t
// is the loss after epoch t.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "muse/detail/bytes.hpp"
#include "muse/error.hpp"

namespace muse {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::array<std::uint8_t, 4> kTrajectoryMagic{'L', 'T', 'R', 'J'};
inline constexpr std::uint16_t kTrajectoryVersion = 1;
inline constexpr std::size_t kSnapshotCountOffset = 16;

[[nodiscard]] constexpr std::size_t dtype_size(Dtype dtype) noexcept {
  return dtype == Dtype::f64 ? 8 : 4;
}

/// Rounds a loss to the precision `dtype` stores on disk.
[[nodiscard]] inline double quantize(double value, Dtype dtype) noexcept {
  return dtype == Dtype::f32 ? static_cast<double>(static_cast<float>(value)) : value;
}

struct TrajectoryDataset {
  std::uint16_t format_version = kTrajectoryVersion;
  std::string split_tag;
  Dtype dtype = Dtype::f32;
  std::uint32_t n_classes = 0;
  std::uint32_t n_snapshots = 0;
  std::vector<std::uint64_t> sample_ids;
  std::vector<std::uint32_t> labels;
  std::vector<double> losses;  // n_samples × n_snapshots, sample-major

  [[nodiscard]] std::size_t n_samples() const noexcept { return sample_ids.size(); }

  [[nodiscard]] double loss(std::size_t sample, std::size_t snapshot) const {
    return losses[sample * n_snapshots + snapshot];
  }

  [[nodiscard]] std::span<const double> trajectory(std::size_t sample) const {
    return {losses.data() + sample * n_snapshots, n_snapshots};
  }

  bool operator==(const TrajectoryDataset&) const = default;
};

/// Per-sample epoch-to-epoch loss changes: deltas[m][t] = loss[m][t+1] - loss[m][t].
struct DeltaMatrix {
  std::size_t n_samples = 0;
  std::size_t n_deltas = 0;
  std::vector<std::uint64_t> sample_ids;
  std::vector<double> deltas;  // n_samples × n_deltas

  [[nodiscard]] std::span<const double> row(std::size_t sample) const {
    return {deltas.data() + sample * n_deltas, n_deltas};
  }
};

struct ValidationIssue {
  std::string code;
  std::string message;
  std::size_t offset = 0;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;

  [[nodiscard]] bool ok() const noexcept { return issues.empty(); }
  [[nodiscard]] bool has(std::string_view code) const {
    return std::any_of(issues.begin(), issues.end(),
                       [&](const ValidationIssue& i) { return i.code == code; });
  }
};

[[nodiscard]] inline std::size_t trajectory_header_size(std::string_view split_tag) noexcept {
  return 26 + split_tag.size();
}

namespace detail {

inline void check_header_fields(std::string_view split_tag, std::size_t n_samples,
                                std::uint32_t n_classes,
                                std::span<const std::uint64_t> ids,
                                std::span<const std::uint32_t> labels) {
  if (split_tag.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw_data("split tag longer than 65535 bytes");
  }
  if (ids.size() != n_samples || labels.size() != n_samples) {
    throw_data("sample id / label count mismatch");
  }
  std::vector<std::uint64_t> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw_data("duplicate id");
  }
  for (std::uint32_t label : labels) {
    if (label >= n_classes) {
      throw_data("label out of range: " + std::to_string(label) + " >= " +
                 std::to_string(n_classes));
    }
  }
}

inline void put_header(ByteWriter& w, Dtype dtype, std::uint64_t n_samples,
                       std::uint32_t n_snapshots, std::uint32_t n_classes,
                       std::string_view split_tag,
                       std::span<const std::uint64_t> ids,
                       std::span<const std::uint32_t> labels) {
  for (std::uint8_t b : kTrajectoryMagic) w.put(b);
  w.put(kTrajectoryVersion);
  w.put(static_cast<std::uint8_t>(dtype));
  w.put(std::uint8_t{0});
  w.put(n_samples);
  w.put(n_snapshots);
  w.put(n_classes);
  w.put(static_cast<std::uint16_t>(split_tag.size()));
  w.put_bytes(split_tag);
  for (std::uint64_t id : ids) w.put(id);
  for (std::uint32_t label : labels) w.put(label);
}

inline void put_loss(ByteWriter& w, double value, Dtype dtype) {
  if (dtype == Dtype::f32) {
    w.put_f32(static_cast<float>(value));
  } else {
    w.put_f64(value);
  }
}

/// Single pass over an LTRJ buffer. Collects every issue it can find; fills
/// `out` only when the structure was complete enough to decode.
inline ValidationReport parse_trajectory(std::span<const std::uint8_t> bytes,
                                         TrajectoryDataset* out) {
  ValidationReport report;
  constexpr std::size_t kMaxPerRule = 32;
  auto issue = [&](std::string code, std::string message, std::size_t offset) {
    report.issues.push_back({std::move(code), std::move(message), offset});
  };
  auto eof = [&](std::size_t offset, const char* what) {
    issue("unexpected_eof", std::string("unexpected EOF while reading ") + what, offset);
    return report;
  };

  ByteReader r(bytes);
  std::array<std::uint8_t, 4> magic{};
  for (auto& b : magic) {
    auto v = r.get<std::uint8_t>();
    if (!v) return eof(r.position(), "magic");
    b = *v;
  }
  if (magic != kTrajectoryMagic) issue("bad_magic", "bad magic bytes", 0);

  const auto version = r.get<std::uint16_t>();
  const auto dtype_code = r.get<std::uint8_t>();
  const auto reserved = r.get<std::uint8_t>();
  const auto n_samples = r.get<std::uint64_t>();
  const auto n_snapshots = r.get<std::uint32_t>();
  const auto n_classes = r.get<std::uint32_t>();
  const auto tag_length = r.get<std::uint16_t>();
  if (!tag_length) return eof(r.position(), "header");
  if (*version != kTrajectoryVersion) {
    issue("unsupported_version", "unsupported version " + std::to_string(*version), 4);
  }
  if (*dtype_code > 1) {
    issue("unknown_dtype", "unknown dtype code " + std::to_string(*dtype_code), 6);
    return report;
  }
  if (*reserved != 0) issue("reserved_nonzero", "reserved byte is not zero", 7);
  if (*n_snapshots < 2) {
    issue("too_few_snapshots", "n_snapshots must be at least 2", kSnapshotCountOffset);
  }
  auto tag = r.get_string(*tag_length);
  if (!tag) return eof(r.position(), "split tag");

  const Dtype dtype = static_cast<Dtype>(*dtype_code);
  const std::uint64_t n = *n_samples;
  const std::uint64_t s = *n_snapshots;
  // Reject sizes that cannot fit in the buffer before allocating anything.
  const std::uint64_t avail = r.remaining();
  if (n > avail / 12 || (s != 0 && n * s > (avail - 12 * n) / dtype_size(dtype))) {
    issue("unexpected_eof", "unexpected EOF: declared dimensions exceed file size",
          r.position());
    return report;
  }

  const std::size_t ids_offset = r.position();
  std::vector<std::uint64_t> ids(n);
  for (auto& id : ids) id = *r.get<std::uint64_t>();
  std::vector<std::uint32_t> labels(n);
  const std::size_t labels_offset = r.position();
  for (auto& label : labels) label = *r.get<std::uint32_t>();

  {
    std::vector<std::pair<std::uint64_t, std::size_t>> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = {ids[i], i};
    std::sort(order.begin(), order.end());
    std::size_t count = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (order[i].first == order[i - 1].first && count++ < kMaxPerRule) {
        issue("duplicate_id", "duplicate id " + std::to_string(order[i].first),
              ids_offset + 8 * std::max(order[i].second, order[i - 1].second));
      }
    }
  }
  {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] >= *n_classes && count++ < kMaxPerRule) {
        issue("label_out_of_range",
              "label out of range: " + std::to_string(labels[i]) +
                  " >= " + std::to_string(*n_classes),
              labels_offset + 4 * i);
      }
    }
  }

  const std::size_t losses_offset = r.position();
  const std::size_t esize = dtype_size(dtype);
  std::vector<double> losses(n * s);
  {
    std::size_t count = 0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
      double value;
      if (dtype == Dtype::f32) {
        value = static_cast<double>(std::bit_cast<float>(*r.get<std::uint32_t>()));
      } else {
        value = std::bit_cast<double>(*r.get<std::uint64_t>());
      }
      if (!std::isfinite(value) && count++ < kMaxPerRule) {
        issue("non_finite_loss", "NaN/Inf loss detected", losses_offset + esize * i);
      }
      losses[i] = value;
    }
  }

  const std::size_t crc_offset = r.position();
  const auto stored_crc = r.get<std::uint32_t>();
  if (!stored_crc) return eof(crc_offset, "checksum");
  if (*stored_crc != crc32_of(bytes.first(crc_offset))) {
    issue("checksum_mismatch", "checksum mismatch", crc_offset);
  }
  if (r.remaining() != 0) {
    issue("trailing_bytes", std::to_string(r.remaining()) + " trailing bytes after checksum",
          r.position());
  }

  if (out) {
    out->format_version = *version;
    out->split_tag = std::move(*tag);
    out->dtype = dtype;
    out->n_classes = *n_classes;
    out->n_snapshots = *n_snapshots;
    out->sample_ids = std::move(ids);
    out->labels = std::move(labels);
    out->losses = std::move(losses);
  }
  return report;
}

}  // namespace detail

/// Throws Error(data) describing the first violated dataset invariant.
inline void check_invariants(const TrajectoryDataset& dataset) {
  if (dataset.n_snapshots < 2) throw_data("n_snapshots must be at least 2");
  if (dataset.losses.size() != dataset.n_samples() * dataset.n_snapshots) {
    throw_data("loss matrix size does not match n_samples x n_snapshots");
  }
  detail::check_header_fields(dataset.split_tag, dataset.n_samples(), dataset.n_classes,
                              dataset.sample_ids, dataset.labels);
  for (double value : dataset.losses) {
    if (!std::isfinite(quantize(value, dataset.dtype))) throw_data("NaN/Inf loss");
  }
}

[[nodiscard]] inline std::vector<std::uint8_t> encode_dataset(const TrajectoryDataset& dataset) {
  check_invariants(dataset);
  detail::ByteWriter w;
  detail::put_header(w, dataset.dtype, dataset.n_samples(), dataset.n_snapshots,
                     dataset.n_classes, dataset.split_tag, dataset.sample_ids,
                     dataset.labels);
  for (double value : dataset.losses) detail::put_loss(w, value, dataset.dtype);
  w.put_crc();
  return w.take();
}

inline std::size_t write_dataset(const TrajectoryDataset& dataset, std::ostream& out) {
  return detail::write_all(out, encode_dataset(dataset));
}

inline std::size_t write_dataset_file(const TrajectoryDataset& dataset,
                                      const std::string& path) {
  return detail::write_file(path, encode_dataset(dataset));
}

[[nodiscard]] inline ValidationReport validate(std::span<const std::uint8_t> bytes) {
  return detail::parse_trajectory(bytes, nullptr);
}

[[nodiscard]] inline ValidationReport validate(std::istream& in) {
  const auto bytes = detail::read_all(in);
  return validate(bytes);
}

/// Decodes and fully validates an LTRJ buffer; the first issue becomes the
/// thrown error.
[[nodiscard]] inline TrajectoryDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  TrajectoryDataset dataset;
  const ValidationReport report = detail::parse_trajectory(bytes, &dataset);
  if (!report.ok()) {
    const auto& first = report.issues.front();
    throw_data(first.message + " (offset " + std::to_string(first.offset) + ")");
  }
  return dataset;
}

[[nodiscard]] inline TrajectoryDataset read_dataset(std::istream& in) {
  const auto bytes = detail::read_all(in);
  return decode_dataset(bytes);
}

[[nodiscard]] inline TrajectoryDataset read_dataset_file(const std::string& path) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_dataset(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

/// "crc32:xxxxxxxx": the checksum stored in the dataset's canonical encoding.
[[nodiscard]] inline std::string dataset_digest(const TrajectoryDataset& dataset) {
  return detail::content_digest(encode_dataset(dataset));
}

/// Streams snapshots into an LTRJ file as training proceeds. The header, ids
/// and labels are written at construction with a zero snapshot count, which
/// finalize() back-patches along with the checksum. Because losses are stored
/// sample-major, appended snapshots are buffered until finalize().
class TrajectoryWriter {
 public:
  TrajectoryWriter(std::string path, std::vector<std::uint64_t> sample_ids,
                   std::vector<std::uint32_t> labels, std::uint32_t n_classes,
                   std::string split_tag, Dtype dtype = Dtype::f32)
      : path_(std::move(path)), dtype_(dtype), n_samples_(sample_ids.size()) {
    detail::check_header_fields(split_tag, n_samples_, n_classes, sample_ids, labels);
    detail::ByteWriter w;
    detail::put_header(w, dtype_, n_samples_, 0, n_classes, split_tag, sample_ids, labels);
    out_.open(path_, std::ios::binary | std::ios::trunc | std::ios::in | std::ios::out);
    if (!out_) throw_internal("cannot open '" + path_ + "' for writing");
    detail::write_all(out_, w.bytes());
  }

  TrajectoryWriter(const TrajectoryWriter&) = delete;
  TrajectoryWriter& operator=(const TrajectoryWriter&) = delete;

  void append_snapshot(std::span<const double> epoch_losses) {
    if (finalized_) throw_usage("append after finalize");
    if (epoch_losses.size() != n_samples_) {
      throw_data("length mismatch: expected " + std::to_string(n_samples_) +
                 " losses, got " + std::to_string(epoch_losses.size()));
    }
    std::vector<double> column(epoch_losses.size());
    for (std::size_t i = 0; i < column.size(); ++i) {
      column[i] = quantize(epoch_losses[i], dtype_);
      if (!std::isfinite(column[i])) throw_data("non-finite loss at sample index " + std::to_string(i));
    }
    snapshots_.push_back(std::move(column));
  }

  [[nodiscard]] std::size_t n_snapshots() const noexcept { return snapshots_.size(); }

  /// Writes losses, snapshot count and checksum. Returns total bytes written.
  std::size_t finalize() {
    if (finalized_) throw_usage("writer already finalized");
    if (snapshots_.size() < 2) throw_usage("finalize requires at least 2 snapshots");
    detail::ByteWriter body;
    for (std::size_t m = 0; m < n_samples_; ++m) {
      for (const auto& column : snapshots_) detail::put_loss(body, column[m], dtype_);
    }
    detail::write_all(out_, body.bytes());

    detail::ByteWriter count;
    count.put(static_cast<std::uint32_t>(snapshots_.size()));
    out_.seekp(static_cast<std::streamoff>(kSnapshotCountOffset));
    detail::write_all(out_, count.bytes());
    out_.flush();

    out_.seekg(0);
    const auto content = detail::read_all(out_);
    out_.clear();
    detail::ByteWriter crc;
    crc.put(detail::crc32_of(content));
    out_.seekp(0, std::ios::end);
    detail::write_all(out_, crc.bytes());
    out_.close();
    finalized_ = true;
    snapshots_.clear();
    return content.size() + 4;
  }

 private:
  std::string path_;
  Dtype dtype_;
  std::size_t n_samples_;
  std::fstream out_;
  std::vector<std::vector<double>> snapshots_;
  bool finalized_ = false;
};

[[nodiscard]] inline DeltaMatrix compute_deltas(const TrajectoryDataset& dataset) {
  if (dataset.n_snapshots < 2) throw_data("compute_deltas requires at least 2 snapshots");
  DeltaMatrix out;
  out.n_samples = dataset.n_samples();
  out.n_deltas = dataset.n_snapshots - 1;
  out.sample_ids = dataset.sample_ids;
  out.deltas.resize(out.n_samples * out.n_deltas);
  for (std::size_t m = 0; m < out.n_samples; ++m) {
    const auto row = dataset.trajectory(m);
    for (std::size_t t = 0; t < out.n_deltas; ++t) {
      out.deltas[m * out.n_deltas + t] = row[t + 1] - row[t];
    }
  }
  return out;
}

}  // namespace muse
