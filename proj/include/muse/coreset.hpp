#pragma once

// Top-k coreset selection over per-sample scores, globally or under a
// per-class quota, and the JSON manifest that records the result.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "muse/detail/bytes.hpp"
#include "muse/detail/csv.hpp"
#include "muse/error.hpp"
#include "muse/ltc.hpp"
#include "muse/trajectory.hpp"

namespace muse {

enum class SelectionPolicy { global_top_k, class_balanced };

[[nodiscard]] inline std::string to_string(SelectionPolicy policy) {
  return policy == SelectionPolicy::global_top_k ? "global-top-k" : "class-balanced";
}

[[nodiscard]] inline SelectionPolicy parse_selection_policy(std::string_view text) {
  if (text == "global-top-k" || text == "global") return SelectionPolicy::global_top_k;
  if (text == "class-balanced") return SelectionPolicy::class_balanced;
  throw_usage("unknown selection policy '" + std::string(text) + "'");
}

struct SelectedSample {
  std::uint64_t id = 0;
  double score = 0.0;
  std::optional<std::uint32_t> label;

  bool operator==(const SelectedSample&) const = default;
};

struct CoresetManifest {
  SelectionPolicy policy = SelectionPolicy::global_top_k;
  std::size_t k = 0;
  std::vector<SelectedSample> selected;  // best first
  std::map<std::uint32_t, std::size_t> per_class_count;
  std::vector<std::string> warnings;
  std::string source_digest;

  [[nodiscard]] std::vector<std::uint64_t> ids() const {
    std::vector<std::uint64_t> out;
    out.reserve(selected.size());
    for (const auto& s : selected) out.push_back(s.id);
    return out;
  }

  bool operator==(const CoresetManifest&) const = default;
};

/// Digest of the selection inputs: ids, score bit patterns and labels.
[[nodiscard]] inline std::string selection_inputs_digest(const LtcScores& scores,
                                                         std::span<const std::uint32_t> labels) {
  detail::ByteWriter w;
  for (auto id : scores.train_ids) w.put(id);
  for (double s : scores.scores) w.put_f64(s);
  for (auto l : labels) w.put(l);
  return "crc32:" + detail::hex32(detail::crc32_of(w.bytes()));
}

namespace detail {

struct Candidate {
  std::size_t index;
  std::uint64_t id;
  double score;
};

/// Ranking order: higher score first, ascending id on ties.
inline bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

inline void check_scores(const LtcScores& scores, std::size_t k) {
  if (scores.scores.size() != scores.train_ids.size()) {
    throw_usage("score / id count mismatch");
  }
  const std::size_t n = scores.scores.size();
  if (k < 1 || k > n) {
    throw_usage("k out of range: k=" + std::to_string(k) + " must lie in [1, " +
                std::to_string(n) + "]");
  }
  for (double s : scores.scores) {
    if (!std::isfinite(s)) throw_data("non-finite score");
  }
}

inline CoresetManifest finish_manifest(std::vector<Candidate> chosen, const LtcScores& scores,
                                       std::span<const std::uint32_t> labels,
                                       SelectionPolicy policy, std::string digest,
                                       std::optional<std::uint32_t> n_classes) {
  std::sort(chosen.begin(), chosen.end(), ranks_before);
  CoresetManifest out;
  out.policy = policy;
  out.k = chosen.size();
  out.source_digest = digest.empty() ? selection_inputs_digest(scores, labels) : std::move(digest);
  if (n_classes) {
    for (std::uint32_t c = 0; c < *n_classes; ++c) out.per_class_count[c] = 0;
  }
  for (const auto& c : chosen) {
    SelectedSample s{c.id, c.score, std::nullopt};
    if (!labels.empty()) {
      s.label = labels[c.index];
      ++out.per_class_count[labels[c.index]];
    }
    out.selected.push_back(s);
  }
  return out;
}

}  // namespace detail

/// The k highest-scoring samples (ascending id breaks ties). `labels` is
/// optional and only annotates the manifest.
[[nodiscard]] inline CoresetManifest select_top_k(const LtcScores& scores, std::size_t k,
                                                  std::span<const std::uint32_t> labels = {},
                                                  std::string source_digest = {}) {
  detail::check_scores(scores, k);
  if (!labels.empty() && labels.size() != scores.scores.size()) {
    throw_usage("label count does not match score count");
  }
  std::vector<detail::Candidate> all;
  all.reserve(scores.scores.size());
  for (std::size_t i = 0; i < scores.scores.size(); ++i) {
    all.push_back({i, scores.train_ids[i], scores.scores[i]});
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    detail::ranks_before);
  all.resize(k);
  return detail::finish_manifest(std::move(all), scores, labels,
                                 SelectionPolicy::global_top_k, std::move(source_digest),
                                 std::nullopt);
}

/// Quota-constrained selection. Each class gets ⌊k/c⌋ slots filled by its own
/// best candidates. The k mod c remaining slots go one each to the classes
/// whose best not-yet-selected candidate ranks highest. Slots a class cannot
/// fill are given to the best remaining candidates of any class, and the
/// shortfall is recorded as a warning.
[[nodiscard]] inline CoresetManifest select_class_balanced(const LtcScores& scores,
                                                           std::span<const std::uint32_t> labels,
                                                           std::size_t k, std::uint32_t n_classes,
                                                           std::string source_digest = {}) {
  detail::check_scores(scores, k);
  const std::size_t n = scores.scores.size();
  if (labels.size() != n) throw_usage("label count does not match score count");
  if (n_classes == 0) throw_usage("class count must be positive");
  for (auto l : labels) {
    if (l >= n_classes) {
      throw_usage("class count " + std::to_string(n_classes) +
                  " is inconsistent with label " + std::to_string(l));
    }
  }

  std::vector<std::vector<detail::Candidate>> by_class(n_classes);
  for (std::size_t i = 0; i < n; ++i) {
    by_class[labels[i]].push_back({i, scores.train_ids[i], scores.scores[i]});
  }
  for (auto& members : by_class) std::sort(members.begin(), members.end(), detail::ranks_before);

  std::vector<std::size_t> taken(n_classes, 0);
  std::vector<std::string> warnings;
  const std::size_t quota = k / n_classes;
  std::size_t unfilled = 0;
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    taken[c] = std::min(quota, by_class[c].size());
    if (taken[c] < quota) {
      unfilled += quota - taken[c];
      warnings.push_back("class " + std::to_string(c) + " has " +
                         std::to_string(by_class[c].size()) + " candidates for a quota of " +
                         std::to_string(quota));
    }
  }

  std::vector<bool> got_extra(n_classes, false);
  for (std::size_t extra = k % n_classes; extra > 0; --extra) {
    std::optional<std::uint32_t> best;
    for (std::uint32_t c = 0; c < n_classes; ++c) {
      if (got_extra[c] || taken[c] >= by_class[c].size()) continue;
      if (!best || detail::ranks_before(by_class[c][taken[c]], by_class[*best][taken[*best]])) {
        best = c;
      }
    }
    if (!best) {
      unfilled += extra;
      break;
    }
    got_extra[*best] = true;
    ++taken[*best];
  }

  std::vector<detail::Candidate> chosen;
  std::vector<detail::Candidate> rest;
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    const auto split = by_class[c].begin() + static_cast<std::ptrdiff_t>(taken[c]);
    chosen.insert(chosen.end(), by_class[c].begin(), split);
    rest.insert(rest.end(), split, by_class[c].end());
  }
  if (unfilled > 0) {
    std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(unfilled),
                      rest.end(), detail::ranks_before);
    chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(unfilled));
    warnings.push_back(std::to_string(unfilled) +
                       " slot(s) redistributed to the best remaining candidates");
  }

  auto manifest = detail::finish_manifest(std::move(chosen), scores, labels,
                                          SelectionPolicy::class_balanced,
                                          std::move(source_digest), n_classes);
  manifest.warnings = std::move(warnings);
  return manifest;
}

// ---------------------------------------------------------------------------
// Manifest JSON
// ---------------------------------------------------------------------------

inline constexpr int kManifestVersion = 1;

[[nodiscard]] inline nlohmann::json manifest_to_json(const CoresetManifest& m) {
  if (m.k == 0) throw_usage("manifest with k=0");
  if (m.selected.size() != m.k) throw_usage("manifest selection size differs from k");
  std::unordered_set<std::uint64_t> seen;
  for (const auto& s : m.selected) {
    if (!seen.insert(s.id).second) throw_usage("manifest contains duplicate id");
  }
  nlohmann::json j;
  j["version"] = kManifestVersion;
  j["policy"] = to_string(m.policy);
  j["k"] = m.k;
  j["selected"] = nlohmann::json::array();
  for (const auto& s : m.selected) {
    nlohmann::json e;
    e["id"] = s.id;
    e["score"] = s.score;
    e["label"] = s.label ? nlohmann::json(*s.label) : nlohmann::json(nullptr);
    j["selected"].push_back(std::move(e));
  }
  j["per_class_count"] = nlohmann::json::object();
  for (const auto& [c, count] : m.per_class_count) j["per_class_count"][std::to_string(c)] = count;
  j["warnings"] = m.warnings;
  j["source_digest"] = m.source_digest;
  return j;
}

/// Writes the manifest as sorted-key JSON terminated by a newline.
inline std::size_t export_manifest(const CoresetManifest& m, std::ostream& out) {
  const std::string text = manifest_to_json(m).dump(2) + "\n";
  out << text;
  if (!out) throw_internal("manifest write failure");
  return text.size();
}

[[nodiscard]] inline CoresetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kManifestVersion) throw_data("unsupported manifest version");
    CoresetManifest m;
    m.policy = parse_selection_policy(j.at("policy").get<std::string>());
    m.k = j.at("k").get<std::size_t>();
    for (const auto& e : j.at("selected")) {
      SelectedSample s;
      s.id = e.at("id").get<std::uint64_t>();
      s.score = e.at("score").get<double>();
      if (!e.at("label").is_null()) s.label = e.at("label").get<std::uint32_t>();
      m.selected.push_back(s);
    }
    for (const auto& [key, value] : j.at("per_class_count").items()) {
      m.per_class_count[static_cast<std::uint32_t>(detail::parse_u64(key, "class key"))] =
          value.get<std::size_t>();
    }
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    m.source_digest = j.at("source_digest").get<std::string>();
    if (m.k == 0 || m.selected.size() != m.k) throw_data("manifest k does not match selection");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw_data(std::string("malformed manifest: ") + e.what());
  }
}

/// Parses a manifest. When `dataset` is given, the manifest's digest must
/// match it and every selected id must exist in it.
[[nodiscard]] inline CoresetManifest load_manifest(std::istream& in,
                                                   const TrajectoryDataset* dataset = nullptr) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw_data(std::string("malformed manifest JSON: ") + e.what());
  }
  CoresetManifest m = manifest_from_json(j);
  if (dataset) {
    const std::string expected = dataset_digest(*dataset);
    if (m.source_digest != expected) {
      throw_data("digest mismatch: manifest " + m.source_digest + ", dataset " + expected);
    }
    std::unordered_set<std::uint64_t> ids(dataset->sample_ids.begin(), dataset->sample_ids.end());
    for (const auto& s : m.selected) {
      if (!ids.contains(s.id)) throw_data("manifest id " + std::to_string(s.id) + " not in dataset");
    }
  }
  return m;
}

/// Reads "train_id,score" CSV as written by write_scores_csv.
[[nodiscard]] inline LtcScores read_scores_csv(std::istream& in) {
  const auto lines = detail::read_lines(in);
  if (lines.empty() || lines.front() != "train_id,score") throw_data("scores CSV: bad header");
  LtcScores out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto fields = detail::split_csv_line(lines[i]);
    if (fields.size() != 2) throw_data("scores CSV: expected 2 fields on line " + std::to_string(i + 1));
    out.train_ids.push_back(detail::parse_u64(fields[0], "train id"));
    out.scores.push_back(detail::parse_double(fields[1], "score"));
  }
  return out;
}

}  // namespace muse
