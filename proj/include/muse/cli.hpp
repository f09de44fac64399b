#pragma once

// Command-line front end. run_cli parses the arguments, dispatches to the
// subcommand and maps errors onto exit codes: 0 success, 1 usage error,
// 2 data/validation error, 3 internal error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "muse/coreset.hpp"
#include "muse/cost.hpp"
#include "muse/detail/bytes.hpp"
#include "muse/detail/csv.hpp"
#include "muse/error.hpp"
#include "muse/eval.hpp"
#include "muse/ltc.hpp"
#include "muse/parallel.hpp"
#include "muse/rng.hpp"
#include "muse/trainer.hpp"
#include "muse/trajectory.hpp"

namespace muse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInternal = 3;

[[nodiscard]] inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return kExitUsage;
    case ErrorKind::data: return kExitData;
    case ErrorKind::internal: return kExitInternal;
  }
  return kExitInternal;
}

/// Reads "key = value" lines; '#' starts a comment, blank lines are skipped.
[[nodiscard]] inline std::vector<std::pair<std::string, std::string>> read_key_value_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw_usage("cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return std::string{};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw_usage(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw_usage(path + ":" + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

namespace cli_detail {

struct TrainOptions {
  std::string model = "softmax";
  std::size_t hidden = 16;
  double lr = 0.1;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  double init_scale = 1.0;
  std::string dtype = "f32";

  [[nodiscard]] TrainConfig to_config(std::uint64_t seed) const {
    TrainConfig c;
    c.model_kind = model == "mlp" ? ModelKind::mlp : ModelKind::softmax;
    c.hidden_units = hidden;
    c.learning_rate = lr;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.weight_decay = weight_decay;
    c.weight_init_scale = init_scale;
    c.loss_dtype = dtype == "f64" ? Dtype::f64 : Dtype::f32;
    c.seed = seed;
    return c;
  }
};

struct DataOptions {
  std::uint32_t classes = 3;
  std::size_t per_class = 100;
  std::size_t query_per_class = 20;
  std::size_t dims = 10;
  double spread = 0.5;
  double noise = 0.0;
};

struct LtcOptions {
  std::string precision = "f32";
  std::size_t max_query = 0;
};

struct SelectOptions {
  std::size_t k = 0;
  double fraction = 0.0;
  std::string policy = "class-balanced";
};

/// Option values for every subcommand; the CLI::App keeps pointers into it.
struct State {
  std::uint64_t seed = 0;
  std::size_t workers = default_workers();
  std::string config;
  std::string out_dir;
  std::string out;
  DataOptions data;
  TrainOptions train;
  LtcOptions ltc;
  SelectOptions select;

  // validate
  std::vector<std::string> validate_paths;
  // ltc / select / influencers / lds / brittleness inputs
  std::string train_path;
  std::string query_path;
  std::string out_matrix;
  std::string out_scores;
  std::string out_csv;
  std::string scores_path;
  std::string matrix_path;
  std::uint64_t query_id = 0;
  std::size_t count = 10;
  std::string direction = "positive";
  std::optional<std::uint32_t> class_filter;
  std::string train_data;
  std::string query_data;
  std::string attribution;
  std::size_t subsets = 100;
  double alpha = 0.5;
  std::size_t lds_retrains = 1;
  std::size_t brittle_retrains = 5;
  std::string measurable = "correctness";
  std::vector<std::size_t> k_values;
  std::vector<double> k_fractions;
  std::string flip_reference = "model";
  // cost
  std::string cost_set = "coreset";
  std::string preset;
  std::string units = "engineering";
  std::string format = "text";
  std::vector<std::string> methods;
  std::vector<std::pair<std::string, double>> workload;
};

inline void add_seed(CLI::App* sub, State& s) {
  sub->add_option("--seed", s.seed, "Seed for all randomness")->capture_default_str();
}

inline void add_workers(CLI::App* sub, State& s) {
  sub->add_option("--workers", s.workers, "Worker threads (default: MUSE_WORKERS or 1)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

inline void add_config(CLI::App* sub, State& s) {
  sub->add_option("--config", s.config, "key=value file; flags override its values");
}

inline void add_data_options(CLI::App* sub, State& s) {
  auto& d = s.data;
  sub->add_option("--classes", d.classes, "Number of classes")->capture_default_str()->check(CLI::Range(2u, 1000000u));
  sub->add_option("--per-class", d.per_class, "Training samples per class")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--query-per-class", d.query_per_class, "Clean query samples per class")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--dims", d.dims, "Feature dimension")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--spread", d.spread, "Cluster standard deviation")->capture_default_str()->check(CLI::NonNegativeNumber);
  sub->add_option("--noise", d.noise, "Fraction of training labels flipped")->capture_default_str()->check(CLI::Range(0.0, 1.0));
}

inline void add_train_options(CLI::App* sub, State& s) {
  auto& t = s.train;
  sub->add_option("--model", t.model, "Model kind")->capture_default_str()->check(CLI::IsMember({"softmax", "mlp"}));
  sub->add_option("--hidden", t.hidden, "Hidden units (mlp)")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--lr", t.lr, "SGD learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--batch-size", t.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--weight-decay", t.weight_decay, "L2 penalty on weights")->capture_default_str()->check(CLI::NonNegativeNumber);
  sub->add_option("--init-scale", t.init_scale, "Initial weight scale (0 = zero init)")->capture_default_str()->check(CLI::NonNegativeNumber);
}

inline void add_dtype(CLI::App* sub, State& s) {
  sub->add_option("--dtype", s.train.dtype, "Loss storage precision")->capture_default_str()->check(CLI::IsMember({"f32", "f64"}));
}

inline void add_ltc_options(CLI::App* sub, State& s) {
  sub->add_option("--precision", s.ltc.precision, "LTC matrix precision")->capture_default_str()->check(CLI::IsMember({"f32", "f64"}));
  sub->add_option("--max-query", s.ltc.max_query, "Use a uniform sample of at most this many queries (0 = all)")->capture_default_str();
}

inline void add_select_options(CLI::App* sub, State& s) {
  sub->add_option("--k", s.select.k, "Coreset size");
  sub->add_option("--fraction", s.select.fraction, "Coreset size as a fraction of N (used when --k is absent)")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--policy", s.select.policy, "Selection policy")->capture_default_str()->check(CLI::IsMember({"global", "global-top-k", "class-balanced"}));
}

/// Fills options that were not given on the command line from a key=value
/// file. Keys are flag names without the leading dashes; '_' and '-' are
/// interchangeable.
inline void apply_config(CLI::App* sub, const std::string& path) {
  for (const auto& [key, value] : read_key_value_file(path)) {
    if (key == "config") throw_usage("config files cannot include other config files");
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt) {
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      opt = sub->get_option_no_throw("--" + dashed);
    }
    if (!opt) throw_usage("unknown config key '" + key + "' for " + sub->get_name());
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw_usage("config key '" + key + "': " + e.what());
    }
  }
}

inline std::string file_digest(const std::string& path) {
  return detail::content_digest(detail::read_file(path));
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw_usage("cannot create directory '" + dir + "': " + ec.message());
}

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw_internal("cannot write '" + path + "'");
}

/// Writes to `path`, or to `fallback` when the path is empty.
inline void emit(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty()) {
    fallback << text;
  } else {
    write_text_file(path, text);
  }
}

inline LabeledDataset read_labeled_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw_data("cannot open '" + path + "'");
  return read_labeled_csv(in);
}

inline LtcScores read_scores_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw_data("cannot open '" + path + "'");
  return read_scores_csv(in);
}

/// Rethrows a library error with the pipeline stage prefixed.
template <typename Fn>
auto staged(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(stage) + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Stages shared by the subcommands and the pipeline
// ---------------------------------------------------------------------------

struct ToyArtifacts {
  std::string train_ltrj, query_ltrj, train_csv, query_csv;
  std::size_t n_train = 0;
  std::size_t n_query = 0;
  std::size_t n_noisy = 0;
};

inline ToyArtifacts train_toy_stage(const State& s, const std::string& out_dir) {
  if (out_dir.empty()) throw_usage("--out-dir is required");
  SyntheticSpec train_spec;
  train_spec.classes = s.data.classes;
  train_spec.per_class = s.data.per_class;
  train_spec.dims = s.data.dims;
  train_spec.cluster_spread = s.data.spread;
  train_spec.label_noise_fraction = s.data.noise;
  train_spec.seed = derive_seed(s.seed, {1});
  SyntheticSpec query_spec = train_spec;
  query_spec.per_class = s.data.query_per_class;
  query_spec.label_noise_fraction = 0.0;
  query_spec.seed = derive_seed(s.seed, {2});
  query_spec.id_offset = static_cast<std::uint64_t>(s.data.classes) * s.data.per_class;

  const LabeledDataset train = make_synthetic(train_spec);
  const LabeledDataset query = make_synthetic(query_spec);
  const TrainResult result = train_with_logging(train, query, s.train.to_config(derive_seed(s.seed, {3})));

  ensure_dir(out_dir);
  ToyArtifacts a;
  a.train_ltrj = join_path(out_dir, "train.ltrj");
  a.query_ltrj = join_path(out_dir, "query.ltrj");
  a.train_csv = join_path(out_dir, "train.csv");
  a.query_csv = join_path(out_dir, "query.csv");
  write_dataset_file(result.train_trajectory, a.train_ltrj);
  write_dataset_file(result.query_trajectory, a.query_ltrj);
  std::ostringstream tcsv, qcsv;
  write_labeled_csv(train, tcsv);
  write_labeled_csv(query, qcsv);
  write_text_file(a.train_csv, tcsv.str());
  write_text_file(a.query_csv, qcsv.str());
  a.n_train = train.size();
  a.n_query = query.size();
  a.n_noisy = static_cast<std::size_t>(std::count(train.noisy.begin(), train.noisy.end(), 1));
  return a;
}

/// Keeps a uniform sample of at most `max_rows` rows (all when 0), in order.
inline DeltaMatrix subsample_rows(const DeltaMatrix& m, std::size_t max_rows, std::uint64_t seed) {
  if (max_rows == 0 || m.n_samples <= max_rows) return m;
  CounterRng rng(derive_seed(seed, {0x9e7}));
  DeltaMatrix out;
  out.n_samples = max_rows;
  out.n_deltas = m.n_deltas;
  for (std::size_t i : sample_without_replacement(m.n_samples, max_rows, rng)) {
    out.sample_ids.push_back(m.sample_ids[i]);
    const auto row = m.row(i);
    out.deltas.insert(out.deltas.end(), row.begin(), row.end());
  }
  return out;
}

struct LtcArtifacts {
  LtcScores scores;
  std::size_t n_query_used = 0;
  std::size_t n_degenerate = 0;
};

inline LtcArtifacts ltc_stage(const State& s, const TrajectoryDataset& train,
                              const TrajectoryDataset& query, const std::string& matrix_path,
                              const std::string& csv_path) {
  const DeltaMatrix train_deltas = compute_deltas(train);
  const DeltaMatrix query_deltas = subsample_rows(compute_deltas(query), s.ltc.max_query, s.seed);
  LtcArtifacts a;
  auto finish = [&](const auto& matrix) {
    if (!matrix_path.empty()) write_ltc_matrix_file(matrix, matrix_path);
    if (!csv_path.empty()) {
      std::ostringstream text;
      write_ltc_csv(matrix, text);
      write_text_file(csv_path, text.str());
    }
    a.scores = ltc_avg(matrix);
    a.n_query_used = matrix.n_query;
    a.n_degenerate = static_cast<std::size_t>(
        std::count(matrix.degenerate.begin(), matrix.degenerate.end(), 1));
  };
  if (s.ltc.precision == "f64") {
    finish(ltc_matrix<double>(train_deltas, query_deltas, s.workers));
  } else {
    finish(ltc_matrix<float>(train_deltas, query_deltas, s.workers));
  }
  return a;
}

inline std::size_t resolve_k(const SelectOptions& o, std::size_t n) {
  if (o.k > 0) {
    if (o.k > n) {
      throw_usage("k out of range: k=" + std::to_string(o.k) + " exceeds N=" + std::to_string(n));
    }
    return o.k;
  }
  if (o.fraction > 0.0) {
    return std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(o.fraction * static_cast<double>(n))), 1, n);
  }
  throw_usage("either --k or --fraction is required");
}

/// Selects from scores aligned to `train` by id. `train` may be null for the
/// global policy, in which case the manifest carries no labels.
inline CoresetManifest select_stage(const SelectOptions& o, const LtcScores& scores,
                                    const TrajectoryDataset* train) {
  const SelectionPolicy policy = parse_selection_policy(o.policy);
  const std::size_t k = resolve_k(o, scores.scores.size());
  if (!train) {
    if (policy == SelectionPolicy::class_balanced) {
      throw_usage("class-balanced selection needs labels (--train)");
    }
    return select_top_k(scores, k);
  }
  std::unordered_map<std::uint64_t, std::uint32_t> label_of;
  for (std::size_t i = 0; i < train->sample_ids.size(); ++i) {
    label_of.emplace(train->sample_ids[i], train->labels[i]);
  }
  if (label_of.size() != scores.train_ids.size()) {
    throw_data("scores cover " + std::to_string(scores.train_ids.size()) +
               " samples, the training file has " + std::to_string(label_of.size()));
  }
  std::vector<std::uint32_t> labels;
  labels.reserve(scores.train_ids.size());
  for (auto id : scores.train_ids) {
    const auto it = label_of.find(id);
    if (it == label_of.end()) throw_data("score id " + std::to_string(id) + " not in the training file");
    labels.push_back(it->second);
  }
  const std::string digest = dataset_digest(*train);
  if (policy == SelectionPolicy::class_balanced) {
    return select_class_balanced(scores, labels, k, train->n_classes, digest);
  }
  return select_top_k(scores, k, labels, digest);
}

inline std::string manifest_text(const CoresetManifest& m) {
  std::ostringstream out;
  export_manifest(m, out);
  return out.str();
}

/// Scores reordered to match `ids`.
inline std::vector<double> align_scores(const LtcScores& scores, const std::vector<std::uint64_t>& ids) {
  std::unordered_map<std::uint64_t, double> by_id;
  for (std::size_t i = 0; i < scores.train_ids.size(); ++i) by_id.emplace(scores.train_ids[i], scores.scores[i]);
  if (by_id.size() != ids.size()) throw_data("scores do not cover the training set exactly");
  std::vector<double> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw_data("no score for train id " + std::to_string(id));
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

inline int cmd_train_toy(const State& s, std::ostream& out) {
  const ToyArtifacts a = train_toy_stage(s, s.out_dir);
  nlohmann::json j;
  j["n_train"] = a.n_train;
  j["n_query"] = a.n_query;
  j["n_noisy"] = a.n_noisy;
  j["artifacts"] = {{"train.ltrj", file_digest(a.train_ltrj)},
                    {"query.ltrj", file_digest(a.query_ltrj)},
                    {"train.csv", file_digest(a.train_csv)},
                    {"query.csv", file_digest(a.query_csv)}};
  out << j.dump(2) << '\n';
  return kExitOk;
}

inline int cmd_validate(const State& s, std::ostream& out) {
  bool all_ok = true;
  for (const auto& path : s.validate_paths) {
    const auto bytes = detail::read_file(path);
    const ValidationReport report = validate(std::span<const std::uint8_t>(bytes));
    if (report.ok()) {
      const TrajectoryDataset d = decode_dataset(bytes);
      out << path << ": ok (" << d.sample_ids.size() << " samples, " << d.n_snapshots
          << " snapshots, " << (d.dtype == Dtype::f64 ? "f64" : "f32") << ", "
          << dataset_digest(d) << ")\n";
    } else {
      all_ok = false;
      for (const auto& issue : report.issues) {
        out << path << ": " << issue.code << " at byte " << issue.offset << ": " << issue.message << '\n';
      }
    }
  }
  return all_ok ? kExitOk : kExitData;
}

inline int cmd_ltc(const State& s, std::ostream& out, std::ostream& err) {
  const TrajectoryDataset train = read_dataset_file(s.train_path);
  const TrajectoryDataset query = read_dataset_file(s.query_path);
  const LtcArtifacts a = ltc_stage(s, train, query, s.out_matrix, s.out_csv);
  std::ostringstream scores;
  write_scores_csv(a.scores, scores);
  emit(s.out_scores, scores.str(), out);
  err << "ltc: " << a.scores.scores.size() << " train x " << a.n_query_used << " query, "
      << a.n_degenerate << " degenerate entries\n";
  return kExitOk;
}

inline int cmd_select(const State& s, std::ostream& out, std::ostream& err) {
  const LtcScores scores = read_scores_file(s.scores_path);
  std::optional<TrajectoryDataset> train;
  if (!s.train_path.empty()) train = read_dataset_file(s.train_path);
  const CoresetManifest m = select_stage(s.select, scores, train ? &*train : nullptr);
  for (const auto& w : m.warnings) err << "warning: " << w << '\n';
  emit(s.out, manifest_text(m), out);
  return kExitOk;
}

inline int cmd_influencers(const State& s, std::ostream& out) {
  const LtcMatrix64 matrix = read_ltc_matrix_file<double>(s.matrix_path);
  const auto qit = std::find(matrix.query_ids.begin(), matrix.query_ids.end(), s.query_id);
  if (qit == matrix.query_ids.end()) throw_usage("query id " + std::to_string(s.query_id) + " not in matrix");
  std::vector<std::uint32_t> labels;
  if (!s.train_path.empty()) {
    const TrajectoryDataset train = read_dataset_file(s.train_path);
    std::unordered_map<std::uint64_t, std::uint32_t> label_of;
    for (std::size_t i = 0; i < train.sample_ids.size(); ++i) label_of.emplace(train.sample_ids[i], train.labels[i]);
    for (auto id : matrix.train_ids) {
      const auto it = label_of.find(id);
      if (it == label_of.end()) throw_data("matrix train id " + std::to_string(id) + " not in training file");
      labels.push_back(it->second);
    }
  } else if (s.class_filter) {
    throw_usage("--class needs --train for labels");
  }
  const auto q = static_cast<std::size_t>(qit - matrix.query_ids.begin());
  const Direction dir = s.direction == "negative" ? Direction::most_negative : Direction::most_positive;
  const auto top = top_influencers(matrix, q, labels, s.class_filter, s.count, dir);
  std::ostringstream text;
  text << "rank,train_id,ltc" << (labels.empty() ? "" : ",label") << '\n';
  char buf[32];
  for (std::size_t i = 0; i < top.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g", top[i].value);
    text << i + 1 << ',' << top[i].train_id << ',' << buf;
    if (!labels.empty()) text << ',' << labels[top[i].train_index];
    text << '\n';
  }
  emit(s.out, text.str(), out);
  return kExitOk;
}

inline int cmd_lds(const State& s, std::ostream& out, std::ostream& err) {
  const LabeledDataset train = read_labeled_file(s.train_data);
  const LabeledDataset query = read_labeled_file(s.query_data);
  const AttributionMatrix attr = load_attribution_file(s.attribution);
  LdsConfig config;
  config.n_subsets = s.subsets;
  config.sampling_ratio = s.alpha;
  config.retrains_per_subset = s.lds_retrains;
  config.seed = s.seed;
  config.measurable = s.measurable == "neg-loss" ? Measurable::negative_query_loss
                                                 : Measurable::query_correctness;
  config.workers = s.workers;
  const LdsReport report = run_lds(train, query, attr, s.train.to_config(0), config);
  err << "lds: mean " << report.mean_lds << " over " << report.per_query.size() - report.n_excluded
      << " queries (" << report.n_excluded << " excluded)\n";
  emit(s.out, to_json(report, config).dump(2) + "\n", out);
  return kExitOk;
}

inline int cmd_brittleness(const State& s, std::ostream& out, std::ostream& err) {
  const LabeledDataset train = read_labeled_file(s.train_data);
  const LabeledDataset query = read_labeled_file(s.query_data);
  const std::vector<double> scores = align_scores(read_scores_file(s.scores_path), train.sample_ids);
  BrittlenessConfig config;
  config.k_values = s.k_values;
  const std::vector<double> fractions =
      s.k_fractions.empty() && s.k_values.empty() ? std::vector<double>{0.0, 0.01, 0.05, 0.1}
                                                  : s.k_fractions;
  for (double f : fractions) {
    config.k_values.push_back(static_cast<std::size_t>(std::llround(f * static_cast<double>(train.size()))));
  }
  std::sort(config.k_values.begin(), config.k_values.end());
  config.k_values.erase(std::unique(config.k_values.begin(), config.k_values.end()), config.k_values.end());
  config.retrains = s.brittle_retrains;
  config.seed = s.seed;
  config.reference = s.flip_reference == "labels" ? FlipReference::correct_to_incorrect
                                                  : FlipReference::reference_model;
  config.workers = s.workers;
  const BrittlenessReport report = run_brittleness(train, query, scores, s.train.to_config(0), config);
  for (std::size_t i = 0; i < report.k_values.size(); ++i) {
    err << "brittleness: k=" << report.k_values[i] << " flips " << report.flip_fraction[i]
        << " +- " << report.flip_stddev[i] << '\n';
  }
  emit(s.out, to_json(report, config).dump(2) + "\n", out);
  return kExitOk;
}

inline int cmd_cost(const State& s, std::ostream& out) {
  WorkloadParams w;
  if (s.preset == "table4") w = reference_workload();
  for (const auto& [key, value] : s.workload) set_workload_param(w, key, value);
  const OverheadTable table = s.cost_set == "tda" ? tda_overheads(w, s.methods) : coreset_overheads(w, s.methods);
  if (table.rows.empty()) throw_usage("no method matched --method");
  if (s.format == "csv") {
    out << render_csv(table);
  } else {
    out << render_report(table, s.units == "raw" ? UnitMode::raw : UnitMode::engineering);
  }
  return kExitOk;
}

inline int cmd_run(const State& s, std::ostream& out, std::ostream& err) {
  if (s.out_dir.empty()) throw_usage("run: --out-dir is required");
  const std::size_t n = static_cast<std::size_t>(s.data.classes) * s.data.per_class;
  staged("select", [&] { return resolve_k(s.select, n); });
  staged("select", [&] { return parse_selection_policy(s.select.policy); });

  const ToyArtifacts toy = staged("train-toy", [&] { return train_toy_stage(s, s.out_dir); });
  const std::string matrix_path = join_path(s.out_dir, "ltc.ltcm");
  const std::string scores_path = join_path(s.out_dir, "scores.csv");
  const std::string manifest_path = join_path(s.out_dir, "manifest.json");
  const TrajectoryDataset train = staged("ltc", [&] { return read_dataset_file(toy.train_ltrj); });
  const LtcArtifacts ltc = staged("ltc", [&] {
    const TrajectoryDataset query = read_dataset_file(toy.query_ltrj);
    LtcArtifacts a = ltc_stage(s, train, query, matrix_path, "");
    std::ostringstream text;
    write_scores_csv(a.scores, text);
    write_text_file(scores_path, text.str());
    return a;
  });
  const CoresetManifest manifest = staged("select", [&] { return select_stage(s.select, ltc.scores, &train); });
  for (const auto& w : manifest.warnings) err << "warning: " << w << '\n';
  write_text_file(manifest_path, manifest_text(manifest));

  nlohmann::json summary;
  summary["version"] = 1;
  summary["seed"] = s.seed;
  summary["n_train"] = toy.n_train;
  summary["n_query"] = toy.n_query;
  summary["n_query_used"] = ltc.n_query_used;
  summary["n_noisy"] = toy.n_noisy;
  summary["k"] = manifest.k;
  summary["policy"] = to_string(manifest.policy);
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [c, count] : manifest.per_class_count) counts[std::to_string(c)] = count;
  summary["per_class_count"] = counts;
  summary["train_digest"] = dataset_digest(train);
  summary["artifacts"] = {{"train.ltrj", file_digest(toy.train_ltrj)},
                          {"query.ltrj", file_digest(toy.query_ltrj)},
                          {"train.csv", file_digest(toy.train_csv)},
                          {"query.csv", file_digest(toy.query_csv)},
                          {"ltc.ltcm", file_digest(matrix_path)},
                          {"scores.csv", file_digest(scores_path)},
                          {"manifest.json", file_digest(manifest_path)}};
  const std::string text = summary.dump(2) + "\n";
  write_text_file(join_path(s.out_dir, "summary.json"), text);
  out << text;
  return kExitOk;
}

}  // namespace cli_detail

/// The parser and its option storage. Exposed so tests can walk the flag
/// registry.
class Cli {
 public:
  Cli() : app_(std::make_unique<CLI::App>("Loss-trajectory correlation toolkit", "muse")) {
    using namespace cli_detail;
    auto& s = state_;
    app_->require_subcommand(1);
    app_->set_version_flag("--version", "muse 0.1.0");

    auto* train_toy = app_->add_subcommand("train-toy", "Train a toy model on synthetic data and log loss trajectories");
    add_config(train_toy, s);
    add_data_options(train_toy, s);
    add_train_options(train_toy, s);
    add_dtype(train_toy, s);
    add_seed(train_toy, s);
    train_toy->add_option("--out-dir", s.out_dir, "Directory for train/query LTRJ and CSV files")->required();

    auto* validate = app_->add_subcommand("validate", "Check LTRJ files for structural and numeric problems");
    validate->add_option("files", s.validate_paths, "LTRJ files")->required();

    auto* ltc = app_->add_subcommand("ltc", "Compute the LTC matrix and per-sample average scores");
    add_config(ltc, s);
    ltc->add_option("--train", s.train_path, "Training-split LTRJ")->required();
    ltc->add_option("--query", s.query_path, "Query-split LTRJ")->required();
    ltc->add_option("--out-matrix", s.out_matrix, "Write the matrix as LTCM");
    ltc->add_option("--out-csv", s.out_csv, "Write the matrix as wide CSV");
    ltc->add_option("--out-scores", s.out_scores, "Write train_id,score CSV here instead of stdout");
    add_ltc_options(ltc, s);
    add_seed(ltc, s);
    add_workers(ltc, s);

    auto* select = app_->add_subcommand("select", "Select a coreset from scores and write its manifest");
    add_config(select, s);
    select->add_option("--scores", s.scores_path, "train_id,score CSV")->required();
    select->add_option("--train", s.train_path, "Training-split LTRJ (labels and source digest)");
    add_select_options(select, s);
    select->add_option("--out", s.out, "Write the manifest here instead of stdout");

    auto* influencers = app_->add_subcommand("influencers", "List the training samples with the largest LTC for one query");
    add_config(influencers, s);
    influencers->add_option("--matrix", s.matrix_path, "LTCM file")->required();
    influencers->add_option("--query-id", s.query_id, "Query sample id")->required();
    influencers->add_option("--count", s.count, "Number of samples to list")->capture_default_str()->check(CLI::PositiveNumber);
    influencers->add_option("--direction", s.direction, "Most positive or most negative")->capture_default_str()->check(CLI::IsMember({"positive", "negative"}));
    influencers->add_option("--class", s.class_filter, "Only training samples with this label");
    influencers->add_option("--train", s.train_path, "Training-split LTRJ (labels)");
    influencers->add_option("--out", s.out, "Write the CSV here instead of stdout");

    auto* lds = app_->add_subcommand("lds", "Linear datamodeling score of an attribution matrix");
    add_config(lds, s);
    lds->add_option("--train-data", s.train_data, "Training features CSV (id,label,f1..)")->required();
    lds->add_option("--query-data", s.query_data, "Query features CSV")->required();
    lds->add_option("--attribution", s.attribution, "LTCM or wide CSV attribution matrix")->required();
    lds->add_option("--subsets", s.subsets, "Number of random subsets")->capture_default_str()->check(CLI::Range(std::size_t{2}, std::size_t{1000000}));
    lds->add_option("--alpha", s.alpha, "Subset sampling ratio")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    lds->add_option("--retrains", s.lds_retrains, "Retrains per subset")->capture_default_str()->check(CLI::PositiveNumber);
    lds->add_option("--measurable", s.measurable, "Outcome measured per query")->capture_default_str()->check(CLI::IsMember({"correctness", "neg-loss"}));
    add_train_options(lds, s);
    add_seed(lds, s);
    add_workers(lds, s);
    lds->add_option("--out", s.out, "Write the JSON report here instead of stdout");

    auto* brittle = app_->add_subcommand("brittleness", "Prediction flips after removing the top-scored training samples");
    add_config(brittle, s);
    brittle->add_option("--train-data", s.train_data, "Training features CSV (id,label,f1..)")->required();
    brittle->add_option("--query-data", s.query_data, "Query features CSV")->required();
    brittle->add_option("--scores", s.scores_path, "train_id,score CSV")->required();
    brittle->add_option("--k", s.k_values, "Removal counts")->delimiter(',');
    brittle->add_option("--k-fraction", s.k_fractions, "Removal counts as fractions of N (default 0,0.01,0.05,0.1)")->delimiter(',');
    brittle->add_option("--retrains", s.brittle_retrains, "Retrains per removal count")->capture_default_str()->check(CLI::PositiveNumber);
    brittle->add_option("--flip-reference", s.flip_reference, "Compare against the full-data model or count correct-to-incorrect flips")->capture_default_str()->check(CLI::IsMember({"model", "labels"}));
    add_train_options(brittle, s);
    add_seed(brittle, s);
    add_workers(brittle, s);
    brittle->add_option("--out", s.out, "Write the JSON report here instead of stdout");

    auto* cost = app_->add_subcommand("cost", "Compute and storage overheads of coreset and attribution methods");
    add_config(cost, s);
    cost->add_option("--set", s.cost_set, "Method family")->capture_default_str()->check(CLI::IsMember({"coreset", "tda"}));
    cost->add_option("--preset", s.preset, "Built-in workload")->check(CLI::IsMember({"table4"}));
    cost->add_option("--units", s.units, "Output units")->capture_default_str()->check(CLI::IsMember({"raw", "engineering"}));
    cost->add_option("--format", s.format, "Output format")->capture_default_str()->check(CLI::IsMember({"text", "csv"}));
    cost->add_option("--method", s.methods, "Only these methods (repeatable)");
    for (const auto& key : workload_param_keys()) {
      cost->add_option_function<double>(
          "--" + key, [&s, key](const double& v) { s.workload.emplace_back(key, v); },
          "Workload parameter " + key);
    }

    auto* run = app_->add_subcommand("run", "Train, compute LTC and select a coreset in one go");
    run->add_option("config", s.config, "key=value file; flags override its values");
    add_data_options(run, s);
    add_train_options(run, s);
    add_dtype(run, s);
    add_ltc_options(run, s);
    add_select_options(run, s);
    add_seed(run, s);
    add_workers(run, s);
    run->add_option("--out-dir", s.out_dir, "Directory for every artifact and summary.json");
  }

  [[nodiscard]] CLI::App& app() { return *app_; }

  int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    using namespace cli_detail;
    try {
      std::vector<std::string> reversed(args.rbegin(), args.rend());
      try {
        app_->parse(reversed);
      } catch (const CLI::CallForHelp&) {
        out << app_->help();
        return kExitOk;
      } catch (const CLI::CallForAllHelp&) {
        out << app_->help("", CLI::AppFormatMode::All);
        return kExitOk;
      } catch (const CLI::CallForVersion& e) {
        out << e.what() << '\n';
        return kExitOk;
      } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
      }
      CLI::App* sub = app_->get_subcommands().front();
      if (!state_.config.empty()) apply_config(sub, state_.config);
      const std::string name = sub->get_name();
      if (name == "train-toy") return cmd_train_toy(state_, out);
      if (name == "validate") return cmd_validate(state_, out);
      if (name == "ltc") return cmd_ltc(state_, out, err);
      if (name == "select") return cmd_select(state_, out, err);
      if (name == "influencers") return cmd_influencers(state_, out);
      if (name == "lds") return cmd_lds(state_, out, err);
      if (name == "brittleness") return cmd_brittleness(state_, out, err);
      if (name == "cost") return cmd_cost(state_, out);
      if (name == "run") return cmd_run(state_, out, err);
      throw_internal("unhandled subcommand " + name);
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      return exit_code_for(e.kind());
    } catch (const std::exception& e) {
      err << "internal error: " << e.what() << '\n';
      return kExitInternal;
    }
  }

 private:
  cli_detail::State state_;
  std::unique_ptr<CLI::App> app_;
};

/// Parses `args` (without the program name) and runs the subcommand.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Cli cli;
  return cli.run(args, out, err);
}

}  // namespace muse
