#pragma once

// A small deterministic trainer: multinomial logistic regression or a
// one-hidden-layer ReLU network, minibatch SGD on cross-entropy. It exists to
// produce real loss trajectories at desk scale without an ML framework.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "muse/detail/csv.hpp"
#include "muse/error.hpp"
#include "muse/rng.hpp"
#include "muse/trajectory.hpp"

namespace muse {

struct LabeledDataset {
  std::size_t dim = 0;
  std::uint32_t n_classes = 0;
  std::vector<double> features;  // size() × dim
  std::vector<std::uint32_t> labels;
  std::vector<std::uint64_t> sample_ids;
  std::vector<std::uint8_t> noisy;  // label-flip markers from make_synthetic; may be empty

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }

  /// Copy of the listed rows, in the listed order.
  [[nodiscard]] LabeledDataset subset(std::span<const std::size_t> rows) const {
    LabeledDataset out;
    out.dim = dim;
    out.n_classes = n_classes;
    out.features.reserve(rows.size() * dim);
    for (std::size_t i : rows) {
      const auto r = row(i);
      out.features.insert(out.features.end(), r.begin(), r.end());
      out.labels.push_back(labels[i]);
      out.sample_ids.push_back(sample_ids[i]);
      if (!noisy.empty()) out.noisy.push_back(noisy[i]);
    }
    return out;
  }
};

inline void check_dataset(const LabeledDataset& data) {
  if (data.features.size() != data.size() * data.dim || data.sample_ids.size() != data.size()) {
    throw_data("labeled dataset arrays have inconsistent sizes");
  }
  for (double v : data.features) {
    if (!std::isfinite(v)) throw_data("non-finite feature");
  }
  for (auto l : data.labels) {
    if (l >= data.n_classes) throw_data("label out of range");
  }
  std::unordered_set<std::uint64_t> ids(data.sample_ids.begin(), data.sample_ids.end());
  if (ids.size() != data.size()) throw_data("duplicate id");
}

enum class ModelKind { softmax, mlp };

struct TrainConfig {
  ModelKind model_kind = ModelKind::softmax;
  std::size_t hidden_units = 16;  // mlp only
  double learning_rate = 0.1;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double weight_init_scale = 1.0;  // 0 gives an all-zero model
  double weight_decay = 0.0;
  Dtype loss_dtype = Dtype::f32;
};

inline void check_config(const TrainConfig& config) {
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
    throw_usage("learning rate must be finite and non-negative");
  }
  if (config.epochs < 1) throw_usage("epochs must be at least 1");
  if (config.batch_size < 1) throw_usage("batch size must be at least 1");
  if (config.model_kind == ModelKind::mlp && config.hidden_units < 1) {
    throw_usage("mlp needs at least one hidden unit");
  }
  if (!(config.weight_init_scale >= 0.0) || !(config.weight_decay >= 0.0)) {
    throw_usage("init scale and weight decay must be non-negative");
  }
}

/// Parameters live in one flat vector so that gradients, finite differences
/// and updates share a single indexing scheme.
///   softmax: W[c×d] b[c]
///   mlp:     W1[H×d] b1[H] W2[c×H] b2[c]
struct ToyModel {
  ModelKind kind = ModelKind::softmax;
  std::size_t in_dim = 0;
  std::size_t hidden = 0;
  std::size_t n_classes = 0;
  std::vector<double> params;

  [[nodiscard]] std::size_t param_count() const noexcept { return params.size(); }

  [[nodiscard]] std::size_t out_fan_in() const noexcept {
    return kind == ModelKind::mlp ? hidden : in_dim;
  }

  // offsets into params
  [[nodiscard]] std::size_t w1() const noexcept { return 0; }
  [[nodiscard]] std::size_t b1() const noexcept { return hidden * in_dim; }
  [[nodiscard]] std::size_t w_out() const noexcept {
    return kind == ModelKind::mlp ? b1() + hidden : 0;
  }
  [[nodiscard]] std::size_t b_out() const noexcept { return w_out() + n_classes * out_fan_in(); }

  /// True for weight entries (weight decay applies), false for biases.
  [[nodiscard]] bool is_weight(std::size_t i) const noexcept {
    if (kind == ModelKind::mlp && i < w_out()) return i < b1();
    return i >= w_out() && i < b_out();
  }

  bool operator==(const ToyModel&) const = default;
};

namespace detail {

enum : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kSampleStream = 3, kNoiseStream = 4 };

struct Forward {
  std::vector<double> pre;     // hidden pre-activations (mlp)
  std::vector<double> hidden;  // relu output (mlp)
  std::vector<double> logits;
};

inline void check_dim(const ToyModel& model, std::size_t dim) {
  if (dim != model.in_dim) {
    throw_usage("dimension mismatch: model expects " + std::to_string(model.in_dim) +
                " features, got " + std::to_string(dim));
  }
}

inline void forward(const ToyModel& model, std::span<const double> x, Forward& f) {
  const double* p = model.params.data();
  std::span<const double> input = x;
  if (model.kind == ModelKind::mlp) {
    f.pre.assign(model.hidden, 0.0);
    f.hidden.assign(model.hidden, 0.0);
    for (std::size_t h = 0; h < model.hidden; ++h) {
      double z = p[model.b1() + h];
      const double* w = p + model.w1() + h * model.in_dim;
      for (std::size_t j = 0; j < model.in_dim; ++j) z += w[j] * x[j];
      f.pre[h] = z;
      f.hidden[h] = z > 0.0 ? z : 0.0;
    }
    input = f.hidden;
  }
  const std::size_t fan_in = model.out_fan_in();
  f.logits.assign(model.n_classes, 0.0);
  for (std::size_t k = 0; k < model.n_classes; ++k) {
    double z = p[model.b_out() + k];
    const double* w = p + model.w_out() + k * fan_in;
    for (std::size_t j = 0; j < fan_in; ++j) z += w[j] * input[j];
    f.logits[k] = z;
  }
}

/// log-sum-exp stabilized cross-entropy; also leaves softmax probabilities in
/// `probs` when given.
inline double cross_entropy(std::span<const double> logits, std::uint32_t label,
                            std::vector<double>* probs = nullptr) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - top);
  const double lse = top + std::log(sum);
  if (probs) {
    probs->resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) (*probs)[k] = std::exp(logits[k] - lse);
  }
  return lse - logits[label];
}

/// grad += weight · ∂loss/∂θ for one sample.
inline void accumulate_gradient(const ToyModel& model, std::span<const double> x,
                                std::uint32_t label, double weight, std::span<double> grad,
                                Forward& f, std::vector<double>& delta) {
  forward(model, x, f);
  cross_entropy(f.logits, label, &delta);
  delta[label] -= 1.0;  // ∂loss/∂logits = softmax − onehot
  const std::span<const double> input =
      model.kind == ModelKind::mlp ? std::span<const double>(f.hidden) : x;
  const std::size_t fan_in = model.out_fan_in();
  for (std::size_t k = 0; k < model.n_classes; ++k) {
    const double g = weight * delta[k];
    double* gw = grad.data() + model.w_out() + k * fan_in;
    for (std::size_t j = 0; j < fan_in; ++j) gw[j] += g * input[j];
    grad[model.b_out() + k] += g;
  }
  if (model.kind != ModelKind::mlp) return;
  const double* p = model.params.data();
  for (std::size_t h = 0; h < model.hidden; ++h) {
    if (f.pre[h] <= 0.0) continue;  // relu subgradient 0 at and below 0
    double back = 0.0;
    for (std::size_t k = 0; k < model.n_classes; ++k) {
      back += p[model.w_out() + k * fan_in + h] * delta[k];
    }
    const double g = weight * back;
    double* gw = grad.data() + model.w1() + h * model.in_dim;
    for (std::size_t j = 0; j < model.in_dim; ++j) gw[j] += g * x[j];
    grad[model.b1() + h] += g;
  }
}

}  // namespace detail

/// Uniform init in ±scale/√fan_in for weights, zero biases.
[[nodiscard]] inline ToyModel init_model(const TrainConfig& config, std::size_t in_dim,
                                         std::size_t n_classes) {
  ToyModel model;
  model.kind = config.model_kind;
  model.in_dim = in_dim;
  model.hidden = config.model_kind == ModelKind::mlp ? config.hidden_units : 0;
  model.n_classes = n_classes;
  model.params.assign(model.b_out() + n_classes, 0.0);
  if (config.weight_init_scale == 0.0) return model;
  CounterRng rng(derive_seed(config.seed, {detail::kInitStream}));
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double s = config.weight_init_scale / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) model.params[offset + i] = rng.uniform(-s, s);
  };
  if (model.kind == ModelKind::mlp) fill(model.w1(), model.hidden * in_dim, in_dim);
  fill(model.w_out(), n_classes * model.out_fan_in(), model.out_fan_in());
  return model;
}

[[nodiscard]] inline std::vector<double> logits_of(const ToyModel& model,
                                                   std::span<const double> x) {
  detail::check_dim(model, x.size());
  detail::Forward f;
  detail::forward(model, x, f);
  return f.logits;
}

[[nodiscard]] inline double loss_of(const ToyModel& model, std::span<const double> x,
                                    std::uint32_t label) {
  detail::check_dim(model, x.size());
  if (label >= model.n_classes) throw_usage("label out of range");
  detail::Forward f;
  detail::forward(model, x, f);
  return detail::cross_entropy(f.logits, label);
}

/// Argmax of the logits; ties go to the lowest class index.
[[nodiscard]] inline std::uint32_t predict(const ToyModel& model, std::span<const double> x) {
  const auto z = logits_of(model, x);
  return static_cast<std::uint32_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

/// Mean cross-entropy gradient over `batch` (row indices into `data`) plus
/// weight_decay·θ on weight entries.
[[nodiscard]] inline std::vector<double> gradient(const ToyModel& model, const LabeledDataset& data,
                                                  std::span<const std::size_t> batch,
                                                  double weight_decay = 0.0) {
  if (batch.empty()) throw_usage("gradient of an empty batch");
  detail::check_dim(model, data.dim);
  std::vector<double> grad(model.param_count(), 0.0);
  detail::Forward f;
  std::vector<double> delta;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i : batch) {
    detail::accumulate_gradient(model, data.row(i), data.labels[i], w, grad, f, delta);
  }
  if (weight_decay != 0.0) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (model.is_weight(i)) grad[i] += weight_decay * model.params[i];
    }
  }
  return grad;
}

/// Largest relative disagreement between the analytic single-sample gradient
/// and central differences with step h.
[[nodiscard]] inline double grad_check(const ToyModel& model, std::span<const double> x,
                                       std::uint32_t label, double h) {
  if (!(h > 0.0)) throw_usage("finite-difference step must be positive");
  detail::check_dim(model, x.size());
  std::vector<double> analytic(model.param_count(), 0.0);
  detail::Forward f;
  std::vector<double> delta;
  detail::accumulate_gradient(model, x, label, 1.0, analytic, f, delta);

  ToyModel probe = model;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.param_count(); ++i) {
    const double saved = probe.params[i];
    probe.params[i] = saved + h;
    const double up = loss_of(probe, x, label);
    probe.params[i] = saved - h;
    const double down = loss_of(probe, x, label);
    probe.params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / scale);
  }
  return worst;
}

[[nodiscard]] inline std::vector<double> per_sample_losses(const ToyModel& model,
                                                           const LabeledDataset& data) {
  detail::check_dim(model, data.dim);
  std::vector<double> out(data.size());
  detail::Forward f;
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::forward(model, data.row(i), f);
    out[i] = detail::cross_entropy(f.logits, data.labels[i]);
  }
  return out;
}

[[nodiscard]] inline std::vector<std::uint32_t> predict_all(const ToyModel& model,
                                                            const LabeledDataset& data) {
  detail::check_dim(model, data.dim);
  std::vector<std::uint32_t> out(data.size());
  detail::Forward f;
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::forward(model, data.row(i), f);
    out[i] = static_cast<std::uint32_t>(
        std::max_element(f.logits.begin(), f.logits.end()) - f.logits.begin());
  }
  return out;
}

[[nodiscard]] inline double accuracy(const ToyModel& model, const LabeledDataset& data) {
  if (data.size() == 0) return 0.0;
  const auto predicted = predict_all(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += predicted[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {

/// One epoch of minibatch SGD over a permutation keyed by (seed, epoch).
inline void sgd_epoch(ToyModel& model, const LabeledDataset& data, const TrainConfig& config,
                      std::size_t epoch, std::vector<std::size_t>& order,
                      std::vector<double>& grad, Forward& f, std::vector<double>& delta) {
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(derive_seed(config.seed, {kShuffleStream, epoch}));
  shuffle(std::span<std::size_t>(order), rng);
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t end = std::min(order.size(), start + config.batch_size);
    std::fill(grad.begin(), grad.end(), 0.0);
    const double w = 1.0 / static_cast<double>(end - start);
    for (std::size_t b = start; b < end; ++b) {
      accumulate_gradient(model, data.row(order[b]), data.labels[order[b]], w, grad, f, delta);
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      double g = grad[i];
      if (config.weight_decay != 0.0 && model.is_weight(i)) g += config.weight_decay * model.params[i];
      model.params[i] -= config.learning_rate * g;
    }
  }
}

inline TrajectoryDataset empty_trajectory(const LabeledDataset& data, std::string tag,
                                          const TrainConfig& config) {
  TrajectoryDataset t;
  t.split_tag = std::move(tag);
  t.dtype = config.loss_dtype;
  t.n_classes = data.n_classes;
  t.n_snapshots = static_cast<std::uint32_t>(config.epochs + 1);
  t.sample_ids = data.sample_ids;
  t.labels = data.labels;
  t.losses.assign(data.size() * t.n_snapshots, 0.0);
  return t;
}

inline void record(TrajectoryDataset& t, const ToyModel& model, const LabeledDataset& data,
                   std::size_t snapshot) {
  const auto losses = per_sample_losses(model, data);
  for (std::size_t m = 0; m < losses.size(); ++m) {
    t.losses[m * t.n_snapshots + snapshot] = quantize(losses[m], t.dtype);
  }
}

}  // namespace detail

/// Plain training run without loss logging.
[[nodiscard]] inline ToyModel train_model(const LabeledDataset& train, const TrainConfig& config) {
  check_config(config);
  if (train.n_classes < 2) throw_usage("need at least 2 classes");
  ToyModel model = init_model(config, train.dim, train.n_classes);
  if (train.size() == 0) return model;
  std::vector<std::size_t> order(train.size());
  std::vector<double> grad(model.param_count());
  detail::Forward f;
  std::vector<double> delta;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    detail::sgd_epoch(model, train, config, epoch, order, grad, f, delta);
  }
  return model;
}

struct TrainResult {
  ToyModel model;
  TrajectoryDataset train_trajectory;
  TrajectoryDataset query_trajectory;
};

/// Trains on `train` and records every train and query loss before the first
/// update (snapshot 0) and after each epoch's last update. Query samples only
/// ever see forward passes.
[[nodiscard]] inline TrainResult train_with_logging(const LabeledDataset& train,
                                                    const LabeledDataset& query,
                                                    const TrainConfig& config) {
  check_config(config);
  if (train.dim != query.dim) throw_usage("train and query feature dimensions differ");
  if (train.n_classes != query.n_classes) throw_usage("train and query class counts differ");
  if (train.size() == 0) throw_usage("empty training set");
  check_dataset(train);
  check_dataset(query);

  TrainResult out;
  out.model = init_model(config, train.dim, train.n_classes);
  out.train_trajectory = detail::empty_trajectory(train, "train", config);
  out.query_trajectory = detail::empty_trajectory(query, "query", config);
  detail::record(out.train_trajectory, out.model, train, 0);
  detail::record(out.query_trajectory, out.model, query, 0);

  std::vector<std::size_t> order(train.size());
  std::vector<double> grad(out.model.param_count());
  detail::Forward f;
  std::vector<double> delta;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    detail::sgd_epoch(out.model, train, config, epoch, order, grad, f, delta);
    detail::record(out.train_trajectory, out.model, train, epoch);
    detail::record(out.query_trajectory, out.model, query, epoch);
  }
  for (double v : out.train_trajectory.losses) {
    if (!std::isfinite(v)) throw_data("training diverged: non-finite loss (lower the learning rate)");
  }
  for (double v : out.query_trajectory.losses) {
    if (!std::isfinite(v)) throw_data("training diverged: non-finite loss (lower the learning rate)");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::uint32_t classes = 3;
  std::size_t per_class = 100;
  std::size_t dims = 10;
  double cluster_spread = 0.5;
  double label_noise_fraction = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t id_offset = 0;
};

/// Class means: unit basis vectors for the first `dims` classes, then fixed
/// pseudo-random unit directions. They depend only on (classes, dims), so
/// train and query sets drawn with different seeds share one geometry.
[[nodiscard]] inline std::vector<double> class_means(std::uint32_t classes, std::size_t dims) {
  std::vector<double> means(static_cast<std::size_t>(classes) * dims, 0.0);
  for (std::uint32_t k = 0; k < classes; ++k) {
    double* mu = means.data() + static_cast<std::size_t>(k) * dims;
    if (k < dims) {
      mu[k] = 1.0;
      continue;
    }
    CounterRng rng(derive_seed(0x4d455e5, {classes, dims, k}));
    double norm = 0.0;
    for (std::size_t j = 0; j < dims; ++j) {
      mu[j] = rng.normal();
      norm += mu[j] * mu[j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dims; ++j) mu[j] /= norm;
  }
  return means;
}

/// Gaussian clusters, class-major order, ids id_offset + i. Exactly
/// ⌊fraction·N⌋ samples get their label replaced by a different class chosen
/// uniformly; those are marked in `noisy`.
[[nodiscard]] inline LabeledDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw_usage("synthetic data needs at least 2 classes");
  if (spec.per_class < 1) throw_usage("synthetic data needs at least 1 sample per class");
  if (spec.dims < 1) throw_usage("synthetic data needs at least 1 dimension");
  if (!(spec.cluster_spread >= 0.0) || !(spec.label_noise_fraction >= 0.0) ||
      spec.label_noise_fraction > 1.0) {
    throw_usage("spread must be >= 0 and noise fraction in [0, 1]");
  }
  const std::size_t n = spec.classes * spec.per_class;
  const auto means = class_means(spec.classes, spec.dims);
  LabeledDataset out;
  out.dim = spec.dims;
  out.n_classes = spec.classes;
  out.features.resize(n * spec.dims);
  out.labels.resize(n);
  out.sample_ids.resize(n);
  out.noisy.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::uint32_t>(i / spec.per_class);
    out.labels[i] = label;
    out.sample_ids[i] = spec.id_offset + i;
    CounterRng rng(derive_seed(spec.seed, {detail::kSampleStream, i}));
    for (std::size_t j = 0; j < spec.dims; ++j) {
      out.features[i * spec.dims + j] =
          means[label * spec.dims + j] + spec.cluster_spread * rng.normal();
    }
  }
  const auto flips = static_cast<std::size_t>(std::floor(spec.label_noise_fraction * static_cast<double>(n)));
  CounterRng rng(derive_seed(spec.seed, {detail::kNoiseStream}));
  for (std::size_t i : sample_without_replacement(n, flips, rng)) {
    const auto shift = 1 + static_cast<std::uint32_t>(rng.below(spec.classes - 1));
    out.labels[i] = (out.labels[i] + shift) % spec.classes;
    out.noisy[i] = 1;
  }
  return out;
}

/// CSV with header "id,label,f1,...,fd".
inline void write_labeled_csv(const LabeledDataset& data, std::ostream& out) {
  out << "id,label";
  for (std::size_t j = 1; j <= data.dim; ++j) out << ",f" << j;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.sample_ids[i] << ',' << data.labels[i];
    for (double v : data.row(i)) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

/// Inverse of write_labeled_csv. The class count is max label + 1 unless a
/// larger one is given.
[[nodiscard]] inline LabeledDataset read_labeled_csv(std::istream& in, std::uint32_t n_classes = 0) {
  const auto lines = detail::read_lines(in);
  if (lines.empty()) throw_data("dataset CSV: empty file");
  const auto header = detail::split_csv_line(lines.front());
  if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
    throw_data("dataset CSV: header must be id,label,f1,...");
  }
  LabeledDataset out;
  out.dim = header.size() - 2;
  std::uint32_t max_label = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto fields = detail::split_csv_line(lines[i]);
    if (fields.size() != header.size()) {
      throw_data("dataset CSV: wrong field count on line " + std::to_string(i + 1));
    }
    out.sample_ids.push_back(detail::parse_u64(fields[0], "id"));
    const auto label = static_cast<std::uint32_t>(detail::parse_u64(fields[1], "label"));
    out.labels.push_back(label);
    max_label = std::max(max_label, label);
    for (std::size_t j = 2; j < fields.size(); ++j) {
      out.features.push_back(detail::parse_double(fields[j], "feature"));
    }
  }
  out.n_classes = std::max(n_classes, out.size() == 0 ? 0u : max_label + 1);
  check_dataset(out);
  return out;
}

}  // namespace muse
