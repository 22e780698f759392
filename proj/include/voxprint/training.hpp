#pragma once

// SGD with momentum and coupled weight decay, reduce-on-plateau learning
// rate, early stopping with a minimum-epoch floor, and the training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "voxprint/errors.hpp"
#include "voxprint/features.hpp"
#include "voxprint/losses.hpp"
#include "voxprint/metrics.hpp"
#include "voxprint/network.hpp"
#include "voxprint/text.hpp"

namespace voxprint {

struct TrainConfig {
  double lr0 = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double plateau_factor = 0.1;
  int plateau_patience = 5;
  double plateau_threshold = 1e-4;
  int early_stop_patience = 15;
  int min_epochs = 30;
  int max_epochs = 120;
  int batch_size = 32;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("TrainConfig requires lr0 > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("TrainConfig requires 0 <= momentum < 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("TrainConfig requires weight_decay >= 0");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("TrainConfig requires 0 < plateau_factor < 1");
    if (plateau_patience < 0 || early_stop_patience < 0) throw ConfigError("TrainConfig patience must be >= 0");
    if (!(plateau_threshold >= 0.0)) throw ConfigError("TrainConfig requires plateau_threshold >= 0");
    if (min_epochs < 1 || min_epochs > max_epochs) throw ConfigError("TrainConfig requires 1 <= min_epochs <= max_epochs");
    if (batch_size < 1) throw ConfigError("TrainConfig requires batch_size >= 1");
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_top1 = 0.0;
  double lr = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
template <typename T>
void sgd_step(std::span<Parameter<T>> params, SgdState<T>& state, double lr, const TrainConfig& cfg) {
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) state.velocity[i].assign(params[i].value.size(), T{});
  }
  if (state.velocity.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  for (const auto& p : params) {
    if (p.grad.shape() != p.value.shape()) throw ShapeError("gradient shape mismatch for '" + p.name + "'");
    if (!p.grad.all_finite()) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
  }
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].value.data();
    auto grad = params[i].grad.data();
    auto& v = state.velocity[i];
    if (v.size() != value.size()) throw ShapeError("optimizer state does not match '" + params[i].name + "'");
    for (std::size_t k = 0; k < value.size(); ++k) {
      v[k] = mu * v[k] + (grad[k] + wd * value[k]);
      value[k] -= step * v[k];
    }
  }
}

/// Reduce-on-plateau: an epoch improves when val_loss < best - threshold.
/// Once more than `patience` consecutive epochs fail to improve, the rate is
/// multiplied by `factor` and the counter restarts.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(const TrainConfig& cfg)
      : lr_(cfg.lr0), factor_(cfg.plateau_factor), threshold_(cfg.plateau_threshold), patience_(cfg.plateau_patience) {}

  [[nodiscard]] double lr() const { return lr_; }

  double step(double val_loss) {
    if (val_loss < best_ - threshold_) {
      best_ = val_loss;
      bad_ = 0;
    } else if (++bad_ > patience_) {
      lr_ *= factor_;
      bad_ = 0;
    }
    return lr_;
  }

 private:
  double lr_;
  double factor_;
  double threshold_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

/// Learning rate in effect after each epoch of `history`.
inline std::vector<double> plateau_scheduler(std::span<const double> history, const TrainConfig& cfg) {
  PlateauScheduler s(cfg);
  std::vector<double> out;
  out.reserve(history.size());
  for (double v : history) out.push_back(s.step(v));
  return out;
}

/// Stops at (1-based) epoch e when e >= min_epochs and the best validation
/// loss has not improved (same strict threshold rule) for `patience` epochs.
class EarlyStopper {
 public:
  explicit EarlyStopper(const TrainConfig& cfg)
      : threshold_(cfg.plateau_threshold), patience_(cfg.early_stop_patience), min_epochs_(cfg.min_epochs) {}

  bool step(double val_loss) {
    ++epoch_;
    if (val_loss < best_ - threshold_) {
      best_ = val_loss;
      bad_ = 0;
    } else {
      ++bad_;
    }
    return epoch_ >= min_epochs_ && bad_ >= patience_;
  }

 private:
  double threshold_;
  int patience_;
  int min_epochs_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
  int epoch_ = 0;
};

/// Per-epoch stop decisions for a validation-loss history.
inline std::vector<bool> early_stop(std::span<const double> history, const TrainConfig& cfg) {
  EarlyStopper s(cfg);
  std::vector<bool> out;
  out.reserve(history.size());
  for (double v : history) out.push_back(s.step(v));
  return out;
}

/// First epoch (1-based) at which early stopping fires, if any.
inline std::optional<int> first_stop_epoch(std::span<const double> history, const TrainConfig& cfg) {
  const auto d = early_stop(history, cfg);
  const auto it = std::find(d.begin(), d.end(), true);
  if (it == d.end()) return std::nullopt;
  return static_cast<int>(it - d.begin()) + 1;
}

// ---------------------------------------------------------------------------
// Training loop

/// Feature images with class labels; all images share one geometry.
struct LabeledSet {
  std::vector<FeatureTensor> features;
  std::vector<int> labels;

  [[nodiscard]] std::size_t size() const { return features.size(); }
};

/// Stacks the selected images into an [N, 3, H, W] batch (channels replicated).
template <typename T>
Tensor<T> make_batch(const std::vector<FeatureTensor>& features, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ArgumentError("empty batch");
  const Geometry g = features.at(indices[0]).geometry();
  const std::size_t hw = static_cast<std::size_t>(g.height) * g.width;
  Tensor<T> x({indices.size(), FeatureTensor::kChannels, static_cast<std::size_t>(g.height), static_cast<std::size_t>(g.width)});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& f = features.at(indices[i]);
    if (f.geometry() != g) throw ShapeError("batch mixes feature geometries");
    for (int c = 0; c < FeatureTensor::kChannels; ++c) {
      std::copy(f.plane().begin(), f.plane().end(), x.ptr() + (i * FeatureTensor::kChannels + static_cast<std::size_t>(c)) * hw);
    }
  }
  return x;
}

/// Eval-mode embeddings [N, D] for all images, computed in batches.
template <typename T>
Tensor<T> embed_features(const Network<T>& net, const std::vector<FeatureTensor>& features, std::size_t batch_size = 32) {
  if (features.empty()) throw ArgumentError("no features to embed");
  const auto D = static_cast<std::size_t>(net.config().embedding_dim);
  Tensor<T> out({features.size(), D});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < features.size(); start += batch_size) {
    idx.resize(std::min(batch_size, features.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto e = net.forward_embed(make_batch<T>(features, idx));
    std::copy(e.data().begin(), e.data().end(), out.ptr() + start * D);
  }
  return out;
}

struct SplitEvaluation {
  double loss = 0.0;
  double top1 = 0.0;
};

/// Loss (margins included) and margin-free top-1 on a labeled set.
template <typename T>
SplitEvaluation evaluate_split(const Network<T>& net, const LossConfig& loss_cfg, const LabeledSet& set,
                               std::size_t batch_size = 32) {
  const auto emb = embed_features(net, set.features, batch_size);
  const auto r = loss_forward_backward(loss_cfg, emb, net.head_weight(), net.head_bias(), set.labels);
  return {r.loss, top1_accuracy(r.scores, set.labels)};
}

/// Fills `order` with a fresh shuffled permutation of 0..n-1.
inline void epoch_order(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
}

struct TrainResult {
  Network<float> best;  // parameters of the lowest-validation-loss epoch
  std::vector<EpochRecord> records;
  int best_epoch = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline void check_labels_cover(const LabeledSet& set, int num_classes, const char* what) {
  if (set.size() == 0) throw ConfigError(std::string(what) + " split is empty");
  if (set.labels.size() != set.size()) throw ConfigError(std::string(what) + " split has mismatched labels");
  for (int y : set.labels) {
    if (y < 0 || y >= num_classes) throw ConfigError(std::string(what) + " split has a label outside [0, num_classes)");
  }
}

/// Seeded mini-batch training with validation after every epoch.
inline TrainResult train(const LabeledSet& train_set, const LabeledSet& val_set, NetworkConfig net_cfg,
                         const LossConfig& loss_cfg, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  loss_cfg.validate();
  net_cfg.num_classes = loss_cfg.num_classes;
  net_cfg.head = head_for(loss_cfg.family);
  check_labels_cover(train_set, loss_cfg.num_classes, "train");
  check_labels_cover(val_set, loss_cfg.num_classes, "validation");
  {
    std::vector<bool> seen(static_cast<std::size_t>(loss_cfg.num_classes));
    for (int y : train_set.labels) seen[static_cast<std::size_t>(y)] = true;
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw ConfigError("every class must appear in the train split");
    }
  }

  Network<float> net = Network<float>::create(net_cfg, cfg.seed);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66DULL);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  SgdState<float> opt;
  PlateauScheduler scheduler(cfg);
  EarlyStopper stopper(cfg);

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  std::vector<int> labels;
  ForwardCache<float> cache;
  const auto B = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = scheduler.lr();
    epoch_order(order, shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(B, order.size() - start));
      labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = train_set.labels[idx[i]];

      const auto x = make_batch<float>(train_set.features, idx);
      const auto emb = net.forward_embed(x, &dropout_rng, &cache);
      const auto lr_out = loss_forward_backward(loss_cfg, emb, net.head_weight(), net.head_bias(), labels);
      if (!std::isfinite(lr_out.loss)) {
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      net.zero_grad();
      net.backward(cache, lr_out.grad_embeddings);
      net.accumulate_head(lr_out.grad_weights, &lr_out.grad_bias);
      sgd_step<float>(net.parameters(), opt, lr, cfg);
      if (net_cfg.head == HeadKind::cosine) renormalize_rows(net.param("head.weight").value);
      loss_sum += lr_out.loss * static_cast<double>(idx.size());
    }

    const auto val = evaluate_split(net, loss_cfg, val_set, B);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), val.loss, val.top1, lr};
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
    }
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.best = net;
      result.best_epoch = epoch;
    }
    scheduler.step(rec.val_loss);
    if (stopper.step(rec.val_loss)) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Training log: header line then one tab-separated row per epoch.

inline constexpr std::string_view kTrainingLogHeader = "epoch\ttrain_loss\tval_loss\tval_top1\tlr";

inline std::string format_training_log(std::span<const EpochRecord> records) {
  std::string out(kTrainingLogHeader);
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + '\t' + format_real(r.train_loss) + '\t' + format_real(r.val_loss) + '\t' +
           format_real(r.val_top1) + '\t' + format_real(r.lr) + '\n';
  }
  return out;
}

inline std::vector<EpochRecord> parse_training_log(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty() || rows.front() != kTrainingLogHeader) throw FormatError("training log lacks its header");
  std::vector<EpochRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i], '\t');
    if (f.size() != 5) throw FormatError("training log row needs 5 fields");
    out.push_back({static_cast<int>(parse_int(f[0])), parse_real(f[1]), parse_real(f[2]), parse_real(f[3]), parse_real(f[4])});
  }
  return out;
}

}  // namespace voxprint
