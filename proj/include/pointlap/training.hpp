#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pointlap/data_io.hpp"
#include "pointlap/errors.hpp"
#include "pointlap/networks.hpp"
#include "pointlap/param_store.hpp"
#include "pointlap/rng.hpp"
#include "pointlap/task.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean negative log-softmax of the true class, computed through a shifted
// log-sum-exp so confident scores stay finite.
inline Tensor cross_entropy(const Tensor& scores, const std::vector<int>& labels) {
  if (scores.rank() != 2) throw RankError("cross_entropy expects scores of shape n x C");
  const std::size_t n = scores.rows(), c = scores.cols();
  if (labels.size() != n) {
    throw LabelError("label count " + std::to_string(labels.size()) +
                     " does not match score rows " + std::to_string(n));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw LabelError("label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const auto sv = scores.values();
  std::vector<double> softmax_values(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = sv[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, sv[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      softmax_values[i * c + j] = std::exp(sv[i * c + j] - m);
      z += softmax_values[i * c + j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < c; ++j) softmax_values[i * c + j] *= inv;
    loss += m + std::log(z) - sv[i * c + static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(n);
  return detail::make_node(
      {1}, {loss}, {scores},
      [n, c, labels, softmax_values = std::move(softmax_values)](detail::TensorImpl& self) {
        auto& ds = detail::parent_adjoint(self, 0);
        const double g = self.adjoint[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            double grad = softmax_values[i * c + j];
            if (j == static_cast<std::size_t>(labels[i])) grad -= 1.0;
            ds[i * c + j] += g * grad;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentSpec {
  bool rotation = true;       // about the gravity (z) axis
  bool translation = true;
  bool aniso_scale = true;
  bool color_jitter = false;  // per-point, for colored inputs
  bool color_shift = false;   // per-cloud color translation
  double translation_bound = 0.1;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double color_jitter_sigma = 0.02;
  double color_shift_bound = 0.05;

  bool any() const {
    return rotation || translation || aniso_scale || color_jitter || color_shift;
  }

  AugmentSpec without_rotation() const {
    AugmentSpec s = *this;
    s.rotation = false;
    return s;
  }
};

// Composition of the enabled random transforms. Labels are untouched; colors
// are only touched when the cloud carries color channels.
inline PointCloud augment(const PointCloud& cloud, const AugmentSpec& spec, Rng& rng) {
  const std::size_t n = cloud.size();
  std::vector<double> pos(cloud.positions.values().begin(), cloud.positions.values().end());
  if (spec.rotation) {
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pos[3 * i], y = pos[3 * i + 1];
      pos[3 * i] = ca * x - sa * y;
      pos[3 * i + 1] = sa * x + ca * y;
    }
  }
  if (spec.aniso_scale) {
    const double sx = rng.uniform(spec.scale_min, spec.scale_max);
    const double sy = rng.uniform(spec.scale_min, spec.scale_max);
    const double sz = rng.uniform(spec.scale_min, spec.scale_max);
    for (std::size_t i = 0; i < n; ++i) {
      pos[3 * i] *= sx;
      pos[3 * i + 1] *= sy;
      pos[3 * i + 2] *= sz;
    }
  }
  if (spec.translation) {
    const double tx = rng.uniform(-spec.translation_bound, spec.translation_bound);
    const double ty = rng.uniform(-spec.translation_bound, spec.translation_bound);
    const double tz = rng.uniform(-spec.translation_bound, spec.translation_bound);
    for (std::size_t i = 0; i < n; ++i) {
      pos[3 * i] += tx;
      pos[3 * i + 1] += ty;
      pos[3 * i + 2] += tz;
    }
  }
  PointCloud out = cloud;
  out.positions = Tensor::from_data({n, 3}, std::move(pos));
  if (cloud.color_channels == 3 && cloud.features.defined() &&
      (spec.color_jitter || spec.color_shift)) {
    std::vector<double> feat(cloud.features.values().begin(), cloud.features.values().end());
    const std::size_t width = cloud.features.cols();
    double shift[3] = {0, 0, 0};
    if (spec.color_shift) {
      for (int c = 0; c < 3; ++c) shift[c] = rng.uniform(-spec.color_shift_bound,
                                                         spec.color_shift_bound);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        double v = feat[i * width + c] + shift[c];
        if (spec.color_jitter) v += rng.normal(0.0, spec.color_jitter_sigma);
        feat[i * width + c] = std::min(1.0, std::max(0.0, v));
      }
    }
    out.features = Tensor::from_data({n, width}, std::move(feat));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  std::vector<std::size_t> decay_epochs{90, 120};
  double decay_factor = 10.0;
  std::size_t epochs = 150;
  std::size_t batch_size = 24;
  std::uint64_t seed = 1;
  std::size_t voting_rounds = 10;
  AugmentSpec augment;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(decay_factor > 1.0)) throw ConfigError("decay factor must exceed 1 (applied as division)");
    for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] <= decay_epochs[i - 1]) {
        throw ConfigError("decay epochs must be strictly increasing");
      }
    }
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (epochs < 1) throw ConfigError("epoch count must be >= 1");
    if (voting_rounds < 1) throw ConfigError("voting rounds must be >= 1");
  }
};

// Learning rate after step-schedule decay; each crossed boundary divides the
// base rate by the decay factor.
inline double lr_for_epoch(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (std::size_t boundary : cfg.decay_epochs) {
    if (epoch >= boundary) lr /= cfg.decay_factor;
  }
  return lr;
}

// Classical momentum: v <- mu v + g ; p <- p - lr v.
class SgdOptimizer {
 public:
  SgdOptimizer(ParamStore& store, double momentum) : store_(store), momentum_(momentum) {}

  void step(double lr) {
    for (const auto& [name, entry] : store_.entries()) {
      if (!entry.learnable) continue;
      Tensor t = entry.tensor;
      if (!t.has_grad()) {
        throw OptimizerError("missing gradient for parameter " + name);
      }
      auto& v = velocity_[name];
      if (v.empty()) v.assign(t.numel(), 0.0);
      const auto g = t.grad();
      auto p = t.mutable_values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] -= lr * v[i];
      }
    }
  }

 private:
  ParamStore& store_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricReport {
  double oa = 0.0;
  double ma = 0.0;
  double miou = 0.0;
  double imiou = 0.0;
  double cmiou = 0.0;
  std::vector<double> per_class_iou;
};

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : c_(num_classes), counts_(num_classes * num_classes, 0) {}

  void add(int truth, int predicted) {
    counts_[static_cast<std::size_t>(truth) * c_ + static_cast<std::size_t>(predicted)]++;
    total_++;
  }

  std::size_t total() const { return total_; }

  double overall_accuracy() const {
    if (total_ == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t k = 0; k < c_; ++k) correct += counts_[k * c_ + k];
    return static_cast<double>(correct) / static_cast<double>(total_);
  }

  // Mean of per-class accuracies over the classes present in the labels.
  double mean_accuracy() const {
    double acc = 0.0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < c_; ++k) {
      std::size_t support = 0;
      for (std::size_t j = 0; j < c_; ++j) support += counts_[k * c_ + j];
      if (support == 0) continue;
      acc += static_cast<double>(counts_[k * c_ + k]) / static_cast<double>(support);
      present++;
    }
    return present ? acc / static_cast<double>(present) : 0.0;
  }

  // TP / (TP + FP + FN) per class; a class absent from both labels and
  // predictions counts as 1 (nothing to get wrong), mirroring the absent-part
  // convention of the instance metric.
  std::vector<double> per_class_iou() const {
    std::vector<double> iou(c_, 1.0);
    for (std::size_t k = 0; k < c_; ++k) {
      const std::size_t tp = counts_[k * c_ + k];
      std::size_t fp = 0, fn = 0;
      for (std::size_t j = 0; j < c_; ++j) {
        if (j != k) {
          fn += counts_[k * c_ + j];
          fp += counts_[j * c_ + k];
        }
      }
      if (tp + fp + fn > 0) {
        iou[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      }
    }
    return iou;
  }

  double mean_iou() const {
    auto iou = per_class_iou();
    return std::accumulate(iou.begin(), iou.end(), 0.0) / static_cast<double>(iou.size());
  }

 private:
  std::size_t c_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

// Instance- and category-averaged part IoU. Each instance is scored over its
// category's part set; a part absent from both the prediction and the ground
// truth contributes IoU 1.
class PartIouAccumulator {
 public:
  explicit PartIouAccumulator(std::vector<std::vector<int>> category_parts)
      : category_parts_(std::move(category_parts)), per_category_(category_parts_.size()) {}

  void add_instance(std::size_t category, const std::vector<int>& labels,
                    const std::vector<int>& predictions) {
    if (category >= category_parts_.size()) {
      throw EvaluationError("category index out of range");
    }
    const auto& parts = category_parts_[category];
    double acc = 0.0;
    for (int part : parts) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool in_truth = labels[i] == part;
        const bool in_pred = predictions[i] == part;
        tp += in_truth && in_pred;
        fn += in_truth && !in_pred;
        fp += !in_truth && in_pred;
      }
      acc += (tp + fp + fn == 0) ? 1.0
                                 : static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    }
    per_category_[category].push_back(acc / static_cast<double>(parts.size()));
  }

  // Mean over all instances of the instance's mean part IoU.
  double instance_mean_iou() const {
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& v : per_category_) {
      acc = std::accumulate(v.begin(), v.end(), acc);
      count += v.size();
    }
    return count ? acc / static_cast<double>(count) : 0.0;
  }

  // Mean over categories of each category's instance-averaged IoU.
  double category_mean_iou() const {
    double acc = 0.0;
    std::size_t present = 0;
    for (const auto& v : per_category_) {
      if (v.empty()) continue;
      acc += std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      present++;
    }
    return present ? acc / static_cast<double>(present) : 0.0;
  }

 private:
  std::vector<std::vector<int>> category_parts_;
  std::vector<std::vector<double>> per_category_;
};

// ---------------------------------------------------------------------------
// Datasets and evaluation
// ---------------------------------------------------------------------------

// Model-facing view of a labeled collection of clouds.
struct Dataset {
  Task task = Task::kClassification;
  std::size_t num_classes = 0;
  std::size_t num_categories = 0;
  std::vector<PointCloud> clouds;
  std::vector<std::size_t> categories;           // per cloud, segmentation
  std::vector<std::vector<int>> category_parts;  // part ids per category

  std::size_t size() const { return clouds.size(); }
};

inline Dataset dataset_from_split(const SyntheticDataset& synth, const SyntheticSplit& split) {
  Dataset d;
  d.task = synth.spec.task;
  d.num_classes = synth.num_classes;
  d.num_categories = synth.num_categories;
  d.clouds = split.clouds;
  if (d.task == Task::kSegmentation) {
    d.categories.assign(split.clouds.size(), 0);
    d.category_parts = {{0, 1}};
  }
  return d;
}

// Averages raw scores over voting rounds: round 0 is the plain cloud, later
// rounds are augmented copies. One round is exactly a plain forward pass.
inline MetricReport evaluate(Network& net, const Dataset& data, std::size_t voting_rounds,
                             const AugmentSpec& vote_augment, std::uint64_t seed,
                             std::size_t batch_size,
                             std::vector<std::vector<int>>* out_predictions = nullptr) {
  if (data.clouds.empty()) throw EvaluationError("cannot evaluate an empty dataset");
  if (voting_rounds < 1) throw EvaluationError("voting needs at least one round");
  NoGradGuard no_grad;

  ConfusionMatrix confusion(data.num_classes);
  PartIouAccumulator parts(data.category_parts.empty()
                               ? std::vector<std::vector<int>>{}
                               : data.category_parts);
  const bool seg = data.task == Task::kSegmentation;

  for (std::size_t begin = 0; begin < data.clouds.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, data.clouds.size());
    std::vector<std::vector<double>> summed;  // per output row, per class
    std::vector<int> truth;
    std::vector<std::size_t> row_offsets;

    for (std::size_t round = 0; round < voting_rounds; ++round) {
      std::vector<PointCloud> clouds;
      clouds.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        if (round == 0) {
          clouds.push_back(data.clouds[i]);
        } else {
          Rng rng(Rng::mix(Rng::mix(seed, round), i));
          clouds.push_back(augment(data.clouds[i], vote_augment, rng));
        }
      }
      CloudBatch batch = make_batch(clouds, data.num_categories);
      Tensor scores = net.forward(batch, /*training=*/false);
      if (round == 0) {
        summed.assign(scores.rows(), std::vector<double>(data.num_classes, 0.0));
        truth = seg ? batch.point_labels : batch.cloud_labels;
        row_offsets = batch.offsets;
      }
      for (std::size_t r = 0; r < scores.rows(); ++r) {
        for (std::size_t cc = 0; cc < data.num_classes; ++cc) {
          summed[r][cc] += scores.at(r, cc);
        }
      }
    }

    std::vector<int> predictions(summed.size());
    for (std::size_t r = 0; r < summed.size(); ++r) {
      predictions[r] = static_cast<int>(
          std::max_element(summed[r].begin(), summed[r].end()) - summed[r].begin());
      if (truth.empty()) continue;
      confusion.add(truth[r], predictions[r]);
    }
    if (seg) {
      for (std::size_t b = 0; b + begin < end; ++b) {
        const std::size_t lo = row_offsets[b], hi = row_offsets[b + 1];
        std::vector<int> cloud_truth(truth.begin() + static_cast<std::ptrdiff_t>(lo),
                                     truth.begin() + static_cast<std::ptrdiff_t>(hi));
        std::vector<int> cloud_pred(predictions.begin() + static_cast<std::ptrdiff_t>(lo),
                                    predictions.begin() + static_cast<std::ptrdiff_t>(hi));
        if (!data.category_parts.empty()) {
          parts.add_instance(data.categories.empty() ? 0 : data.categories[begin + b],
                             cloud_truth, cloud_pred);
        }
        if (out_predictions) out_predictions->push_back(std::move(cloud_pred));
      }
    } else if (out_predictions) {
      for (std::size_t b = 0; b + begin < end; ++b) {
        out_predictions->push_back({predictions[b]});
      }
    }
  }

  MetricReport report;
  report.oa = confusion.overall_accuracy();
  report.ma = confusion.mean_accuracy();
  report.per_class_iou = confusion.per_class_iou();
  report.miou = confusion.mean_iou();
  if (seg && !data.category_parts.empty()) {
    report.imiou = parts.instance_mean_iou();
    report.cmiou = parts.category_mean_iou();
  } else {
    report.imiou = report.miou;
    report.cmiou = report.miou;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  MetricReport eval;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  MetricReport final_eval;
  std::size_t best_epoch = 0;
  double best_metric = -1.0;
  std::map<std::string, Tensor> best_params;  // detached snapshot
};

inline double primary_metric(const MetricReport& report, Task task) {
  return task == Task::kClassification ? report.oa : report.miou;
}

inline std::map<std::string, Tensor> snapshot_params(const ParamStore& store) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, e] : store.entries()) out.emplace(name, e.tensor.detached_copy());
  return out;
}

// Sequential epoch loop: shuffled mini-batches, per-sample augmentation
// streams derived from (seed, epoch, sample index), step-scheduled momentum
// updates, plain evaluation each epoch and a voting evaluation at the end.
// Two runs with the same seed produce identical records.
class Trainer {
 public:
  Trainer(Network& net, ParamStore& store, Dataset train, Dataset test, TrainConfig cfg)
      : net_(net), store_(store), train_(std::move(train)), test_(std::move(test)),
        cfg_(std::move(cfg)) {
    cfg_.validate();
    if (train_.clouds.empty()) throw EvaluationError("training dataset is empty");
  }

  TrainResult run(const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    TrainResult result;
    SgdOptimizer optimizer(store_, cfg_.momentum);
    std::vector<std::size_t> order(train_.clouds.size());
    std::iota(order.begin(), order.end(), 0u);

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lr = lr_for_epoch(cfg_, epoch);
      Rng shuffle_rng(Rng::mix(cfg_.seed, 0x0ddba11ULL + epoch));
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[shuffle_rng.index(i)]);
      }

      double loss_sum = 0.0;
      std::size_t loss_count = 0;
      for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size) {
        const std::size_t end = std::min(begin + cfg_.batch_size, order.size());
        std::vector<PointCloud> clouds;
        clouds.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
          Rng aug_rng(Rng::mix(Rng::mix(cfg_.seed, epoch), order[i]));
          clouds.push_back(augment(train_.clouds[order[i]], cfg_.augment, aug_rng));
        }
        CloudBatch batch = make_batch(clouds, train_.num_categories);
        Tensor scores = net_.forward(batch, /*training=*/true);
        Tensor loss = cross_entropy(scores, train_.task == Task::kSegmentation
                                                ? batch.point_labels
                                                : batch.cloud_labels);
        backward(loss);
        optimizer.step(lr);
        store_.zero_grad();
        loss_sum += loss.item() * static_cast<double>(end - begin);
        loss_count += end - begin;
      }

      EpochRecord record;
      record.epoch = epoch;
      record.lr = lr;
      record.train_loss = loss_sum / static_cast<double>(loss_count);
      record.eval = evaluate(net_, test_, 1, cfg_.augment.without_rotation(), cfg_.seed,
                             cfg_.batch_size);
      const double metric = primary_metric(record.eval, train_.task);
      if (metric > result.best_metric) {
        result.best_metric = metric;
        result.best_epoch = epoch;
        result.best_params = snapshot_params(store_);
      }
      result.log.push_back(record);
      if (on_epoch) on_epoch(record);
    }

    result.final_eval = evaluate(net_, test_, cfg_.voting_rounds,
                                 cfg_.augment.without_rotation(), cfg_.seed, cfg_.batch_size);
    return result;
  }

 private:
  Network& net_;
  ParamStore& store_;
  Dataset train_;
  Dataset test_;
  TrainConfig cfg_;
};

}  // namespace pointlap
