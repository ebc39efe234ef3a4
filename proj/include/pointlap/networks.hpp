#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/geometry.hpp"
#include "pointlap/layers.hpp"
#include "pointlap/param_store.hpp"
#include "pointlap/task.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// ---------------------------------------------------------------------------
// Packed batches
// ---------------------------------------------------------------------------

// Several clouds packed into one point axis. Batch normalization then
// naturally spans all points of all clouds in the mini-batch, and per-cloud
// boundaries are tracked through the offsets (offsets[b]..offsets[b+1] is
// cloud b's row range). Neighborhoods never cross cloud boundaries.
struct CloudBatch {
  Tensor positions;                  // N x 3
  Tensor features;                   // N x d
  std::vector<std::size_t> offsets;  // B + 1
  std::vector<int> point_labels;     // N or empty
  std::vector<int> cloud_labels;     // B or empty
  Tensor onehot;                     // B x num_categories, when conditioning

  std::size_t count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t total_points() const { return offsets.empty() ? 0 : offsets.back(); }

  std::vector<std::size_t> cloud_ids() const {
    std::vector<std::size_t> ids(total_points());
    for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
      for (std::size_t i = offsets[b]; i < offsets[b + 1]; ++i) ids[i] = b;
    }
    return ids;
  }
};

// Packs clouds into one batch. Clouds without explicit features use their
// positions as input features. Classification labels are the (uniform)
// per-point label of each cloud.
inline CloudBatch make_batch(std::span<const PointCloud> clouds, std::size_t num_categories = 0) {
  if (clouds.empty()) throw InsufficientPointsError("batch requires at least one cloud");
  CloudBatch batch;
  batch.offsets.push_back(0);
  std::size_t total = 0;
  std::size_t width = 0;
  bool all_labeled = true;
  for (const auto& c : clouds) {
    c.validate();
    const std::size_t d = c.features.defined() ? c.features.cols() : 3;
    if (width == 0) width = d;
    if (d != width) throw ShapeError("clouds in one batch must share a feature width");
    total += c.size();
    batch.offsets.push_back(total);
    all_labeled = all_labeled && !c.labels.empty();
  }
  std::vector<double> pos(total * 3), feat(total * width);
  std::size_t row = 0;
  for (const auto& c : clouds) {
    const auto pv = c.positions.values();
    std::copy(pv.begin(), pv.end(), pos.begin() + static_cast<std::ptrdiff_t>(row * 3));
    const auto fv = c.features.defined() ? c.features.values() : c.positions.values();
    std::copy(fv.begin(), fv.end(), feat.begin() + static_cast<std::ptrdiff_t>(row * width));
    row += c.size();
  }
  batch.positions = Tensor::from_data({total, 3}, std::move(pos));
  batch.features = Tensor::from_data({total, width}, std::move(feat));
  if (all_labeled) {
    batch.point_labels.reserve(total);
    for (const auto& c : clouds) {
      batch.point_labels.insert(batch.point_labels.end(), c.labels.begin(), c.labels.end());
      batch.cloud_labels.push_back(c.labels.front());
    }
  }
  if (num_categories > 0) {
    std::vector<double> oh(clouds.size() * num_categories, 0.0);
    for (std::size_t b = 0; b < clouds.size(); ++b) {
      const auto& v = clouds[b].object_class;
      if (!v.empty()) {
        if (v.size() != num_categories) {
          throw ShapeError("object_class one-hot length does not match num_categories");
        }
        std::copy(v.begin(), v.end(), oh.begin() + static_cast<std::ptrdiff_t>(b * num_categories));
      }
    }
    batch.onehot = Tensor::from_data({clouds.size(), num_categories}, std::move(oh));
  }
  return batch;
}

namespace batch_detail {

inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t d = t.cols();
  std::vector<double> v((end - begin) * d);
  std::copy_n(t.values().data() + begin * d, v.size(), v.data());
  return Tensor::from_data({end - begin, d}, std::move(v));
}

inline std::size_t centroid_nearest_index(const Tensor& positions) {
  const std::size_t n = positions.rows();
  const double* p = positions.values().data();
  double c[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) c[a] += p[3 * i + a];
  for (int a = 0; a < 3; ++a) c[a] /= static_cast<double>(n);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double t = p[3 * i + a] - c[a];
      d += t * t;
    }
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace batch_detail

struct BatchSample {
  std::vector<std::size_t> indices;  // global rows into the parent batch
  std::vector<std::size_t> offsets;  // B + 1 over the sampled rows
};

// Farthest point sampling applied per cloud. Each cloud's walk starts at the
// point nearest its centroid so the selection is a function of the geometry,
// not of the point order.
inline BatchSample batch_fps(const Tensor& positions, const std::vector<std::size_t>& offsets,
                             std::size_t m) {
  BatchSample out;
  out.offsets.push_back(0);
  for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
    const std::size_t begin = offsets[b], end = offsets[b + 1];
    if (end - begin < m) {
      throw InsufficientPointsError("cloud has " + std::to_string(end - begin) +
                                    " points, stage needs " + std::to_string(m));
    }
    Tensor slice = batch_detail::slice_rows(positions, begin, end);
    const std::size_t start = batch_detail::centroid_nearest_index(slice);
    for (std::size_t idx : farthest_point_sample(slice, m, start)) {
      out.indices.push_back(begin + idx);
    }
    out.offsets.push_back(out.indices.size());
  }
  return out;
}

// Self k-nearest-neighbor graph per cloud, indices global to the packed rows.
inline NeighborIndex batch_self_knn(const Tensor& positions,
                                    const std::vector<std::size_t>& offsets, std::size_t k) {
  NeighborIndex out;
  out.n = positions.rows();
  out.k = k;
  out.indices.resize(out.n * k);
  for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
    const std::size_t begin = offsets[b], end = offsets[b + 1];
    Tensor slice = batch_detail::slice_rows(positions, begin, end);
    NeighborIndex local = knn(slice, slice, k);
    for (std::size_t i = 0; i < local.indices.size(); ++i) {
      out.indices[begin * k + i] = begin + local.indices[i];
    }
  }
  return out;
}

// Inverse-distance feature interpolation from coarse to fine resolution,
// cloud by cloud, as one differentiable gather/scale/scatter chain.
inline Tensor batch_interpolate(const Tensor& fine_pos, const std::vector<std::size_t>& fine_off,
                                const Tensor& coarse_pos,
                                const std::vector<std::size_t>& coarse_off,
                                const Tensor& coarse_features, std::size_t k = 3) {
  const std::size_t m = fine_pos.rows();
  std::vector<std::size_t> flat_idx;
  std::vector<std::size_t> flat_center;
  std::vector<double> flat_w;
  for (std::size_t b = 0; b + 1 < fine_off.size(); ++b) {
    Tensor fine_slice = batch_detail::slice_rows(fine_pos, fine_off[b], fine_off[b + 1]);
    Tensor coarse_slice = batch_detail::slice_rows(coarse_pos, coarse_off[b], coarse_off[b + 1]);
    const std::size_t kk = std::min<std::size_t>(k, coarse_slice.rows());
    if (kk == 0) throw InsufficientPointsError("interpolation source cloud is empty");
    NeighborIndex nbr = knn(fine_slice, coarse_slice, kk);
    auto weights = interpolation_weights(fine_slice, coarse_slice, kk);
    for (std::size_t i = 0; i < nbr.n; ++i) {
      for (std::size_t j = 0; j < kk; ++j) {
        flat_idx.push_back(coarse_off[b] + nbr.at(i, j));
        flat_center.push_back(fine_off[b] + i);
        flat_w.push_back(weights[i * kk + j]);
      }
    }
  }
  const std::size_t rows = flat_w.size();
  Tensor w = Tensor::from_data({rows}, std::move(flat_w));
  Tensor gathered = gather_rows(coarse_features, std::move(flat_idx));
  return scatter_sum(scale_rows(gathered, w), std::move(flat_center), m);
}

// ---------------------------------------------------------------------------
// Network configuration
// ---------------------------------------------------------------------------

constexpr std::size_t kStageCount = 5;

struct NetworkConfig {
  Task task = Task::kClassification;
  std::array<std::size_t, kStageCount> stage_widths{32, 64, 128, 256, 512};
  std::array<std::size_t, kStageCount> stage_points{512, 256, 128, 64, 32};
  std::size_t blocks_per_stage = 1;
  std::size_t lu_per_stage = 1;
  std::size_t k_conv = 16;
  std::size_t k_lu = 16;
  std::size_t input_width = 3;
  std::size_t num_classes = 0;
  std::size_t num_categories = 0;  // one-hot conditioning width, segmentation only
  bool lu_use_m = true;
  bool lu_use_t = true;
  Fusion lu_fusion = Fusion::kAdd;
  std::size_t bottleneck_ratio = 4;
  std::size_t kernel_points = 15;
  std::size_t aug_hidden_layers = 1;
  // Which stages carry their pair of units (encoder + matching decoder site);
  // supports growing the unit count stage by stage.
  std::array<bool, kStageCount> lu_stages{true, true, true, true, true};

  std::size_t stage_lu_count(std::size_t s) const { return lu_stages[s] ? lu_per_stage : 0; }

  void validate() const {
    for (std::size_t s = 0; s < kStageCount; ++s) {
      if (stage_widths[s] == 0) throw ConfigError("stage widths must be positive");
      if (stage_points[s] == 0) throw ConfigError("stage point counts must be positive");
      if (s > 0 && stage_points[s] >= stage_points[s - 1]) {
        throw ConfigError("stage point counts must strictly decrease");
      }
      if (stage_widths[s] % bottleneck_ratio != 0) {
        throw ConfigError("stage width " + std::to_string(stage_widths[s]) +
                          " is not divisible by the bottleneck ratio " +
                          std::to_string(bottleneck_ratio));
      }
    }
    if (blocks_per_stage < 1) throw ConfigError("at least one convolution block per stage");
    if (k_conv < 1 || k_lu < 1) throw ConfigError("neighbor counts must be >= 1");
    if (input_width < 1) throw ConfigError("input width must be >= 1");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (task == Task::kClassification && stage_widths[4] < 4) {
      throw ConfigError("classification head needs a final stage width of at least 4");
    }
  }

  LuConfig lu_config(std::size_t width) const {
    LuConfig lu;
    lu.k = k_lu;
    lu.use_m = lu_use_m;
    lu.use_t = lu_use_t;
    lu.fusion = lu_fusion;
    lu.d_in = lu.d_out = width;
    return lu;
  }
};

// Per-stage kernel influence radius from the data: the mean neighbor distance
// inside each stage's neighborhoods, measured over a sample batch after the
// same farthest-point-sampling chain the network applies.
inline std::vector<double> estimate_stage_radii(const NetworkConfig& cfg,
                                                const CloudBatch& sample) {
  std::vector<double> radii;
  Tensor positions = sample.positions;
  std::vector<std::size_t> offsets = sample.offsets;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    BatchSample ds = batch_fps(positions, offsets, cfg.stage_points[s]);
    {
      NoGradGuard ng;
      positions = gather_rows(positions, ds.indices);
    }
    offsets = ds.offsets;
    const std::size_t k = std::min(cfg.k_conv, cfg.stage_points[s]);
    NeighborIndex nbr = batch_self_knn(positions, offsets, k);
    const double* p = positions.values().data();
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < nbr.n; ++i) {
      for (std::size_t j = 0; j < nbr.k; ++j) {
        const std::size_t src = nbr.at(i, j);
        if (src == i) continue;
        double d = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double t = p[3 * src + c] - p[3 * i + c];
          d += t * t;
        }
        acc += std::sqrt(d);
        ++count;
      }
    }
    radii.push_back(count ? acc / static_cast<double>(count) : 1.0);
  }
  return radii;
}

// ---------------------------------------------------------------------------
// The full network
// ---------------------------------------------------------------------------

// Five-stage encoder over decreasing resolutions, classification head via
// global average pooling, segmentation head via inverse-distance upsampling
// with skip connections. Laplacian units close each stage of the encoder and
// follow every decoder upsampling.
class Network {
 public:
  struct Stage {
    Tensor positions;
    std::vector<std::size_t> offsets;
    Tensor features;
    NeighborIndex lu_neighbors;  // k_lu graph, shared by encoder and decoder units
  };

  Network(const NetworkConfig& cfg, ParamStore& store, Rng& rng,
          const std::vector<double>& stage_radii)
      : cfg_(cfg) {
    cfg_.validate();
    if (stage_radii.size() != kStageCount) {
      throw ConfigError("expected one kernel radius per stage");
    }
    std::size_t prev = cfg_.input_width;
    for (std::size_t s = 0; s < kStageCount; ++s) {
      const std::size_t w = cfg_.stage_widths[s];
      const std::string stage_name = "encoder.stage" + std::to_string(s);
      transitions_.emplace_back(prev, std::vector<std::size_t>{w}, store,
                                stage_name + ".transition", rng);
      KpconvConfig conv;
      conv.kernel_count = cfg_.kernel_points;
      conv.radius = stage_radii[s];
      conv.aug_hidden_layers = cfg_.aug_hidden_layers;
      blocks_.emplace_back();
      for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        blocks_[s].emplace_back(w, cfg_.bottleneck_ratio, conv, store,
                                stage_name + ".block" + std::to_string(b), rng);
      }
      encoder_lus_.emplace_back();
      for (std::size_t l = 0; l < cfg_.stage_lu_count(s); ++l) {
        encoder_lus_[s].emplace_back(cfg_.lu_config(w), store,
                                     stage_name + ".lu" + std::to_string(l), rng);
      }
      prev = w;
    }

    if (cfg_.task == Task::kClassification) {
      const std::size_t w4 = cfg_.stage_widths[4];
      head_.emplace(w4, std::vector<std::size_t>{w4 / 2, w4 / 4, cfg_.num_classes}, store,
                    "head", rng, /*final_activation=*/false, /*final_norm=*/false);
    } else {
      for (std::size_t s = 4; s-- > 0;) {  // s = 3, 2, 1, 0
        const std::string site = "decoder.stage" + std::to_string(s);
        fuse_.emplace_back(cfg_.stage_widths[s + 1] + cfg_.stage_widths[s],
                           std::vector<std::size_t>{cfg_.stage_widths[s]}, store, site + ".fuse",
                           rng);
        decoder_lus_.emplace_back();
        for (std::size_t l = 0; l < cfg_.stage_lu_count(s); ++l) {
          decoder_lus_.back().emplace_back(cfg_.lu_config(cfg_.stage_widths[s]), store,
                                           site + ".lu" + std::to_string(l), rng);
        }
      }
      const std::size_t w0 = cfg_.stage_widths[0];
      fuse_full_.emplace(w0 + cfg_.input_width, std::vector<std::size_t>{w0}, store,
                         "decoder.full.fuse", rng);
      decoder_lus_.emplace_back();
      for (std::size_t l = 0; l < cfg_.stage_lu_count(4); ++l) {
        decoder_lus_.back().emplace_back(cfg_.lu_config(w0), store,
                                         "decoder.full.lu" + std::to_string(l), rng);
      }
      head_.emplace(w0 + cfg_.num_categories,
                    std::vector<std::size_t>{w0, cfg_.num_classes}, store, "head", rng,
                    /*final_activation=*/false, /*final_norm=*/false);
    }
  }

  std::vector<Stage> encode(const CloudBatch& batch, bool training,
                            LuProbeSink* probe = nullptr) {
    if (batch.features.cols() != cfg_.input_width) {
      throw ShapeError("network expects input width " + std::to_string(cfg_.input_width) +
                       ", got " + std::to_string(batch.features.cols()));
    }
    std::vector<Stage> stages;
    Tensor positions = batch.positions;
    std::vector<std::size_t> offsets = batch.offsets;
    Tensor features = batch.features;
    for (std::size_t s = 0; s < kStageCount; ++s) {
      BatchSample ds = batch_fps(positions, offsets, cfg_.stage_points[s]);
      {
        NoGradGuard ng;
        positions = gather_rows(positions, ds.indices);
      }
      features = gather_rows(features, ds.indices);
      offsets = ds.offsets;
      features = transitions_[s].forward(features, training);
      const std::size_t k_conv = std::min(cfg_.k_conv, cfg_.stage_points[s]);
      NeighborIndex nbr = batch_self_knn(positions, offsets, k_conv);
      for (auto& block : blocks_[s]) {
        features = block.forward(features, positions, nbr, training);
      }
      NeighborIndex nbr_lu;
      if (cfg_.stage_lu_count(s) > 0) {
        const std::size_t k_lu = std::min(cfg_.k_lu, cfg_.stage_points[s]);
        nbr_lu = k_lu == k_conv ? nbr : batch_self_knn(positions, offsets, k_lu);
        for (auto& lu : encoder_lus_[s]) {
          features = lu.forward(features, nbr_lu, training, probe);
        }
      }
      stages.push_back({positions, offsets, features, std::move(nbr_lu)});
    }
    return stages;
  }

  // Per-cloud class scores, B x num_classes.
  Tensor classify(const CloudBatch& batch, bool training, LuProbeSink* probe = nullptr) {
    if (cfg_.task != Task::kClassification) {
      throw ConfigError("classify called on a segmentation network");
    }
    auto stages = encode(batch, training, probe);
    const Stage& last = stages.back();
    std::vector<std::size_t> ids(last.offsets.back());
    for (std::size_t b = 0; b + 1 < last.offsets.size(); ++b) {
      for (std::size_t i = last.offsets[b]; i < last.offsets[b + 1]; ++i) ids[i] = b;
    }
    Tensor pooled = scatter_mean(last.features, std::move(ids), batch.count());
    return head_->forward(pooled, training);
  }

  // Per-point class scores at the input resolution, N x num_classes.
  Tensor segment(const CloudBatch& batch, bool training, LuProbeSink* probe = nullptr) {
    if (cfg_.task != Task::kSegmentation) {
      throw ConfigError("segment called on a classification network");
    }
    auto stages = encode(batch, training, probe);
    Tensor f = stages[4].features;
    for (std::size_t s = 4; s-- > 0;) {  // s = 3, 2, 1, 0
      Tensor up = batch_interpolate(stages[s].positions, stages[s].offsets,
                                    stages[s + 1].positions, stages[s + 1].offsets, f);
      f = fuse_[3 - s].forward(concat_cols(up, stages[s].features), training);
      for (auto& lu : decoder_lus_[3 - s]) {
        f = lu.forward(f, stages[s].lu_neighbors, training, probe);
      }
    }
    Tensor up = batch_interpolate(batch.positions, batch.offsets, stages[0].positions,
                                  stages[0].offsets, f);
    f = fuse_full_->forward(concat_cols(up, batch.features), training);
    auto& full_lus = decoder_lus_[4];
    if (!full_lus.empty()) {
      NeighborIndex nbr = batch_self_knn(batch.positions, batch.offsets, cfg_.k_lu);
      for (auto& lu : full_lus) f = lu.forward(f, nbr, training, probe);
    }
    if (cfg_.num_categories > 0) {
      if (!batch.onehot.defined()) {
        throw ConfigError("segmentation network expects per-cloud one-hot conditioning");
      }
      f = concat_cols(f, gather_rows(batch.onehot, batch.cloud_ids()));
    }
    return head_->forward(f, training);
  }

  Tensor forward(const CloudBatch& batch, bool training, LuProbeSink* probe = nullptr) {
    return cfg_.task == Task::kClassification ? classify(batch, training, probe)
                                              : segment(batch, training, probe);
  }

  const NetworkConfig& config() const { return cfg_; }

  // Closed-form learnable parameter count for a configuration; the test suite
  // holds this equal to the enumerated store count.
  static std::size_t expected_parameter_count(const NetworkConfig& cfg) {
    cfg.validate();
    KpconvConfig conv;
    conv.kernel_count = cfg.kernel_points;
    conv.aug_hidden_layers = cfg.aug_hidden_layers;
    std::size_t total = 0;
    std::size_t prev = cfg.input_width;
    for (std::size_t s = 0; s < kStageCount; ++s) {
      const std::size_t w = cfg.stage_widths[s];
      total += Mlp::parameter_count(prev, {w});
      total += cfg.blocks_per_stage * BottleneckBlock::parameter_count(w, cfg.bottleneck_ratio, conv);
      total += cfg.stage_lu_count(s) * LaplacianUnit::parameter_count(cfg.lu_config(w));
      prev = w;
    }
    if (cfg.task == Task::kClassification) {
      const std::size_t w4 = cfg.stage_widths[4];
      total += Mlp::parameter_count(w4, {w4 / 2, w4 / 4, cfg.num_classes}, /*final_norm=*/false);
    } else {
      for (std::size_t s = 4; s-- > 0;) {
        total += Mlp::parameter_count(cfg.stage_widths[s + 1] + cfg.stage_widths[s],
                                      {cfg.stage_widths[s]});
        total += cfg.stage_lu_count(s) * LaplacianUnit::parameter_count(
                                             cfg.lu_config(cfg.stage_widths[s]));
      }
      const std::size_t w0 = cfg.stage_widths[0];
      total += Mlp::parameter_count(w0 + cfg.input_width, {w0});
      total += cfg.stage_lu_count(4) * LaplacianUnit::parameter_count(cfg.lu_config(w0));
      total += Mlp::parameter_count(w0 + cfg.num_categories, {w0, cfg.num_classes},
                                    /*final_norm=*/false);
    }
    return total;
  }

 private:
  NetworkConfig cfg_;
  std::vector<Mlp> transitions_;
  std::vector<std::vector<BottleneckBlock>> blocks_;
  std::vector<std::vector<LaplacianUnit>> encoder_lus_;
  std::vector<Mlp> fuse_;                             // decoder sites, coarse to fine
  std::optional<Mlp> fuse_full_;
  std::vector<std::vector<LaplacianUnit>> decoder_lus_;  // 4 stage sites + full site
  std::optional<Mlp> head_;
};

}  // namespace pointlap
