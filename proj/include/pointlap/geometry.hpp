#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <unordered_map>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// One point cloud at one resolution. Positions are unitless after
// normalization (meters for indoor-scene inputs). Feature rows align with
// position rows; labels, when present, are per-point class ids.
struct PointCloud {
  Tensor positions;              // n x 3
  Tensor features;               // n x d
  std::vector<int> labels;       // empty or length n
  std::vector<double> object_class;  // empty or one-hot conditioning vector
  std::size_t color_channels = 0;    // leading feature columns holding colors

  std::size_t size() const { return positions.defined() ? positions.rows() : 0; }

  void validate(std::size_t num_classes = 0) const {
    if (!positions.defined() || positions.rows() == 0) {
      throw InsufficientPointsError("point cloud must contain at least one point");
    }
    if (positions.rank() != 2 || positions.cols() != 3) {
      throw ShapeError("positions must be n x 3, got " + format_shape(positions.shape()));
    }
    for (double v : positions.values()) {
      if (!std::isfinite(v)) throw DegenerateCloudError("non-finite position coordinate");
    }
    if (features.defined() && features.rows() != positions.rows()) {
      throw ShapeError("feature rows (" + std::to_string(features.rows()) +
                       ") do not match point count (" + std::to_string(positions.rows()) + ")");
    }
    if (!labels.empty()) {
      if (labels.size() != positions.rows()) {
        throw ShapeError("label count does not match point count");
      }
      if (num_classes > 0) {
        for (int l : labels) {
          if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
            throw LabelError("label " + std::to_string(l) + " outside [0, " +
                             std::to_string(num_classes) + ")");
          }
        }
      }
    }
  }
};

// Per-point neighbor lists over a source point set: row q holds the k indices
// of the source points nearest to query q, ascending by distance (ties broken
// by smaller index). A self-inclusive index (query == source) contains the
// query point itself, first.
struct NeighborIndex {
  std::vector<std::size_t> indices;  // n * k, row-major
  std::size_t n = 0;
  std::size_t k = 0;

  std::size_t at(std::size_t row, std::size_t j) const { return indices[row * k + j]; }

  std::vector<std::size_t> flat() const { return indices; }

  // Row index of each flattened entry: 0 repeated k times, 1 repeated k...
  std::vector<std::size_t> centers() const {
    std::vector<std::size_t> c(n * k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) c[i * k + j] = i;
    return c;
  }
};

namespace geo_detail {

inline double sqdist(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct Candidate {
  double d2;
  std::size_t idx;
  bool operator<(const Candidate& o) const {
    return d2 < o.d2 || (d2 == o.d2 && idx < o.idx);
  }
};

inline void check_positions(const Tensor& p, const char* what) {
  if (!p.defined() || p.rank() != 2 || p.cols() != 3) {
    throw ShapeError(std::string(what) + " must be n x 3");
  }
}

}  // namespace geo_detail

// Exhaustive k-nearest-neighbor scan; the reference all other search paths
// must match exactly.
inline NeighborIndex knn_brute_force(const Tensor& query, const Tensor& source, std::size_t k) {
  geo_detail::check_positions(query, "query positions");
  geo_detail::check_positions(source, "source positions");
  const std::size_t m = query.rows(), n = source.rows();
  if (k == 0) throw ConfigError("knn requires k >= 1");
  if (k > n) {
    throw InsufficientPointsError("knn: k = " + std::to_string(k) + " exceeds source size " +
                                  std::to_string(n));
  }
  const double* q = query.values().data();
  const double* s = source.values().data();
  NeighborIndex out;
  out.n = m;
  out.k = k;
  out.indices.resize(m * k);
  parallel_for_rows(m, 64, [&, q, s](std::size_t row_begin, std::size_t row_end) {
    std::vector<geo_detail::Candidate> cand(n);
    for (std::size_t i = row_begin; i < row_end; ++i) {
      for (std::size_t j = 0; j < n; ++j) cand[j] = {geo_detail::sqdist(q + 3 * i, s + 3 * j), j};
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      for (std::size_t j = 0; j < k; ++j) out.indices[i * k + j] = cand[j].idx;
    }
  });
  return out;
}

namespace geo_detail {

// Dense uniform-grid accelerator over the source bounding box, with points
// bucketed in CSR layout. Queries scan cells in expanding Chebyshev rings;
// once k candidates are held and the ring lower bound exceeds the current
// worst, no unscanned point can improve the result, so the output matches the
// brute-force scan exactly (same comparator, same distances).
class UniformGrid {
 public:
  UniformGrid(const double* pts, std::size_t n, double cell, const double* lo, const double* hi)
      : pts_(pts), cell_(cell) {
    for (int c = 0; c < 3; ++c) {
      lo_[c] = lo[c];
      dims_[c] = std::max<std::int64_t>(
          1, static_cast<std::int64_t>(std::floor((hi[c] - lo[c]) / cell)) + 1);
    }
    const std::size_t cell_count =
        static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    starts_.assign(cell_count + 1, 0);
    std::vector<std::size_t> cell_of(n);
    for (std::size_t i = 0; i < n; ++i) {
      cell_of[i] = flat_index(coord(pts + 3 * i));
      starts_[cell_of[i] + 1]++;
    }
    for (std::size_t c = 0; c < cell_count; ++c) starts_[c + 1] += starts_[c];
    ids_.resize(n);
    std::vector<std::size_t> cursor(starts_.begin(), starts_.end() - 1);
    // Stable bucketing keeps each cell's points in index order.
    for (std::size_t i = 0; i < n; ++i) ids_[cursor[cell_of[i]]++] = i;
  }

  std::array<std::int64_t, 3> coord(const double* p) const {
    return {static_cast<std::int64_t>(std::floor((p[0] - lo_[0]) / cell_)),
            static_cast<std::int64_t>(std::floor((p[1] - lo_[1]) / cell_)),
            static_cast<std::int64_t>(std::floor((p[2] - lo_[2]) / cell_))};
  }

  void query_knn(const double* q, std::size_t k, std::vector<Candidate>& best) const {
    best.clear();
    const auto c0 = coord(q);
    // Rings beyond this cover every cell of the grid from the query cell.
    std::int64_t last_ring = 0;
    for (int c = 0; c < 3; ++c) {
      last_ring = std::max(last_ring, std::max(c0[c], dims_[c] - 1 - c0[c]));
    }
    for (std::int64_t ring = 0;; ++ring) {
      scan_ring(q, c0, ring, k, best);
      if (best.size() == k) {
        // Any unscanned point sits in a cell at Chebyshev ring > `ring`, so
        // its distance is at least ring * cell. Strict comparison keeps exact
        // ties on the boundary in play for index-order resolution.
        const double bound = static_cast<double>(ring) * cell_;
        if (best.front().d2 < bound * bound) break;
      }
      if (ring >= last_ring) break;
    }
  }

 private:
  std::size_t flat_index(const std::array<std::int64_t, 3>& c) const {
    const std::int64_t x = std::clamp<std::int64_t>(c[0], 0, dims_[0] - 1);
    const std::int64_t y = std::clamp<std::int64_t>(c[1], 0, dims_[1] - 1);
    const std::int64_t z = std::clamp<std::int64_t>(c[2], 0, dims_[2] - 1);
    return static_cast<std::size_t>(x + dims_[0] * (y + dims_[1] * z));
  }

  void visit_cell(const double* q, std::int64_t x, std::int64_t y, std::int64_t z, std::size_t k,
                  std::vector<Candidate>& best) const {
    if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) return;
    const std::size_t cell = static_cast<std::size_t>(x + dims_[0] * (y + dims_[1] * z));
    for (std::size_t s = starts_[cell]; s < starts_[cell + 1]; ++s) {
      const std::size_t idx = ids_[s];
      Candidate c{sqdist(q, pts_ + 3 * idx), idx};
      if (best.size() < k) {
        best.push_back(c);
        std::push_heap(best.begin(), best.end());
      } else if (c < best.front()) {
        std::pop_heap(best.begin(), best.end());
        best.back() = c;
        std::push_heap(best.begin(), best.end());
      }
    }
  }

  void scan_ring(const double* q, const std::array<std::int64_t, 3>& c0, std::int64_t ring,
                 std::size_t k, std::vector<Candidate>& best) const {
    if (ring == 0) {
      visit_cell(q, c0[0], c0[1], c0[2], k, best);
      return;
    }
    // Two full faces plus the four strips between them.
    for (std::int64_t x = c0[0] - ring; x <= c0[0] + ring; ++x) {
      for (std::int64_t y = c0[1] - ring; y <= c0[1] + ring; ++y) {
        visit_cell(q, x, y, c0[2] - ring, k, best);
        visit_cell(q, x, y, c0[2] + ring, k, best);
      }
    }
    for (std::int64_t z = c0[2] - ring + 1; z <= c0[2] + ring - 1; ++z) {
      for (std::int64_t x = c0[0] - ring; x <= c0[0] + ring; ++x) {
        visit_cell(q, x, c0[1] - ring, z, k, best);
        visit_cell(q, x, c0[1] + ring, z, k, best);
      }
      for (std::int64_t y = c0[1] - ring + 1; y <= c0[1] + ring - 1; ++y) {
        visit_cell(q, c0[0] - ring, y, z, k, best);
        visit_cell(q, c0[0] + ring, y, z, k, best);
      }
    }
  }

  const double* pts_;
  double cell_;
  double lo_[3];
  std::int64_t dims_[3];
  std::vector<std::size_t> starts_;
  std::vector<std::size_t> ids_;
};

}  // namespace geo_detail

inline NeighborIndex knn_grid(const Tensor& query, const Tensor& source, std::size_t k) {
  geo_detail::check_positions(query, "query positions");
  geo_detail::check_positions(source, "source positions");
  const std::size_t m = query.rows(), n = source.rows();
  if (k == 0) throw ConfigError("knn requires k >= 1");
  if (k > n) {
    throw InsufficientPointsError("knn: k = " + std::to_string(k) + " exceeds source size " +
                                  std::to_string(n));
  }
  const double* s = source.values().data();
  double lo[3], hi[3];
  for (int c = 0; c < 3; ++c) {
    lo[c] = hi[c] = s[c];
  }
  for (std::size_t i = 1; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], s[3 * i + c]);
      hi[c] = std::max(hi[c], s[3 * i + c]);
    }
  const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  if (extent <= 0.0) return knn_brute_force(query, source, k);
  // Aim for a handful of points per cell so a k-neighborhood spans few rings.
  const double cells_per_axis =
      std::min(64.0, std::max(1.0, std::cbrt(static_cast<double>(n) / 4.0)));
  const double cell = extent / cells_per_axis;
  geo_detail::UniformGrid grid(s, n, cell, lo, hi);
  const double* q = query.values().data();

  NeighborIndex out;
  out.n = m;
  out.k = k;
  out.indices.resize(m * k);
  std::vector<geo_detail::Candidate> best;
  best.reserve(k + 1);
  for (std::size_t i = 0; i < m; ++i) {
    grid.query_knn(q + 3 * i, k, best);
    std::sort(best.begin(), best.end());
    for (std::size_t j = 0; j < k; ++j) out.indices[i * k + j] = best[j].idx;
  }
  return out;
}

// k nearest source points per query, ascending by Euclidean distance. When
// query and source are the same point set, each point's own index appears
// first in its row. Dispatches to the grid accelerator for larger inputs;
// both paths produce identical results.
inline NeighborIndex knn(const Tensor& query, const Tensor& source, std::size_t k) {
  if (source.defined() && source.rank() == 2 && source.rows() >= 256) {
    return knn_grid(query, source, k);
  }
  return knn_brute_force(query, source, k);
}

// Greedy farthest point sampling: starts at `start`, then repeatedly selects
// the point maximizing the minimum distance to everything already selected
// (ties broken by smallest index).
inline std::vector<std::size_t> farthest_point_sample(const Tensor& positions, std::size_t m,
                                                      std::size_t start = 0) {
  geo_detail::check_positions(positions, "positions");
  const std::size_t n = positions.rows();
  if (m < 1) throw ConfigError("farthest_point_sample requires m >= 1");
  if (m > n) {
    throw InsufficientPointsError("farthest_point_sample: m = " + std::to_string(m) +
                                  " exceeds point count " + std::to_string(n));
  }
  if (start >= n) throw ConfigError("farthest_point_sample: start index out of range");
  const double* p = positions.values().data();
  std::vector<std::size_t> chosen;
  chosen.reserve(m);
  chosen.push_back(start);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t step = 1; step < m; ++step) {
    const double* last = p + 3 * chosen.back();
    for (std::size_t i = 0; i < n; ++i) {
      min_d2[i] = std::min(min_d2[i], geo_detail::sqdist(p + 3 * i, last));
    }
    std::size_t best = 0;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    chosen.push_back(best);
    min_d2[best] = 0.0;
  }
  return chosen;
}

// One output point per occupied voxel: positions and features average over
// the voxel's members, the label is the majority label (ties -> smallest
// class id). Output order follows first occurrence.
inline PointCloud voxel_downsample(const PointCloud& cloud, double resolution) {
  cloud.validate();
  if (!(resolution > 0.0)) throw ConfigError("voxel_downsample requires resolution > 0");
  const std::size_t n = cloud.size();
  const double* p = cloud.positions.values().data();
  const std::size_t d = cloud.features.defined() ? cloud.features.cols() : 0;

  struct Key {
    std::int64_t x, y, z;
    bool operator==(const Key& o) const { return x == o.x && y == o.y && z == o.z; }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = 1469598103934665603ULL;
      for (std::int64_t v : {k.x, k.y, k.z}) {
        h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ULL;
        h *= 1099511628211ULL;
      }
      return static_cast<std::size_t>(h);
    }
  };

  std::unordered_map<Key, std::size_t, KeyHash> voxel_of;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) {
    Key key{static_cast<std::int64_t>(std::floor(p[3 * i] / resolution)),
            static_cast<std::int64_t>(std::floor(p[3 * i + 1] / resolution)),
            static_cast<std::int64_t>(std::floor(p[3 * i + 2] / resolution))};
    auto [it, inserted] = voxel_of.try_emplace(key, members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(i);
  }

  const std::size_t out_n = members.size();
  std::vector<double> out_pos(out_n * 3, 0.0);
  std::vector<double> out_feat(out_n * d, 0.0);
  std::vector<int> out_labels;
  const double* f = d ? cloud.features.values().data() : nullptr;
  for (std::size_t v = 0; v < out_n; ++v) {
    const double inv = 1.0 / static_cast<double>(members[v].size());
    for (std::size_t i : members[v]) {
      for (int c = 0; c < 3; ++c) out_pos[v * 3 + c] += p[3 * i + c] * inv;
      for (std::size_t c = 0; c < d; ++c) out_feat[v * d + c] += f[i * d + c] * inv;
    }
  }
  if (!cloud.labels.empty()) {
    out_labels.resize(out_n);
    for (std::size_t v = 0; v < out_n; ++v) {
      std::unordered_map<int, std::size_t> votes;
      for (std::size_t i : members[v]) votes[cloud.labels[i]]++;
      int best_label = 0;
      std::size_t best_votes = 0;
      for (const auto& [label, count] : votes) {
        if (count > best_votes || (count == best_votes && label < best_label)) {
          best_label = label;
          best_votes = count;
        }
      }
      out_labels[v] = best_label;
    }
  }

  PointCloud out;
  out.positions = Tensor::from_data({out_n, 3}, std::move(out_pos));
  if (d) out.features = Tensor::from_data({out_n, d}, std::move(out_feat));
  out.labels = std::move(out_labels);
  out.object_class = cloud.object_class;
  out.color_channels = cloud.color_channels;
  return out;
}

constexpr double kInterpolationEps = 1e-8;

// Inverse-distance feature interpolation from a coarse resolution onto fine
// positions: each fine feature is the normalized 1/(dist+eps) weighted mean
// of its k nearest coarse features. Differentiable into the coarse features.
inline Tensor interpolate_features(const Tensor& fine_positions, const Tensor& coarse_positions,
                                   const Tensor& coarse_features, std::size_t k = 3) {
  geo_detail::check_positions(fine_positions, "fine positions");
  geo_detail::check_positions(coarse_positions, "coarse positions");
  if (coarse_positions.rows() == 0) {
    throw InsufficientPointsError("interpolate_features: coarse cloud is empty");
  }
  if (coarse_positions.rows() < k) {
    throw InsufficientPointsError("interpolate_features: coarse cloud has " +
                                  std::to_string(coarse_positions.rows()) + " points, need " +
                                  std::to_string(k));
  }
  const NeighborIndex nbr = knn(fine_positions, coarse_positions, k);
  const std::size_t m = fine_positions.rows();
  const double* fp = fine_positions.values().data();
  const double* cp = coarse_positions.values().data();
  std::vector<double> weights(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double dist = std::sqrt(geo_detail::sqdist(fp + 3 * i, cp + 3 * nbr.at(i, j)));
      weights[i * k + j] = 1.0 / (dist + kInterpolationEps);
      total += weights[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) weights[i * k + j] /= total;
  }
  Tensor w = Tensor::from_data({m * k}, std::move(weights));
  Tensor gathered = gather_rows(coarse_features, nbr.flat());
  return scatter_sum(scale_rows(gathered, w), nbr.centers(), m);
}

inline Tensor interpolate_features(const Tensor& fine_positions, const PointCloud& coarse,
                                   std::size_t k = 3) {
  return interpolate_features(fine_positions, coarse.positions, coarse.features, k);
}

// Interpolation weights alone, for tests and diagnostics.
inline std::vector<double> interpolation_weights(const Tensor& fine_positions,
                                                 const Tensor& coarse_positions, std::size_t k = 3) {
  const NeighborIndex nbr = knn(fine_positions, coarse_positions, k);
  const std::size_t m = fine_positions.rows();
  const double* fp = fine_positions.values().data();
  const double* cp = coarse_positions.values().data();
  std::vector<double> weights(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double dist = std::sqrt(geo_detail::sqdist(fp + 3 * i, cp + 3 * nbr.at(i, j)));
      weights[i * k + j] = 1.0 / (dist + kInterpolationEps);
      total += weights[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) weights[i * k + j] /= total;
  }
  return weights;
}

}  // namespace pointlap
