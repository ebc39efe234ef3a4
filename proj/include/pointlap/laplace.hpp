#pragma once

#include <cmath>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/geometry.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// Per-point filter weights aligned with a NeighborIndex row-for-row. Convex
// mode additionally requires nonnegative rows summing to 1.
struct FilterWeights {
  Tensor values;  // n x k

  void validate(const NeighborIndex& nbr, bool convex = false) const {
    if (!values.defined() || values.rank() != 2 || values.rows() != nbr.n ||
        values.cols() != nbr.k) {
      throw ShapeError("filter weights must be " + std::to_string(nbr.n) + " x " +
                       std::to_string(nbr.k));
    }
    const auto v = values.values();
    for (std::size_t i = 0; i < nbr.n; ++i) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < nbr.k; ++j) {
        const double w = v[i * nbr.k + j];
        if (!std::isfinite(w)) throw ShapeError("non-finite filter weight");
        if (convex && w < 0.0) throw ConfigError("convex filter weights must be nonnegative");
        row_sum += w;
      }
      if (convex && std::abs(row_sum - 1.0) > 1e-9) {
        throw ConfigError("convex filter weights must sum to 1 per point");
      }
    }
  }

  static FilterWeights uniform(const NeighborIndex& nbr) {
    return FilterWeights{
        Tensor::filled({nbr.n, nbr.k}, 1.0 / static_cast<double>(nbr.k))};
  }
};

// Per-point curvature magnitudes for one unit application: input, output, and
// the norm of the learned local displacement.
struct CurvatureReport {
  std::vector<double> h_in;
  std::vector<double> h_out;
  std::vector<double> h_delta;

  std::size_t size() const { return h_in.size(); }
};

namespace lap_detail {

inline void check_features(const Tensor& x, const NeighborIndex& nbr, const char* op) {
  if (!x.defined() || x.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a 2-D feature tensor");
  }
  if (x.rows() != nbr.n) {
    throw ShapeError(std::string(op) + ": feature rows (" + std::to_string(x.rows()) +
                     ") do not match neighbor index rows (" + std::to_string(nbr.n) + ")");
  }
}

}  // namespace lap_detail

// Direct filtering form: x_i' = sum_{j in N(i)} w_ij x_j.
inline Tensor convolve_plain(const Tensor& x, const NeighborIndex& nbr, const FilterWeights& w) {
  lap_detail::check_features(x, nbr, "convolve_plain");
  w.validate(nbr);
  Tensor w_flat = Tensor::from_data({nbr.n * nbr.k}, {w.values.values().begin(),
                                                      w.values.values().end()});
  Tensor gathered = gather_rows(x, nbr.flat());
  return scatter_sum(scale_rows(gathered, w_flat), nbr.centers(), nbr.n);
}

// Split filtering form: a pure global term sum_j w_ij x_i plus a local term
// sum_j w_ij (x_j - x_i). Algebraically identical to convolve_plain.
inline Tensor convolve_decomposed(const Tensor& x, const NeighborIndex& nbr,
                                  const FilterWeights& w) {
  lap_detail::check_features(x, nbr, "convolve_decomposed");
  w.validate(nbr);
  Tensor w_flat = Tensor::from_data({nbr.n * nbr.k}, {w.values.values().begin(),
                                                      w.values.values().end()});
  Tensor row_sums = sum_axis(w.values, 1);  // per-point total weight
  Tensor global_term = scale_rows(x, row_sums);
  Tensor differences = sub(gather_rows(x, nbr.flat()), gather_rows(x, nbr.centers()));
  Tensor local_term = scatter_sum(scale_rows(differences, w_flat), nbr.centers(), nbr.n);
  return add(global_term, local_term);
}

// Umbrella operator, the discrete Laplacian with a negative sign:
// (1/|N(i)|) sum_{j in N(i)} (x_j - x_i). Zero wherever a point sits at the
// centroid of its neighborhood. Fused kernel: differences are accumulated in
// place instead of materializing the n*k x d gather.
inline Tensor umbrella(const Tensor& x, const NeighborIndex& nbr) {
  lap_detail::check_features(x, nbr, "umbrella");
  const std::size_t n = nbr.n, k = nbr.k, d = x.cols();
  const auto xv = x.values();
  std::vector<double> out(n * d, 0.0);
  const double inv_k = 1.0 / static_cast<double>(k);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * d;
    const double* center = xv.data() + i * d;
    for (std::size_t j = 0; j < k; ++j) {
      const double* src = xv.data() + nbr.indices[i * k + j] * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += src[c] - center[c];
    }
    for (std::size_t c = 0; c < d; ++c) row[c] *= inv_k;
  }
  return detail::make_node(
      {n, d}, std::move(out), {x},
      [indices = nbr.indices, n, k, d, inv_k](detail::TensorImpl& self) {
        auto& dx = detail::parent_adjoint(self, 0);
        for (std::size_t i = 0; i < n; ++i) {
          const double* g = self.adjoint.data() + i * d;
          double* center = dx.data() + i * d;
          for (std::size_t j = 0; j < k; ++j) {
            double* src = dx.data() + indices[i * k + j] * d;
            for (std::size_t c = 0; c < d; ++c) src[c] += g[c] * inv_k;
          }
          for (std::size_t c = 0; c < d; ++c) center[c] -= g[c];
        }
      });
}

// Explicit integration of positions along the umbrella direction:
// p <- p + step * umbrella(p). The neighborhood is rebuilt from the current
// positions before every iteration after the first (the provided index is
// assumed to describe the input positions).
inline Tensor mean_curvature_flow(const Tensor& positions, const NeighborIndex& nbr, double step,
                                  std::size_t iterations) {
  geo_detail::check_positions(positions, "positions");
  NoGradGuard no_grad;
  Tensor p = positions.detached_copy();
  NeighborIndex rebuilt;
  const NeighborIndex* current = &nbr;
  for (std::size_t it = 0; it < iterations; ++it) {
    if (it > 0) {
      rebuilt = knn(p, p, nbr.k);
      current = &rebuilt;
    }
    Tensor u = umbrella(p, *current);
    p = add(p, mul_scalar(u, step));
  }
  return p;
}

// Curvature magnitudes around one unit application: h_in/h_out are norms of
// the umbrella vectors of the input/output fields, h_delta the norm of the
// local displacement itself.
inline CurvatureReport curvature_probe(const Tensor& x_in, const Tensor& x_out,
                                       const Tensor& delta, const NeighborIndex& nbr) {
  lap_detail::check_features(x_in, nbr, "curvature_probe");
  lap_detail::check_features(x_out, nbr, "curvature_probe");
  if (!delta.defined() || delta.rank() != 2 || delta.rows() != nbr.n) {
    throw ShapeError("curvature_probe: delta rows do not match neighbor index rows");
  }
  NoGradGuard no_grad;
  auto row_norms = [](const Tensor& t) {
    const std::size_t n = t.rows(), d = t.cols();
    const auto v = t.values();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += v[i * d + c] * v[i * d + c];
      out[i] = std::sqrt(acc);
    }
    return out;
  };
  CurvatureReport report;
  report.h_in = row_norms(umbrella(x_in, nbr));
  report.h_out = row_norms(umbrella(x_out, nbr));
  report.h_delta = row_norms(delta);
  return report;
}

}  // namespace pointlap
