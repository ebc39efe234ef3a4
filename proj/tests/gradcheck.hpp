#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pointlap/rng.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap::testing {

// Independent gradient oracle: central finite differences over every entry of
// every input tensor, compared against the analytic gradients from one
// backward pass. The forward function must be a pure function of the input
// values (stateful layers get fresh state per call or run in a mode where
// state does not change).
struct GradCheckResult {
  bool ok = true;
  double worst_rel = 0.0;
  std::string detail;
};

inline GradCheckResult
gradcheck(const std::function<Tensor()>& forward_scalar, std::vector<Tensor> inputs,
          double step = 1e-5, double rel_tol = 1e-4,
          const std::function<bool(const Tensor&, std::size_t)>& skip_entry = {},
          double abs_tol = 1e-7) {
  GradCheckResult result;

  for (auto& t : inputs) t.zero_grad();
  Tensor loss = forward_scalar();
  backward(loss);

  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (skip_entry && skip_entry(t, i)) continue;
      const double saved = values[i];
      values[i] = saved + step;
      const double up = forward_scalar().item();
      values[i] = saved - step;
      const double down = forward_scalar().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      // Relative tolerance with an absolute floor: a truly zero gradient only
      // has to beat finite-difference noise.
      const double tol = abs_tol + rel_tol * std::max(std::abs(numeric), std::abs(analytic[i]));
      const double err = std::abs(numeric - analytic[i]);
      if (err / tol > result.worst_rel) {
        result.worst_rel = err / tol;
        result.detail = "entry " + std::to_string(i) + ": analytic " +
                        std::to_string(analytic[i]) + " vs numeric " + std::to_string(numeric);
      }
      if (err > tol) result.ok = false;
    }
  }
  return result;
}

// Fixed random probe weights; dotting an op's output with these makes every
// output entry contribute to the scalar head. Create once, capture in the
// forward closure.
inline Tensor probe_weights(const std::vector<std::size_t>& shape, Rng& rng) {
  return Tensor::uniform(shape, 0.25, 1.75, rng);
}

// Moves parameters into generic position before a finite-difference check.
// Fresh layers sit at degenerate points (beta = 0 centers batch-norm output
// exactly on the relu kink), where central differences step across the kink.
inline void randomize_values(std::vector<Tensor>& tensors, Rng& rng, double lo = -0.7,
                             double hi = 0.7) {
  for (auto& t : tensors) {
    for (auto& v : t.mutable_values()) v = rng.uniform(lo, hi);
  }
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool requires_grad = true,
                            double lo = -1.5, double hi = 1.5) {
  return Tensor::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

}  // namespace pointlap::testing
