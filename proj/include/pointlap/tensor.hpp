#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/rng.hpp"
#include "pointlap/threading.hpp"

namespace pointlap {

class Tensor;

namespace detail {

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> value;

  // Persistent gradient, accumulated across backward passes until reset.
  std::vector<double> grad;

  // Per-pass adjoint scratch. `stamp` marks which backward pass the buffer
  // belongs to so stale contents are never reused.
  std::vector<double> adjoint;
  std::uint64_t stamp = 0;

  bool requires_grad = false;

  // Recorded inputs and the adjoint propagation rule for this node.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void()> backprop;

  std::size_t numel() const { return value.size(); }

  std::vector<double>& adjoint_for(std::uint64_t pass_stamp) {
    if (stamp != pass_stamp) {
      adjoint.assign(value.size(), 0.0);
      stamp = pass_stamp;
    }
    return adjoint;
  }
};

inline std::uint64_t& pass_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

// Disables taping for its scope (inference, geometry-only math).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor of 64-bit floats participating in reverse-mode
// automatic differentiation. Handles share the underlying node; values are
// immutable once a node has been consumed by an operation (the optimizer is
// the sanctioned exception and only touches leaves between passes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor ones(std::vector<std::size_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), 1.0, requires_grad);
  }

  static Tensor filled(std::vector<std::size_t> shape, double v, bool requires_grad = false) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->value.assign(count(impl->shape), v);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> values,
                          bool requires_grad = false) {
    if (count(shape) != values.size()) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + format_shape(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor uniform(std::vector<std::size_t> shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    std::vector<double> v(count(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }

  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->numel(); }

  // 2-D convenience accessors.
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.size() > 1 ? impl_->shape[1] : 1; }

  std::span<const double> values() const { return impl_->value; }

  // Mutable access to a leaf's storage. Reserved for initialization and the
  // optimizer; mutating a value already consumed by the tape is undefined.
  std::span<double> mutable_values() { return impl_->value; }

  double item() const {
    if (numel() != 1) {
      throw RankError("item() requires a scalar tensor, got shape " + format_shape(shape()));
    }
    return impl_->value[0];
  }

  double at(std::size_t i) const { return impl_->value.at(i); }
  double at(std::size_t r, std::size_t c) const { return impl_->value.at(r * cols() + c); }

  bool requires_grad() const { return impl_->requires_grad; }

  bool has_grad() const { return !impl_->grad.empty(); }

  std::span<const double> grad() const {
    if (impl_->grad.empty()) {
      throw OptimizerError("gradient not populated for tensor of shape " + format_shape(shape()));
    }
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.clear(); }

  Tensor detached_copy() const {
    return from_data(impl_->shape, impl_->value, false);
  }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

// Ordered record of the executed operations that feed a root node. Inputs
// always precede consumers, so replaying adjoints back-to-front yields the
// gradients of every participating leaf.
struct Tape {
  std::vector<TensorImpl*> nodes;
};

inline Tape build_tape(const Tensor& root) {
  Tape tape;
  if (!root.impl()->requires_grad) return tape;
  std::unordered_set<TensorImpl*> visited;
  // Iterative post-order DFS: parents are emitted before consumers.
  struct Frame {
    TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl(), 0});
  visited.insert(root.impl());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      tape.nodes.push_back(f.node);
      stack.pop_back();
    }
  }
  return tape;
}

}  // namespace detail

// Reverse-mode pass from a scalar loss. Gradients accumulate into `grad`
// buffers of every reachable tensor that requires gradients; calling again
// without zeroing adds the new contributions on top.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw RankError("backward requires a scalar loss, got shape " + format_shape(loss.shape()));
  }
  if (!loss.impl()->requires_grad) return;

  detail::Tape tape = detail::build_tape(loss);
  const std::uint64_t stamp = ++detail::pass_counter();
  for (auto* node : tape.nodes) node->adjoint_for(stamp);
  loss.impl()->adjoint_for(stamp)[0] = 1.0;

  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
  for (auto* node : tape.nodes) {
    if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
    const auto& adj = node->adjoint;
    for (std::size_t i = 0; i < adj.size(); ++i) node->grad[i] += adj[i];
  }
}

namespace detail {

inline Tensor make_node(std::vector<std::size_t> shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(TensorImpl&)> backprop) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  impl->requires_grad = needs;
  if (needs) {
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.impl_ptr());
    TensorImpl* self = impl.get();
    impl->backprop = [self, fn = std::move(backprop)]() { fn(*self); };
  }
  return Tensor(std::move(impl));
}

inline std::vector<double>& parent_adjoint(TensorImpl& self, std::size_t i) {
  return self.parents[i]->adjoint_for(self.stamp);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ, " + format_shape(a.shape()) + " vs " +
                     format_shape(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_node(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    auto& db = detail::parent_adjoint(self, 1);
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) {
      da[i] += self.adjoint[i];
      db[i] += self.adjoint[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_node(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    auto& db = detail::parent_adjoint(self, 1);
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) {
      da[i] += self.adjoint[i];
      db[i] -= self.adjoint[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_node(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    auto& db = detail::parent_adjoint(self, 1);
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) {
      da[i] += self.adjoint[i] * bv[i];
      db[i] += self.adjoint[i] * av[i];
    }
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return detail::make_node(a.shape(), std::move(out), {a}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) da[i] += self.adjoint[i];
  });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return detail::make_node(a.shape(), std::move(out), {a}, [c](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) da[i] += self.adjoint[i] * c;
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return detail::make_node(a.shape(), std::move(out), {a}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    const auto& av = self.parents[0]->value;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) {
      if (av[i] > 0.0) da[i] += self.adjoint[i];
    }
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return detail::make_node(a.shape(), std::move(out), {a}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    const auto& av = self.parents[0]->value;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) da[i] += self.adjoint[i] / av[i];
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n], row-major. Output rows are processed in
// small blocks so each B row is reused across the block instead of being
// re-streamed per output row. Accumulation order per output element matches
// the naive triple loop, and rows are partitioned across workers, so results
// are identical for any thread count. No input-dependent shortcuts: forward
// cost is a pure function of the shapes, which keeps inference timing
// comparable across models.
inline void matmul_accumulate(const double* a, const double* b, double* c, std::size_t m,
                              std::size_t k, std::size_t n) {
  constexpr std::size_t kRowBlock = 8;
  parallel_for_rows(m, 128, [=](std::size_t row_begin, std::size_t row_end) {
    for (std::size_t ib = row_begin; ib < row_end; ib += kRowBlock) {
      const std::size_t ie = std::min(row_end, ib + kRowBlock);
      for (std::size_t l = 0; l < k; ++l) {
        const double* brow = b + l * n;
        for (std::size_t i = ib; i < ie; ++i) {
          const double ail = a[i * k + l];
          double* crow = c + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += ail * brow[j];
        }
      }
    }
  });
}

// C[m x n] += A[k x m]^T * B[k x n].
inline void matmul_at_b(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                        std::size_t n) {
  for (std::size_t l = 0; l < k; ++l) {
    const double* arow = a + l * m;
    const double* brow = b + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double ali = arow[i];
      if (ali == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += ali * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T.
inline void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                        std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double* brow = b + l * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[l] += acc;
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + format_shape(a.shape()) + " and " +
                     format_shape(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  detail::matmul_accumulate(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_node({m, n}, std::move(out), {a, b},
                           [m, k, n](detail::TensorImpl& self) {
                             auto& da = detail::parent_adjoint(self, 0);
                             auto& db = detail::parent_adjoint(self, 1);
                             const auto& av = self.parents[0]->value;
                             const auto& bv = self.parents[1]->value;
                             // dA += G * B^T ; dB += A^T * G
                             detail::matmul_a_bt(self.adjoint.data(), bv.data(), da.data(), m, n, k);
                             detail::matmul_at_b(av.data(), self.adjoint.data(), db.data(), m, k, n);
                           });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_node({1}, {s}, {a}, [](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    const double g = self.adjoint[0];
    for (auto& d : da) d += g;
  });
}

inline Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return detail::make_node({1}, {s * inv}, {a}, [inv](detail::TensorImpl& self) {
    auto& da = detail::parent_adjoint(self, 0);
    const double g = self.adjoint[0] * inv;
    for (auto& d : da) d += g;
  });
}

// Sum of a 2-D tensor over one axis. axis 0 -> length-cols vector,
// axis 1 -> length-rows vector.
inline Tensor sum_axis(const Tensor& a, int axis) {
  if (a.rank() != 2) throw RankError("sum_axis expects a 2-D tensor");
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  const auto av = a.values();
  if (axis == 0) {
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) out[c] += av[i * d + c];
    return detail::make_node({d}, std::move(out), {a}, [n, d](detail::TensorImpl& self) {
      auto& da = detail::parent_adjoint(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) da[i * d + c] += self.adjoint[c];
    });
  }
  if (axis == 1) {
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) out[i] += av[i * d + c];
    return detail::make_node({n}, std::move(out), {a}, [n, d](detail::TensorImpl& self) {
      auto& da = detail::parent_adjoint(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) da[i * d + c] += self.adjoint[i];
    });
  }
  throw RankError("sum_axis: axis must be 0 or 1");
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  if (a.rank() != 2) throw RankError("mean_axis expects a 2-D tensor");
  const double inv = 1.0 / static_cast<double>(axis == 0 ? a.shape()[0] : a.shape()[1]);
  return mul_scalar(sum_axis(a, axis), inv);
}

// ---------------------------------------------------------------------------
// Structural primitives
// ---------------------------------------------------------------------------

// Concatenation along the channel (column) axis.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("concat_cols: row counts differ, " + format_shape(a.shape()) + " vs " +
                     format_shape(b.shape()));
  }
  const std::size_t n = a.shape()[0], da = a.shape()[1], db = b.shape()[1];
  std::vector<double> out(n * (da + db));
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * da, da, out.data() + i * (da + db));
    std::copy_n(bv.data() + i * db, db, out.data() + i * (da + db) + da);
  }
  return detail::make_node({n, da + db}, std::move(out), {a, b},
                           [n, da, db](detail::TensorImpl& self) {
                             auto& ga = detail::parent_adjoint(self, 0);
                             auto& gb = detail::parent_adjoint(self, 1);
                             const std::size_t w = da + db;
                             for (std::size_t i = 0; i < n; ++i) {
                               for (std::size_t c = 0; c < da; ++c)
                                 ga[i * da + c] += self.adjoint[i * w + c];
                               for (std::size_t c = 0; c < db; ++c)
                                 gb[i * db + c] += self.adjoint[i * w + da + c];
                             }
                           });
}

// Row gather: out[r] = x[idx[r]].
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
  if (x.rank() != 2) throw RankError("gather_rows expects a 2-D tensor");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(idx.size() * d);
  const auto xv = x.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                       std::to_string(n) + " rows");
    }
    std::copy_n(xv.data() + idx[r] * d, d, out.data() + r * d);
  }
  const std::size_t rcount = idx.size();
  return detail::make_node({rcount, d}, std::move(out), {x},
                           [idx = std::move(idx), d](detail::TensorImpl& self) {
                             auto& dx = detail::parent_adjoint(self, 0);
                             for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t c = 0; c < d; ++c)
                                 dx[idx[r] * d + c] += self.adjoint[r * d + c];
                           });
}

// Row scatter-sum: out[idx[r]] += x[r], output has `out_rows` rows.
inline Tensor scatter_sum(const Tensor& x, std::vector<std::size_t> idx, std::size_t out_rows) {
  if (x.rank() != 2) throw RankError("scatter_sum expects a 2-D tensor");
  if (idx.size() != x.shape()[0]) {
    throw ShapeError("scatter_sum: index count " + std::to_string(idx.size()) +
                     " does not match row count " + std::to_string(x.shape()[0]));
  }
  const std::size_t d = x.shape()[1];
  std::vector<double> out(out_rows * d, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= out_rows) {
      throw ShapeError("scatter_sum: index " + std::to_string(idx[r]) + " out of range for " +
                       std::to_string(out_rows) + " rows");
    }
    for (std::size_t c = 0; c < d; ++c) out[idx[r] * d + c] += xv[r * d + c];
  }
  return detail::make_node({out_rows, d}, std::move(out), {x},
                           [idx = std::move(idx), d](detail::TensorImpl& self) {
                             auto& dx = detail::parent_adjoint(self, 0);
                             for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t c = 0; c < d; ++c)
                                 dx[r * d + c] += self.adjoint[idx[r] * d + c];
                           });
}

// Row scatter-mean: out[g] = mean of x rows with idx == g. Groups with no
// members stay zero.
inline Tensor scatter_mean(const Tensor& x, std::vector<std::size_t> idx, std::size_t out_rows) {
  if (x.rank() != 2) throw RankError("scatter_mean expects a 2-D tensor");
  if (idx.size() != x.shape()[0]) {
    throw ShapeError("scatter_mean: index count " + std::to_string(idx.size()) +
                     " does not match row count " + std::to_string(x.shape()[0]));
  }
  const std::size_t d = x.shape()[1];
  std::vector<double> counts(out_rows, 0.0);
  for (auto g : idx) {
    if (g >= out_rows) {
      throw ShapeError("scatter_mean: index " + std::to_string(g) + " out of range for " +
                       std::to_string(out_rows) + " rows");
    }
    counts[g] += 1.0;
  }
  std::vector<double> out(out_rows * d, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < d; ++c) out[idx[r] * d + c] += xv[r * d + c];
  for (std::size_t g = 0; g < out_rows; ++g) {
    if (counts[g] > 0.0) {
      const double inv = 1.0 / counts[g];
      for (std::size_t c = 0; c < d; ++c) out[g * d + c] *= inv;
    }
  }
  return detail::make_node(
      {out_rows, d}, std::move(out), {x},
      [idx = std::move(idx), counts = std::move(counts), d](detail::TensorImpl& self) {
        auto& dx = detail::parent_adjoint(self, 0);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const double inv = 1.0 / counts[idx[r]];
          for (std::size_t c = 0; c < d; ++c) dx[r * d + c] += self.adjoint[idx[r] * d + c] * inv;
        }
      });
}

// Per-row scaling: out[r] = x[r] * s[r]. `s` has one entry per row.
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() != 2) throw RankError("scale_rows expects a 2-D tensor");
  if (s.numel() != x.shape()[0]) {
    throw ShapeError("scale_rows: scale length " + std::to_string(s.numel()) +
                     " does not match row count " + std::to_string(x.shape()[0]));
  }
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(n * d);
  const auto xv = x.values(), sv = s.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = xv[i * d + c] * sv[i];
  return detail::make_node({n, d}, std::move(out), {x, s}, [n, d](detail::TensorImpl& self) {
    auto& dx = detail::parent_adjoint(self, 0);
    auto& ds = detail::parent_adjoint(self, 1);
    const auto& xv = self.parents[0]->value;
    const auto& sv = self.parents[1]->value;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dx[i * d + c] += self.adjoint[i * d + c] * sv[i];
        acc += self.adjoint[i * d + c] * xv[i * d + c];
      }
      ds[i] += acc;
    }
  });
}

// Column broadcast multiply: out[r][c] = x[r][c] * v[c].
inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2) throw RankError("mul_rowvec expects a 2-D tensor");
  if (v.numel() != x.shape()[1]) {
    throw ShapeError("mul_rowvec: vector length " + std::to_string(v.numel()) +
                     " does not match column count " + std::to_string(x.shape()[1]));
  }
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(n * d);
  const auto xv = x.values(), vv = v.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = xv[i * d + c] * vv[c];
  return detail::make_node({n, d}, std::move(out), {x, v}, [n, d](detail::TensorImpl& self) {
    auto& dx = detail::parent_adjoint(self, 0);
    auto& dv = detail::parent_adjoint(self, 1);
    const auto& xv = self.parents[0]->value;
    const auto& vv = self.parents[1]->value;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        dx[i * d + c] += self.adjoint[i * d + c] * vv[c];
        dv[c] += self.adjoint[i * d + c] * xv[i * d + c];
      }
  });
}

// Column broadcast add (bias): out[r][c] = x[r][c] + v[c].
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2) throw RankError("add_rowvec expects a 2-D tensor");
  if (v.numel() != x.shape()[1]) {
    throw ShapeError("add_rowvec: vector length " + std::to_string(v.numel()) +
                     " does not match column count " + std::to_string(x.shape()[1]));
  }
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(n * d);
  const auto xv = x.values(), vv = v.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = xv[i * d + c] + vv[c];
  return detail::make_node({n, d}, std::move(out), {x, v}, [n, d](detail::TensorImpl& self) {
    auto& dx = detail::parent_adjoint(self, 0);
    auto& dv = detail::parent_adjoint(self, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        dx[i * d + c] += self.adjoint[i * d + c];
        dv[c] += self.adjoint[i * d + c];
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax and loss
// ---------------------------------------------------------------------------

// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() != 2) throw RankError("softmax expects a 2-D tensor");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(n * d);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    double m = xv[i * d];
    for (std::size_t c = 1; c < d; ++c) m = std::max(m, xv[i * d + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      out[i * d + c] = std::exp(xv[i * d + c] - m);
      z += out[i * d + c];
    }
    const double inv = 1.0 / z;
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] *= inv;
  }
  return detail::make_node({n, d}, std::move(out), {x}, [n, d](detail::TensorImpl& self) {
    auto& dx = detail::parent_adjoint(self, 0);
    const auto& sv = self.value;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += self.adjoint[i * d + c] * sv[i * d + c];
      for (std::size_t c = 0; c < d; ++c)
        dx[i * d + c] += sv[i * d + c] * (self.adjoint[i * d + c] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Affine parameters plus running statistics for one normalized width. The
// rows of the input (points across all clouds of a mini-batch) form the
// normalization axis. Running statistics live in grad-free tensors so they
// serialize alongside the learnable parameters.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BatchNormState(std::size_t width)
      : gamma(Tensor::ones({width}, true)),
        beta(Tensor::zeros({width}, true)),
        running_mean(Tensor::zeros({width})),
        running_var(Tensor::ones({width})) {}

  std::size_t width() const { return gamma.numel(); }
};

inline Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training) {
  if (x.rank() != 2) throw RankError("batch_norm expects a 2-D tensor");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (d != state.width()) {
    throw ShapeError("batch_norm: width " + std::to_string(d) + " does not match state width " +
                     std::to_string(state.width()));
  }
  if (training && n < 2) {
    throw DegenerateBatchError("batch_norm: training requires at least 2 rows, got " +
                               std::to_string(n));
  }
  const auto xv = x.values();
  const auto gv = state.gamma.values();
  const auto bv = state.beta.values();

  std::vector<double> mean(d, 0.0), inv_std(d, 0.0), xhat(n * d);
  if (training) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) mean[c] += xv[i * d + c];
    for (std::size_t c = 0; c < d; ++c) mean[c] /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        const double t = xv[i * d + c] - mean[c];
        var[c] += t * t;
      }
    for (std::size_t c = 0; c < d; ++c) var[c] /= static_cast<double>(n);
    for (std::size_t c = 0; c < d; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);
    // Running statistics track the unbiased variance.
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    auto rm = state.running_mean.mutable_values();
    auto rv = state.running_var.mutable_values();
    for (std::size_t c = 0; c < d; ++c) {
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mean[c];
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * var[c] * unbias;
    }
  } else {
    const auto rm = state.running_mean.values();
    const auto rv = state.running_var.values();
    for (std::size_t c = 0; c < d; ++c) {
      mean[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + state.eps);
    }
  }

  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      xhat[i * d + c] = (xv[i * d + c] - mean[c]) * inv_std[c];
      out[i * d + c] = gv[c] * xhat[i * d + c] + bv[c];
    }

  return detail::make_node(
      {n, d}, std::move(out), {x, state.gamma, state.beta},
      [n, d, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::TensorImpl& self) {
        auto& dx = detail::parent_adjoint(self, 0);
        auto& dgamma = detail::parent_adjoint(self, 1);
        auto& dbeta = detail::parent_adjoint(self, 2);
        const auto& gv = self.parents[1]->value;
        std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < d; ++c) {
            const double g = self.adjoint[i * d + c];
            sum_g[c] += g;
            sum_gx[c] += g * xhat[i * d + c];
          }
        for (std::size_t c = 0; c < d; ++c) {
          dgamma[c] += sum_gx[c];
          dbeta[c] += sum_g[c];
        }
        if (training) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) {
              const double g = self.adjoint[i * d + c];
              dx[i * d + c] += gv[c] * inv_std[c] *
                               (g - inv_n * sum_g[c] - xhat[i * d + c] * inv_n * sum_gx[c]);
            }
        } else {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c)
              dx[i * d + c] += self.adjoint[i * d + c] * gv[c] * inv_std[c];
        }
      });
}

}  // namespace pointlap
