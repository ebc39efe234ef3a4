#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/geometry.hpp"
#include "pointlap/laplace.hpp"
#include "pointlap/param_store.hpp"
#include "pointlap/rng.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// ---------------------------------------------------------------------------
// Linear / batch-norm / MLP building blocks
// ---------------------------------------------------------------------------

class Linear {
 public:
  Linear(std::size_t d_in, std::size_t d_out, bool with_bias, ParamStore& store,
         const std::string& name, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    weight_ = store.add(name + ".weight",
                        Tensor::uniform({d_in, d_out}, -bound, bound, rng, true));
    if (with_bias) bias_ = store.add(name + ".bias", Tensor::zeros({d_out}, true));
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(x, weight_);
    if (bias_.defined()) y = add_rowvec(y, bias_);
    return y;
  }

  std::size_t d_in() const { return weight_.shape()[0]; }
  std::size_t d_out() const { return weight_.shape()[1]; }

  static std::size_t parameter_count(std::size_t d_in, std::size_t d_out, bool with_bias) {
    return d_in * d_out + (with_bias ? d_out : 0);
  }

 private:
  Tensor weight_;
  Tensor bias_;
};

class BatchNorm {
 public:
  BatchNorm(std::size_t width, ParamStore& store, const std::string& name) : state_(width) {
    store.add(name + ".gamma", state_.gamma);
    store.add(name + ".beta", state_.beta);
    store.add(name + ".running_mean", state_.running_mean, /*learnable=*/false);
    store.add(name + ".running_var", state_.running_var, /*learnable=*/false);
  }

  Tensor forward(const Tensor& x, bool training) { return batch_norm(x, state_, training); }

  BatchNormState& state() { return state_; }

  static std::size_t parameter_count(std::size_t width) { return 2 * width; }

 private:
  BatchNormState state_;
};

// Pointwise shared-weight chain: linear -> batch norm -> ReLU per width.
// The final layer's normalization/activation are configurable; a bare final
// layer carries a bias instead of a norm.
class Mlp {
 public:
  Mlp(std::size_t d_in, std::vector<std::size_t> widths, ParamStore& store,
      const std::string& name, Rng& rng, bool final_activation = true, bool final_norm = true) {
    if (widths.empty()) throw ConfigError("mlp requires at least one width: " + name);
    std::size_t prev = d_in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const bool last = i + 1 == widths.size();
      const bool normed = !last || final_norm;
      const std::string layer_name = name + ".layer" + std::to_string(i);
      linears_.emplace_back(prev, widths[i], /*with_bias=*/!normed, store, layer_name, rng);
      if (normed) {
        norms_.emplace_back(std::in_place, widths[i], store, layer_name + ".bn");
      } else {
        norms_.emplace_back(std::nullopt);
      }
      activated_.push_back(!last || final_activation);
      prev = widths[i];
    }
  }

  Tensor forward(const Tensor& x, bool training) {
    Tensor h = x;
    for (std::size_t i = 0; i < linears_.size(); ++i) {
      h = linears_[i].forward(h);
      if (norms_[i]) h = norms_[i]->forward(h, training);
      if (activated_[i]) h = relu(h);
    }
    return h;
  }

  std::size_t d_out() const { return linears_.back().d_out(); }

  static std::size_t parameter_count(std::size_t d_in, const std::vector<std::size_t>& widths,
                                     bool final_norm = true) {
    std::size_t total = 0, prev = d_in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const bool normed = i + 1 != widths.size() || final_norm;
      total += Linear::parameter_count(prev, widths[i], !normed);
      if (normed) total += BatchNorm::parameter_count(widths[i]);
      prev = widths[i];
    }
    return total;
  }

 private:
  std::vector<Linear> linears_;
  std::vector<std::optional<BatchNorm>> norms_;
  std::vector<bool> activated_;
};

// ---------------------------------------------------------------------------
// Laplacian Unit
// ---------------------------------------------------------------------------

enum class Fusion { kAdd, kConcat, kMul, kNone };

inline const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kAdd: return "add";
    case Fusion::kConcat: return "concat";
    case Fusion::kMul: return "mul";
    case Fusion::kNone: return "none";
  }
  return "?";
}

inline Fusion fusion_from_name(const std::string& s) {
  if (s == "add") return Fusion::kAdd;
  if (s == "concat") return Fusion::kConcat;
  if (s == "mul") return Fusion::kMul;
  if (s == "none") return Fusion::kNone;
  throw ConfigError("unknown fusion mode: " + s + " (expected add|concat|mul|none)");
}

// Every knob the unit exposes: neighbor count, the M and T switches, the
// local/global fusion mode, and the channel widths.
struct LuConfig {
  std::size_t k = 16;
  bool use_m = true;
  bool use_t = true;
  Fusion fusion = Fusion::kAdd;
  std::size_t d_in = 0;
  std::size_t d_out = 0;

  void validate() const {
    if (k < 1) throw ConfigError("laplacian unit requires k >= 1");
    if (d_in == 0 || d_out == 0) throw ConfigError("laplacian unit widths must be positive");
    const bool width_preserving = fusion == Fusion::kAdd || fusion == Fusion::kMul;
    if (width_preserving && d_in != d_out) {
      throw ConfigError(std::string("fusion mode ") + fusion_name(fusion) +
                        " requires d_in == d_out");
    }
    if (!use_m && d_in != d_out) {
      throw ConfigError("identity M requires d_in == d_out");
    }
  }
};

// Captured unit activations for curvature analysis: the incoming features,
// the local displacement, and the fused output, with the neighborhood they
// were computed over.
struct LuProbeRecord {
  std::string name;
  Tensor input;
  Tensor delta;
  Tensor output;
  NeighborIndex neighbors;
};

struct LuProbeSink {
  std::vector<LuProbeRecord> records;

  const LuProbeRecord* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
};

// Residual unit that separates a point's global feature from its local
// neighborhood deviation: the umbrella vector is transformed on its own
// (linear map M, then T = ReLU after batch norm) and fused back with the
// untouched input.
class LaplacianUnit {
 public:
  LaplacianUnit(const LuConfig& cfg, ParamStore& store, const std::string& name, Rng& rng)
      : cfg_(cfg), name_(name) {
    cfg_.validate();
    if (cfg_.use_m) {
      // Near-identity start: small uniform values keep a fresh unit close to
      // pass-through so deep stacks stay trainable.
      const double bound = 0.1 / std::sqrt(static_cast<double>(cfg_.d_in));
      m_weight_ = store.add(name + ".m_weight",
                            Tensor::uniform({cfg_.d_in, cfg_.d_out}, -bound, bound, rng, true));
    }
    if (cfg_.use_t) bn_.emplace(cfg_.d_out, store, name + ".t_bn");
    if (cfg_.fusion == Fusion::kConcat) {
      Tensor restore = Tensor::zeros({cfg_.d_in + cfg_.d_out, cfg_.d_out}, true);
      if (cfg_.d_in == cfg_.d_out) {
        // Stacked identity: a fresh concat unit reproduces the add fusion.
        auto v = restore.mutable_values();
        for (std::size_t c = 0; c < cfg_.d_out; ++c) {
          v[c * cfg_.d_out + c] = 1.0;
          v[(cfg_.d_in + c) * cfg_.d_out + c] = 1.0;
        }
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.d_in + cfg_.d_out));
        auto v = restore.mutable_values();
        for (auto& x : v) x = rng.uniform(-bound, bound);
      }
      restore_weight_ = store.add(name + ".restore_weight", restore);
    }
  }

  Tensor forward(const Tensor& x, const NeighborIndex& nbr, bool training,
                 LuProbeSink* probe = nullptr) {
    if (x.cols() != cfg_.d_in) {
      throw ShapeError("laplacian unit expects width " + std::to_string(cfg_.d_in) + ", got " +
                       std::to_string(x.cols()));
    }
    if (x.rows() != nbr.n) {
      throw ShapeError("laplacian unit: feature rows do not match neighbor index rows");
    }
    Tensor local = umbrella(x, nbr);
    if (cfg_.use_m) local = matmul(local, m_weight_);
    if (cfg_.use_t) local = relu(bn_->forward(local, training));
    Tensor out;
    switch (cfg_.fusion) {
      case Fusion::kAdd:
        out = add(x, local);
        break;
      case Fusion::kConcat:
        out = matmul(concat_cols(x, local), restore_weight_);
        break;
      case Fusion::kMul:
        out = mul(x, local);
        break;
      case Fusion::kNone:
        out = local;
        break;
    }
    if (probe) probe->records.push_back({name_, x, local, out, nbr});
    return out;
  }

  const LuConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }

  static std::size_t parameter_count(const LuConfig& cfg) {
    std::size_t total = 0;
    if (cfg.use_m) total += cfg.d_in * cfg.d_out;
    if (cfg.use_t) total += 2 * cfg.d_out;
    if (cfg.fusion == Fusion::kConcat) total += (cfg.d_in + cfg.d_out) * cfg.d_out;
    return total;
  }

 private:
  LuConfig cfg_;
  std::string name_;
  Tensor m_weight_;
  std::optional<BatchNorm> bn_;
  Tensor restore_weight_;
};

// ---------------------------------------------------------------------------
// Kernel point convolution, depthwise separable
// ---------------------------------------------------------------------------

// Rigid kernel geometry: one point at the origin plus the rest dispersed on a
// sphere of the given radius by deterministic repulsion. The influence
// radius sigma equals the sphere radius.
struct KernelPoints {
  std::vector<double> offsets;  // count x 3, row-major
  double sigma = 1.0;
  std::size_t count = 0;
};

inline KernelPoints make_kernel_points(std::size_t count, double radius) {
  if (count < 1) throw ConfigError("kernel needs at least one point");
  KernelPoints kp;
  kp.count = count;
  kp.sigma = radius;
  kp.offsets.assign(count * 3, 0.0);
  const std::size_t m = count - 1;  // points on the sphere
  if (m == 0) return kp;
  // Fibonacci lattice start.
  const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<double> pts(m * 3);
  for (std::size_t i = 0; i < m; ++i) {
    const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(m);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = 2.0 * 3.14159265358979323846 * static_cast<double>(i) / golden;
    pts[3 * i] = r * std::cos(phi);
    pts[3 * i + 1] = r * std::sin(phi);
    pts[3 * i + 2] = z;
  }
  // Tangential pairwise repulsion, fixed step count, fully deterministic.
  const double step = 0.5 / static_cast<double>(m);
  for (int iter = 0; iter < 200; ++iter) {
    std::vector<double> force(m * 3, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        double d[3] = {pts[3 * i] - pts[3 * j], pts[3 * i + 1] - pts[3 * j + 1],
                       pts[3 * i + 2] - pts[3 * j + 2]};
        const double d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + 1e-12;
        const double inv = 1.0 / (d2 * std::sqrt(d2));
        for (int c = 0; c < 3; ++c) force[3 * i + c] += d[c] * inv;
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      double p[3] = {pts[3 * i] + step * force[3 * i], pts[3 * i + 1] + step * force[3 * i + 1],
                     pts[3 * i + 2] + step * force[3 * i + 2]};
      const double norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
      for (int c = 0; c < 3; ++c) pts[3 * i + c] = p[c] / norm;
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (int c = 0; c < 3; ++c) kp.offsets[3 * (i + 1) + c] = radius * pts[3 * i + c];
  return kp;
}

// Linear correlation between a relative position and one kernel point:
// max(0, 1 - |u - q| / sigma).
inline double kernel_correlation(double ux, double uy, double uz, double qx, double qy, double qz,
                                 double sigma) {
  const double dx = ux - qx, dy = uy - qy, dz = uz - qz;
  const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
  return std::max(0.0, 1.0 - dist / sigma);
}

struct KpconvConfig {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t kernel_count = 15;
  double radius = 0.1;
  std::size_t aug_hidden_layers = 1;
};

// Depthwise separable point convolution: each neighbor feature is augmented
// with its relative position and Euclidean distance, transformed by a shared
// MLP, then aggregated per channel through the kernel-point linear
// correlation corr(u, q) = max(0, 1 - |u - q| / sigma) and a per-kernel
// depthwise weight table.
class KpconvDs {
 public:
  KpconvDs(const KpconvConfig& cfg, ParamStore& store, const std::string& name, Rng& rng)
      : cfg_(cfg),
        aug_mlp_(cfg.d_in + 4, aug_widths(cfg), store, name + ".aug", rng,
                 /*final_activation=*/true, /*final_norm=*/true) {
    KernelPoints kp = make_kernel_points(cfg.kernel_count, cfg.radius);
    kernel_offsets_ = store.add(
        name + ".kernel_offsets",
        Tensor::from_data({cfg.kernel_count, 3}, std::move(kp.offsets)), /*learnable=*/false);
    kernel_sigma_ =
        store.add(name + ".kernel_sigma", Tensor::scalar(kp.sigma), /*learnable=*/false);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.kernel_count));
    depthwise_ = store.add(
        name + ".depthwise",
        Tensor::uniform({cfg.kernel_count, cfg.d_out}, -bound, bound, rng, true));
  }

  Tensor forward(const Tensor& features, const Tensor& positions, const NeighborIndex& nbr,
                 bool training) {
    if (features.cols() != cfg_.d_in) {
      throw ShapeError("kpconv expects width " + std::to_string(cfg_.d_in) + ", got " +
                       std::to_string(features.cols()));
    }
    if (features.rows() != nbr.n || positions.rows() != nbr.n) {
      throw ShapeError("kpconv: rows of features/positions do not match neighbor index");
    }
    const std::size_t n = nbr.n, k = nbr.k, total = n * k;
    const double* pos = positions.values().data();

    // Per-pair geometric augmentation [p_j - p_i ; |p_j - p_i|] and kernel
    // correlations, both pure functions of the geometry.
    std::vector<double> aug(total * 4);
    std::vector<double> corr(total * cfg_.kernel_count);
    const auto ko = kernel_offsets_.values();
    const double sigma = kernel_sigma_.values()[0];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t row = i * k + j;
        const std::size_t src = nbr.indices[row];
        double rel[3] = {pos[3 * src] - pos[3 * i], pos[3 * src + 1] - pos[3 * i + 1],
                         pos[3 * src + 2] - pos[3 * i + 2]};
        aug[row * 4] = rel[0];
        aug[row * 4 + 1] = rel[1];
        aug[row * 4 + 2] = rel[2];
        aug[row * 4 + 3] = std::sqrt(rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]);
        for (std::size_t q = 0; q < cfg_.kernel_count; ++q) {
          corr[row * cfg_.kernel_count + q] = kernel_correlation(
              rel[0], rel[1], rel[2], ko[3 * q], ko[3 * q + 1], ko[3 * q + 2], sigma);
        }
      }
    }

    Tensor gathered = gather_rows(features, nbr.flat());
    Tensor augmented = concat_cols(gathered, Tensor::from_data({total, 4}, std::move(aug)));
    Tensor h = aug_mlp_.forward(augmented, training);

    const std::vector<std::size_t> centers = nbr.centers();
    Tensor out;
    for (std::size_t q = 0; q < cfg_.kernel_count; ++q) {
      std::vector<double> col(total);
      for (std::size_t row = 0; row < total; ++row) col[row] = corr[row * cfg_.kernel_count + q];
      Tensor weighted = scale_rows(h, Tensor::from_data({total}, std::move(col)));
      Tensor pooled = scatter_sum(weighted, centers, n);
      Tensor term = mul_rowvec(pooled, gather_rows(depthwise_, {q}));
      out = out.defined() ? add(out, term) : term;
    }
    return out;
  }

  static std::vector<std::size_t> aug_widths(const KpconvConfig& cfg) {
    std::vector<std::size_t> widths(cfg.aug_hidden_layers, cfg.d_out);
    widths.push_back(cfg.d_out);
    return widths;
  }

  static std::size_t parameter_count(const KpconvConfig& cfg) {
    return Mlp::parameter_count(cfg.d_in + 4, aug_widths(cfg)) + cfg.kernel_count * cfg.d_out;
  }

  const KpconvConfig& config() const { return cfg_; }

 private:
  KpconvConfig cfg_;
  Mlp aug_mlp_;
  Tensor kernel_offsets_;
  Tensor kernel_sigma_;
  Tensor depthwise_;
};

// ---------------------------------------------------------------------------
// Bottleneck residual block
// ---------------------------------------------------------------------------

// Channel-reducing residual block: MLP down to d / ratio, convolve at the
// reduced width, MLP back up, add the input, ReLU.
class BottleneckBlock {
 public:
  BottleneckBlock(std::size_t width, std::size_t ratio, const KpconvConfig& conv_template,
                  ParamStore& store, const std::string& name, Rng& rng)
      : width_(width), reduced_(check_ratio(width, ratio)),
        reduce_(width, {reduced_}, store, name + ".reduce", rng),
        conv_(make_conv_config(conv_template, reduced_), store, name + ".conv", rng),
        conv_bn_(reduced_, store, name + ".conv.bn"),
        restore_(reduced_, {width}, store, name + ".restore", rng,
                 /*final_activation=*/false, /*final_norm=*/true) {}

  Tensor forward(const Tensor& x, const Tensor& positions, const NeighborIndex& nbr,
                 bool training) {
    Tensor h = reduce_.forward(x, training);
    h = relu(conv_bn_.forward(conv_.forward(h, positions, nbr, training), training));
    h = restore_.forward(h, training);
    return relu(add(x, h));
  }

  static std::size_t parameter_count(std::size_t width, std::size_t ratio,
                                     const KpconvConfig& conv_template) {
    const std::size_t reduced = check_ratio(width, ratio);
    return Mlp::parameter_count(width, {reduced}) +
           KpconvDs::parameter_count(make_conv_config(conv_template, reduced)) +
           BatchNorm::parameter_count(reduced) + Mlp::parameter_count(reduced, {width});
  }

 private:
  static std::size_t check_ratio(std::size_t width, std::size_t ratio) {
    if (ratio == 0 || width % ratio != 0) {
      throw ConfigError("bottleneck width " + std::to_string(width) +
                        " is not divisible by reduction ratio " + std::to_string(ratio));
    }
    return width / ratio;
  }

  static KpconvConfig make_conv_config(KpconvConfig base, std::size_t reduced) {
    base.d_in = reduced;
    base.d_out = reduced;
    return base;
  }

  std::size_t width_;
  std::size_t reduced_;
  Mlp reduce_;
  KpconvDs conv_;
  BatchNorm conv_bn_;
  Mlp restore_;
};

}  // namespace pointlap
