#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gradcheck.hpp"
#include "pointlap/geometry.hpp"
#include "pointlap/laplace.hpp"
#include "pointlap/layers.hpp"

namespace pointlap {
namespace {

using testing::gradcheck;
using testing::probe_weights;

Tensor random_points(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> p(n * 3);
  for (auto& v : p) v = rng.uniform(lo, hi);
  return Tensor::from_data({n, 3}, std::move(p));
}

Tensor random_features(std::size_t n, std::size_t d, Rng& rng, bool grad = false) {
  std::vector<double> f(n * d);
  for (auto& v : f) v = rng.uniform(-1.5, 1.5);
  return Tensor::from_data({n, d}, std::move(f), grad);
}

void fill_param(ParamStore& store, const std::string& name, double value) {
  auto v = store.get(name).mutable_values();
  std::fill(v.begin(), v.end(), value);
}

std::vector<Tensor> learnables(const ParamStore& store) {
  std::vector<Tensor> out;
  for (const auto& [name, e] : store.entries()) {
    if (e.learnable) out.push_back(e.tensor);
  }
  return out;
}

// Layer parameters in generic position for finite-difference checks (fresh
// batch-norm layers sit exactly on the relu kink).
std::vector<Tensor> learnables_randomized(const ParamStore& store, Rng& rng) {
  std::vector<Tensor> out = learnables(store);
  testing::randomize_values(out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Laplacian Unit
// ---------------------------------------------------------------------------

TEST(LaplacianUnit, ZeroLocalBranchIsExactPassThrough) {
  Rng rng(3);
  LuConfig cfg;
  cfg.k = 4;
  cfg.d_in = cfg.d_out = 5;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);
  fill_param(store, "lu.m_weight", 0.0);  // beta is already zero

  Tensor pts = random_points(12, rng);
  NeighborIndex nbr = knn(pts, pts, 4);
  Tensor x = random_features(12, 5, rng);
  Tensor out = lu.forward(x, nbr, true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.values()[i], x.values()[i]);
}

TEST(LaplacianUnit, ConstantFieldIsFixedPoint) {
  Rng rng(5);
  LuConfig cfg;
  cfg.k = 4;
  cfg.d_in = cfg.d_out = 3;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);

  Tensor pts = random_points(10, rng);
  NeighborIndex nbr = knn(pts, pts, 4);
  Tensor x = Tensor::filled({10, 3}, 2.5);
  Tensor out = lu.forward(x, nbr, true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.values()[i], x.values()[i]);
}

TEST(LaplacianUnit, IdentityConfigurationIsOneFlowStep) {
  // M and T disabled with additive fusion applied to the positions themselves
  // is a single explicit integration step of size 1.
  Rng rng(7);
  LuConfig cfg;
  cfg.k = 6;
  cfg.use_m = false;
  cfg.use_t = false;
  cfg.d_in = cfg.d_out = 3;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);

  Tensor pts = random_points(40, rng);
  NeighborIndex nbr = knn(pts, pts, 6);
  Tensor lu_out = lu.forward(pts, nbr, true);
  Tensor flow_out = mean_curvature_flow(pts, nbr, 1.0, 1);
  for (std::size_t i = 0; i < pts.numel(); ++i) {
    EXPECT_NEAR(lu_out.values()[i], flow_out.values()[i], 1e-12);
  }
}

TEST(LaplacianUnit, DefaultConfigurationMatchesTheReferenceVariant) {
  // Defaults: M and T enabled, additive fusion, 16 neighbors.
  LuConfig cfg;
  EXPECT_TRUE(cfg.use_m);
  EXPECT_TRUE(cfg.use_t);
  EXPECT_EQ(cfg.fusion, Fusion::kAdd);
  EXPECT_EQ(cfg.k, 16u);
}

TEST(LaplacianUnit, ParameterCountIsLean) {
  Rng rng(9);
  LuConfig cfg;
  cfg.d_in = 7;
  cfg.d_out = 7;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);
  EXPECT_EQ(store.learnable_scalar_count(), 7u * 7u + 2u * 7u);
  EXPECT_EQ(LaplacianUnit::parameter_count(cfg), 7u * 7u + 2u * 7u);

  LuConfig no_m = cfg;
  no_m.use_m = false;
  EXPECT_EQ(LaplacianUnit::parameter_count(no_m), 2u * 7u);
  LuConfig no_t = cfg;
  no_t.use_t = false;
  EXPECT_EQ(LaplacianUnit::parameter_count(no_t), 7u * 7u);
}

TEST(LaplacianUnit, AddIsConcatWithStackedIdentityRestore) {
  Rng rng(11);
  LuConfig add_cfg;
  add_cfg.k = 4;
  add_cfg.d_in = add_cfg.d_out = 4;
  LuConfig cat_cfg = add_cfg;
  cat_cfg.fusion = Fusion::kConcat;

  ParamStore add_store, cat_store;
  Rng rng_a(42), rng_b(42);
  LaplacianUnit lu_add(add_cfg, add_store, "lu", rng_a);
  LaplacianUnit lu_cat(cat_cfg, cat_store, "lu", rng_b);
  // Same M and BN; the concat restore map is the stacked identity by
  // construction.

  Tensor pts = random_points(15, rng);
  NeighborIndex nbr = knn(pts, pts, 4);
  Tensor x = random_features(15, 4, rng);
  Tensor a = lu_add.forward(x, nbr, true);
  Tensor b = lu_cat.forward(x, nbr, true);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(LaplacianUnit, WidthMismatchIsShapeError) {
  Rng rng(13);
  LuConfig cfg;
  cfg.d_in = cfg.d_out = 4;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);
  Tensor pts = random_points(6, rng);
  NeighborIndex nbr = knn(pts, pts, 2);
  Tensor x = random_features(6, 5, rng);
  EXPECT_THROW(lu.forward(x, nbr, true), ShapeError);
}

TEST(LaplacianUnit, InvalidConfigurations) {
  LuConfig cfg;
  cfg.d_in = 4;
  cfg.d_out = 6;
  cfg.fusion = Fusion::kAdd;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.fusion = Fusion::kMul;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.fusion = Fusion::kNone;
  EXPECT_NO_THROW(cfg.validate());
  cfg.use_m = false;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LaplacianUnit, GradientsForAllFusionModes) {
  Rng rng(17);
  Tensor pts = random_points(12, rng);
  NeighborIndex nbr = knn(pts, pts, 4);
  for (Fusion fusion : {Fusion::kAdd, Fusion::kConcat, Fusion::kMul, Fusion::kNone}) {
    LuConfig cfg;
    cfg.k = 4;
    cfg.fusion = fusion;
    cfg.d_in = cfg.d_out = 3;
    ParamStore store;
    LaplacianUnit lu(cfg, store, std::string("lu_") + fusion_name(fusion), rng);
    Tensor x = random_features(12, 3, rng, true);
    Tensor w = probe_weights({12, 3}, rng);
    std::vector<Tensor> inputs = learnables_randomized(store, rng);
    inputs.push_back(x);
    auto result = gradcheck([&] { return sum_all(mul(lu.forward(x, nbr, true), w)); }, inputs);
    EXPECT_TRUE(result.ok) << fusion_name(fusion) << ": " << result.detail;
  }
}

TEST(LaplacianUnit, NeighborPermutationInvariance) {
  Rng rng(19);
  LuConfig cfg;
  cfg.k = 5;
  cfg.d_in = cfg.d_out = 4;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);
  Tensor pts = random_points(18, rng);
  NeighborIndex nbr = knn(pts, pts, 5);
  NeighborIndex shuffled = nbr;
  Rng perm_rng(99);
  for (std::size_t i = 0; i < 18; ++i) {
    for (std::size_t j = 4; j > 0; --j) {
      std::swap(shuffled.indices[i * 5 + j], shuffled.indices[i * 5 + perm_rng.index(j + 1)]);
    }
  }
  Tensor x = random_features(18, 4, rng);
  Tensor a = lu.forward(x, nbr, true);
  Tensor b = lu.forward(x, shuffled, true);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
  }
}

TEST(LaplacianUnit, PointOrderEquivariance) {
  Rng rng(23);
  LuConfig cfg;
  cfg.k = 4;
  cfg.d_in = cfg.d_out = 3;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);

  const std::size_t n = 14;
  Tensor pts = random_points(n, rng);
  Tensor x = random_features(n, 3, rng);
  NeighborIndex nbr = knn(pts, pts, 4);
  Tensor out = lu.forward(x, nbr, true);

  // Apply a permutation to the points and remap the neighbor lists.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng perm_rng(7);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[perm_rng.index(i + 1)]);
  std::vector<std::size_t> inverse(n);
  for (std::size_t i = 0; i < n; ++i) inverse[perm[i]] = i;

  std::vector<double> ppts(n * 3), px(n * 3);
  NeighborIndex pnbr;
  pnbr.n = n;
  pnbr.k = 4;
  pnbr.indices.resize(n * 4);
  for (std::size_t new_i = 0; new_i < n; ++new_i) {
    const std::size_t old_i = perm[new_i];
    for (int c = 0; c < 3; ++c) {
      ppts[new_i * 3 + c] = pts.at(old_i, c);
      px[new_i * 3 + c] = x.at(old_i, c);
    }
    for (std::size_t j = 0; j < 4; ++j) pnbr.indices[new_i * 4 + j] = inverse[nbr.at(old_i, j)];
  }
  Tensor out_p = lu.forward(Tensor::from_data({n, 3}, std::move(px)), pnbr, true);
  for (std::size_t new_i = 0; new_i < n; ++new_i) {
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(out_p.at(new_i, c), out.at(perm[new_i], c), 1e-12);
    }
  }
}

TEST(LaplacianUnit, FreshUnitHasNearZeroLocalResponseAtInference) {
  // Near-identity initialization: with fresh running statistics the local
  // branch stays a small perturbation of the input.
  Rng rng(101);
  LuConfig cfg;
  cfg.k = 5;
  cfg.d_in = cfg.d_out = 6;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "lu", rng);
  Tensor pts = random_points(30, rng);
  NeighborIndex nbr = knn(pts, pts, 5);
  Tensor x = random_features(30, 6, rng);
  LuProbeSink sink;
  lu.forward(x, nbr, /*training=*/false, &sink);
  const Tensor& delta = sink.records.at(0).delta;
  for (std::size_t i = 0; i < 30; ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < 6; ++c) norm += delta.at(i, c) * delta.at(i, c);
    EXPECT_LT(std::sqrt(norm), 0.15);
  }
}

TEST(LaplacianUnit, ProbeCapturesInputDeltaOutput) {
  Rng rng(29);
  LuConfig cfg;
  cfg.k = 3;
  cfg.d_in = cfg.d_out = 2;
  ParamStore store;
  LaplacianUnit lu(cfg, store, "enc.lu0", rng);
  Tensor pts = random_points(9, rng);
  NeighborIndex nbr = knn(pts, pts, 3);
  Tensor x = random_features(9, 2, rng);
  LuProbeSink sink;
  Tensor out = lu.forward(x, nbr, true, &sink);
  ASSERT_EQ(sink.records.size(), 1u);
  const LuProbeRecord& rec = sink.records[0];
  EXPECT_EQ(rec.name, "enc.lu0");
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(rec.input.values()[i], x.values()[i]);
    EXPECT_EQ(rec.output.values()[i], out.values()[i]);
    // Additive fusion: output - input == delta.
    EXPECT_NEAR(rec.delta.values()[i], out.values()[i] - x.values()[i], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

TEST(MlpLayer, IdentityChainReducesToRelu) {
  Rng rng(31);
  ParamStore store;
  Mlp mlp(3, {3}, store, "mlp", rng);
  // Identity weights; input already normalized per channel.
  {
    auto w = store.get("mlp.layer0.weight").mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
    for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  }
  const std::size_t n = 64;
  std::vector<double> xv(n * 3);
  Rng data_rng(5);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      xv[i * 3 + c] = data_rng.normal();
      mean += xv[i * 3 + c];
    }
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) {
      xv[i * 3 + c] -= mean;
      var += xv[i * 3 + c] * xv[i * 3 + c];
    }
    var /= n;
    for (std::size_t i = 0; i < n; ++i) xv[i * 3 + c] /= std::sqrt(var);
  }
  Tensor x = Tensor::from_data({n, 3}, xv);
  Tensor out = mlp.forward(x, true);
  for (std::size_t i = 0; i < n * 3; ++i) {
    EXPECT_NEAR(out.values()[i], std::max(0.0, xv[i]), 1e-4);
  }
}

TEST(MlpLayer, ZeroWeightsAnnihilate) {
  Rng rng(37);
  ParamStore store;
  Mlp mlp(4, {5, 3}, store, "mlp", rng);
  fill_param(store, "mlp.layer0.weight", 0.0);
  fill_param(store, "mlp.layer1.weight", 0.0);
  Tensor x = random_features(10, 4, rng);
  Tensor out = mlp.forward(x, true);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(MlpLayer, FiniteDifferenceGradients) {
  Rng rng(41);
  ParamStore store;
  Mlp mlp(3, {4, 2}, store, "mlp", rng, /*final_activation=*/false, /*final_norm=*/false);
  Tensor x = random_features(8, 3, rng, true);
  Tensor w = probe_weights({8, 2}, rng);
  std::vector<Tensor> inputs = learnables_randomized(store, rng);
  inputs.push_back(x);
  auto result = gradcheck([&] { return sum_all(mul(mlp.forward(x, true), w)); }, inputs);
  EXPECT_TRUE(result.ok) << result.detail;
}

// ---------------------------------------------------------------------------
// KPConv-DS
// ---------------------------------------------------------------------------

TEST(KernelPointsGeometry, OriginPlusDispersedSphere) {
  KernelPoints kp = make_kernel_points(15, 0.3);
  EXPECT_EQ(kp.count, 15u);
  EXPECT_DOUBLE_EQ(kp.sigma, 0.3);
  // First point at the origin.
  for (int c = 0; c < 3; ++c) EXPECT_EQ(kp.offsets[c], 0.0);
  // Others on the sphere of radius 0.3, pairwise distinct.
  for (std::size_t i = 1; i < 15; ++i) {
    const double r = std::hypot(kp.offsets[3 * i], kp.offsets[3 * i + 1], kp.offsets[3 * i + 2]);
    EXPECT_NEAR(r, 0.3, 1e-9);
    for (std::size_t j = i + 1; j < 15; ++j) {
      const double d = std::hypot(kp.offsets[3 * i] - kp.offsets[3 * j],
                                  kp.offsets[3 * i + 1] - kp.offsets[3 * j + 1],
                                  kp.offsets[3 * i + 2] - kp.offsets[3 * j + 2]);
      EXPECT_GT(d, 1e-3);
    }
  }
  // Deterministic.
  KernelPoints again = make_kernel_points(15, 0.3);
  for (std::size_t i = 0; i < kp.offsets.size(); ++i) EXPECT_EQ(kp.offsets[i], again.offsets[i]);
}

TEST(KernelCorrelation, CoincidentNeighborAtOriginKernelHasFullWeight) {
  EXPECT_DOUBLE_EQ(kernel_correlation(0, 0, 0, 0, 0, 0, 0.5), 1.0);
}

TEST(KernelCorrelation, BeyondSigmaIsClippedToZero) {
  EXPECT_DOUBLE_EQ(kernel_correlation(0.6, 0, 0, 0, 0, 0, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(kernel_correlation(2.0, 1.0, 0, 0.1, 0, 0, 0.5), 0.0);
}

TEST(KpconvDsLayer, FarNeighborContributesNothing) {
  Rng rng(43);
  KpconvConfig cfg;
  cfg.d_in = cfg.d_out = 2;
  cfg.kernel_count = 3;
  cfg.radius = 0.2;
  ParamStore store;
  KpconvDs conv(cfg, store, "conv", rng);
  // Two points far beyond sigma of every kernel point; each one's only
  // neighbor is the other.
  Tensor pts = Tensor::from_data({2, 3}, {0, 0, 0, 10, 0, 0});
  Tensor x = random_features(2, 2, rng);
  NeighborIndex nbr;
  nbr.n = 2;
  nbr.k = 1;
  nbr.indices = {1, 0};
  Tensor out = conv.forward(x, pts, nbr, true);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(KpconvDsLayer, MatchesDirectTripleLoopEvaluation) {
  Rng rng(47);
  KpconvConfig cfg;
  cfg.d_in = cfg.d_out = 2;
  cfg.kernel_count = 2;
  cfg.radius = 1.5;
  cfg.aug_hidden_layers = 1;
  ParamStore store;
  KpconvDs conv(cfg, store, "conv", rng);

  Tensor pts = Tensor::from_data({3, 3}, {0, 0, 0, 0.4, 0, 0, 0, 0.7, 0});
  Tensor x = random_features(3, 2, rng);
  NeighborIndex nbr = knn(pts, pts, 3);
  Tensor out = conv.forward(x, pts, nbr, true);

  // Independent re-evaluation with plain loops: augmented features, the
  // two-layer MLP with training-mode batch norm, then the depthwise
  // kernel-correlation aggregation.
  const std::size_t n = 3, k = 3, rows = n * k;
  std::vector<std::vector<double>> aug(rows, std::vector<double>(6));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = nbr.at(i, j);
      auto& row = aug[i * k + j];
      row[0] = x.at(src, 0);
      row[1] = x.at(src, 1);
      for (int c = 0; c < 3; ++c) row[2 + c] = pts.at(src, c) - pts.at(i, c);
      row[5] = std::hypot(row[2], row[3], row[4]);
    }
  }
  auto apply_layer = [&](const std::vector<std::vector<double>>& in, const std::string& name,
                         std::size_t d_in, std::size_t d_out) {
    Tensor weight = store.get(name + ".weight");
    Tensor gamma = store.get(name + ".bn.gamma");
    Tensor beta = store.get(name + ".bn.beta");
    std::vector<std::vector<double>> lin(in.size(), std::vector<double>(d_out, 0.0));
    for (std::size_t r = 0; r < in.size(); ++r)
      for (std::size_t c = 0; c < d_out; ++c)
        for (std::size_t l = 0; l < d_in; ++l) lin[r][c] += in[r][l] * weight.at(l, c);
    // training-mode batch normalization over the rows
    for (std::size_t c = 0; c < d_out; ++c) {
      double mean = 0.0, var = 0.0;
      for (const auto& r : lin) mean += r[c];
      mean /= static_cast<double>(lin.size());
      for (const auto& r : lin) var += (r[c] - mean) * (r[c] - mean);
      var /= static_cast<double>(lin.size());
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      for (auto& r : lin) {
        r[c] = std::max(0.0, gamma.at(c) * (r[c] - mean) * inv + beta.at(c));
      }
    }
    return lin;
  };
  auto h1 = apply_layer(aug, "conv.aug.layer0", 6, 2);
  auto h = apply_layer(h1, "conv.aug.layer1", 2, 2);

  Tensor offsets = store.get("conv.kernel_offsets");
  const double sigma = store.get("conv.kernel_sigma").at(0);
  Tensor depthwise = store.get("conv.depthwise");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t src = nbr.at(i, j);
        double rel[3];
        for (int a = 0; a < 3; ++a) rel[a] = pts.at(src, a) - pts.at(i, a);
        for (std::size_t q = 0; q < 2; ++q) {
          const double corr = kernel_correlation(rel[0], rel[1], rel[2], offsets.at(q, 0),
                                                 offsets.at(q, 1), offsets.at(q, 2), sigma);
          acc += corr * depthwise.at(q, c) * h[i * k + j][c];
        }
      }
      EXPECT_NEAR(out.at(i, c), acc, 1e-10) << "point " << i << " channel " << c;
    }
  }
}

TEST(KpconvDsLayer, FiniteDifferenceGradients) {
  Rng rng(53);
  KpconvConfig cfg;
  cfg.d_in = 3;
  cfg.d_out = 4;
  cfg.kernel_count = 5;
  cfg.radius = 0.8;
  ParamStore store;
  KpconvDs conv(cfg, store, "conv", rng);
  Tensor pts = random_points(10, rng, -0.5, 0.5);
  NeighborIndex nbr = knn(pts, pts, 4);
  Tensor x = random_features(10, 3, rng, true);
  Tensor w = probe_weights({10, 4}, rng);
  std::vector<Tensor> inputs = learnables_randomized(store, rng);
  inputs.push_back(x);
  auto result =
      gradcheck([&] { return sum_all(mul(conv.forward(x, pts, nbr, true), w)); }, inputs);
  EXPECT_TRUE(result.ok) << result.detail;
}

TEST(KpconvDsLayer, NeighborPermutationInvariance) {
  Rng rng(59);
  KpconvConfig cfg;
  cfg.d_in = cfg.d_out = 3;
  cfg.kernel_count = 4;
  cfg.radius = 0.6;
  ParamStore store;
  KpconvDs conv(cfg, store, "conv", rng);
  Tensor pts = random_points(16, rng, -0.4, 0.4);
  NeighborIndex nbr = knn(pts, pts, 5);
  NeighborIndex shuffled = nbr;
  for (std::size_t i = 0; i < 16; ++i) {
    std::reverse(shuffled.indices.begin() + static_cast<std::ptrdiff_t>(i * 5),
                 shuffled.indices.begin() + static_cast<std::ptrdiff_t>((i + 1) * 5));
  }
  Tensor x = random_features(16, 3, rng);
  Tensor a = conv.forward(x, pts, nbr, true);
  Tensor b = conv.forward(x, pts, shuffled, true);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Bottleneck block
// ---------------------------------------------------------------------------

TEST(Bottleneck, DeadResidualBranchIsReluOfInput) {
  Rng rng(61);
  KpconvConfig conv_template;
  conv_template.kernel_count = 4;
  conv_template.radius = 0.5;
  ParamStore store;
  BottleneckBlock block(8, 4, conv_template, store, "block", rng);
  // Zero every weight; all beta values start at zero.
  for (const auto& [name, e] : store.entries()) {
    if (name.ends_with(".weight") || name.ends_with(".depthwise")) {
      Tensor t = e.tensor;
      auto v = t.mutable_values();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
  Tensor pts = random_points(12, rng);
  NeighborIndex nbr = knn(pts, pts, 4);
  Tensor x = random_features(12, 8, rng);
  Tensor out = block.forward(x, pts, nbr, true);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(out.values()[i], std::max(0.0, x.values()[i]));
  }
}

TEST(Bottleneck, ParameterCountMatchesClosedForm) {
  Rng rng(67);
  KpconvConfig conv_template;
  conv_template.kernel_count = 15;
  conv_template.radius = 0.4;
  ParamStore store;
  BottleneckBlock block(64, 4, conv_template, store, "block", rng);
  EXPECT_EQ(store.learnable_scalar_count(),
            BottleneckBlock::parameter_count(64, 4, conv_template));

  // Spelled out from the block definition: reduce 64->16, conv at 16 with a
  // 20-wide augmented input and one 16-wide hidden layer, restore 16->64.
  const std::size_t reduce = 64 * 16 + 2 * 16;
  const std::size_t aug_mlp = 20 * 16 + 2 * 16 + 16 * 16 + 2 * 16;
  const std::size_t depthwise = 15 * 16;
  const std::size_t conv_bn = 2 * 16;
  const std::size_t restore = 16 * 64 + 2 * 64;
  EXPECT_EQ(store.learnable_scalar_count(), reduce + aug_mlp + depthwise + conv_bn + restore);
}

TEST(Bottleneck, IndivisibleWidthIsConfigError) {
  Rng rng(71);
  KpconvConfig conv_template;
  ParamStore store;
  EXPECT_THROW(BottleneckBlock(10, 4, conv_template, store, "block", rng), ConfigError);
}

TEST(Bottleneck, FiniteDifferenceGradientsOverEveryParameter) {
  Rng rng(73);
  KpconvConfig conv_template;
  conv_template.kernel_count = 3;
  conv_template.radius = 0.7;
  ParamStore store;
  BottleneckBlock block(4, 4, conv_template, store, "block", rng);
  Tensor pts = random_points(10, rng, -0.5, 0.5);
  NeighborIndex nbr = knn(pts, pts, 3);
  Tensor x = random_features(10, 4, rng, true);
  Tensor w = probe_weights({10, 4}, rng);
  std::vector<Tensor> inputs = learnables_randomized(store, rng);
  inputs.push_back(x);
  auto result =
      gradcheck([&] { return sum_all(mul(block.forward(x, pts, nbr, true), w)); }, inputs);
  EXPECT_TRUE(result.ok) << result.detail;
}

}  // namespace
}  // namespace pointlap
