#include <gtest/gtest.h>

#include <sstream>

#include "pointlap/config.hpp"
#include "pointlap/threading.hpp"

namespace pointlap {
namespace {

TEST(Config, DefaultsSerializeAndParseBack) {
  ExperimentConfig defaults;
  const std::string text = serialize_config(defaults);
  std::istringstream in(text);
  ExperimentConfig parsed = parse_config(in, "<memory>");
  EXPECT_EQ(serialize_config(parsed), text);
}

TEST(Config, UnknownKeyNamesTheKey) {
  ExperimentConfig cfg;
  try {
    apply_override(cfg, "lu_per_stagee=0");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lu_per_stagee"), std::string::npos);
  }
}

TEST(Config, OverridesApplyToExistingKeys) {
  ExperimentConfig cfg;
  apply_override(cfg, "lu_per_stage=0");
  EXPECT_EQ(cfg.net.lu_per_stage, 0u);
  apply_override(cfg, "lu_fusion=concat");
  EXPECT_EQ(cfg.net.lu_fusion, Fusion::kConcat);
  apply_override(cfg, "stage_points=100,50,25,12,6");
  EXPECT_EQ(cfg.net.stage_points[0], 100u);
  EXPECT_EQ(cfg.net.stage_points[4], 6u);
  apply_override(cfg, "lu_stages=1,1,0,0,0");
  EXPECT_TRUE(cfg.net.lu_stages[1]);
  EXPECT_FALSE(cfg.net.lu_stages[2]);
  apply_override(cfg, "task=segmentation");
  EXPECT_EQ(cfg.data.task, Task::kSegmentation);
}

TEST(Config, MalformedValuesAreParseErrors) {
  ExperimentConfig cfg;
  EXPECT_THROW(apply_override(cfg, "lr=fast"), ParseError);
  EXPECT_THROW(apply_override(cfg, "epochs=-3"), ParseError);
  EXPECT_THROW(apply_override(cfg, "stage_widths=1,2,3"), ParseError);
  EXPECT_THROW(apply_override(cfg, "lu_use_m=maybe"), ParseError);
  EXPECT_THROW(apply_override(cfg, "no_equals_sign"), ConfigError);
}

TEST(Config, ResolvedDerivesTaskDependentFields) {
  ExperimentConfig cfg;
  ExperimentConfig cls = cfg.resolved();
  EXPECT_EQ(cls.net.task, Task::kClassification);
  EXPECT_EQ(cls.net.num_classes, 3u);  // sphere, cube, torus
  EXPECT_EQ(cls.net.num_categories, 0u);

  apply_override(cfg, "task=segmentation");
  ExperimentConfig seg = cfg.resolved();
  EXPECT_EQ(seg.net.task, Task::kSegmentation);
  EXPECT_EQ(seg.net.num_classes, 2u);
  EXPECT_EQ(seg.net.num_categories, 1u);
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  std::istringstream in("# a comment\n\n  lr = 0.05\n# another\nepochs = 12\n");
  ExperimentConfig cfg = parse_config(in, "<memory>");
  EXPECT_DOUBLE_EQ(cfg.train.lr, 0.05);
  EXPECT_EQ(cfg.train.epochs, 12u);
}

TEST(Threading, RowParallelKernelsAreBitwiseIdenticalAcrossThreadCounts) {
  Rng rng(3);
  Tensor a = Tensor::uniform({300, 40}, -1, 1, rng);
  Tensor b = Tensor::uniform({40, 32}, -1, 1, rng);
  set_thread_count(1);
  Tensor c1 = matmul(a, b);
  set_thread_count(4);
  Tensor c4 = matmul(a, b);
  set_thread_count(1);
  for (std::size_t i = 0; i < c1.numel(); ++i) EXPECT_EQ(c1.values()[i], c4.values()[i]);

  std::vector<double> pts(900);
  for (auto& v : pts) v = rng.uniform(-1, 1);
  Tensor p = Tensor::from_data({300, 3}, std::move(pts));
  NeighborIndex n1 = knn_brute_force(p, p, 8);
  set_thread_count(3);
  NeighborIndex n3 = knn_brute_force(p, p, 8);
  set_thread_count(1);
  EXPECT_EQ(n1.indices, n3.indices);
}

}  // namespace
}  // namespace pointlap
