#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "ptnet/backbone.hpp"
#include "ptnet/errors.hpp"

using namespace ptnet;
using ptnet::testing::random_tensor;

namespace {

struct Fixture {
  ParamStore store;
  Backbone backbone;
  explicit Fixture(BackboneConfig cfg = {}, std::uint64_t seed = 1) {
    Rng rng(seed);
    backbone = Backbone::create(store, cfg, rng);
  }
};

}  // namespace

TEST(Backbone, GrayscaleShapeContract) {
  BackboneConfig cfg;
  cfg.channels = 1;
  Fixture f(cfg);
  Rng rng(2);
  auto pyr = f.backbone.encode(random_tensor({32, 32, 1}, rng, 0, 1));
  EXPECT_EQ(pyr.grid, 4u);
  for (const auto& lv : pyr.levels) EXPECT_EQ(lv.shape(), (Shape{16, 32}));
}

TEST(Backbone, RejectsBadDivisibility) {
  BackboneConfig cfg;
  cfg.image_size = 30;
  ParamStore store;
  Rng rng(1);
  EXPECT_THROW(Backbone::create(store, cfg, rng), ConfigError);
  Fixture f;
  EXPECT_THROW(f.backbone.encode(Tensor::zeros({24, 24, 3})), ShapeError);
}

TEST(Backbone, PhaseNeverEntersComputation) {
  Fixture f;
  Rng rng(3);
  auto img = random_tensor({32, 32, 3}, rng, 0, 1);
  auto a = f.backbone.encode(img, 1);
  auto b = f.backbone.encode(img, 2);
  for (std::size_t i = 0; i < kLevels; ++i) EXPECT_EQ(a.levels[i].to_vector(), b.levels[i].to_vector());
}

TEST(Backbone, PairOfIdenticalImagesGivesEqualPyramids) {
  Fixture f;
  Rng rng(4);
  auto img = random_tensor({32, 32, 3}, rng, 0, 1);
  auto [p1, p2] = f.backbone.pyramid_pair(img, img);
  for (std::size_t i = 0; i < kLevels; ++i) EXPECT_EQ(p1.levels[i].to_vector(), p2.levels[i].to_vector());
}

TEST(Backbone, SwappingInputsSwapsOutputs) {
  Fixture f;
  Rng rng(5);
  auto a = random_tensor({32, 32, 3}, rng, 0, 1);
  auto b = random_tensor({32, 32, 3}, rng, 0, 1);
  auto [x1, x2] = f.backbone.pyramid_pair(a, b);
  auto [y1, y2] = f.backbone.pyramid_pair(b, a);
  for (std::size_t i = 0; i < kLevels; ++i) {
    EXPECT_EQ(x1.levels[i].to_vector(), y2.levels[i].to_vector());
    EXPECT_EQ(x2.levels[i].to_vector(), y1.levels[i].to_vector());
  }
}

TEST(Backbone, MismatchedPairThrows) {
  Fixture f;
  EXPECT_THROW(f.backbone.pyramid_pair(Tensor::zeros({32, 32, 3}), Tensor::zeros({32, 32, 1})), ShapeError);
}

TEST(Backbone, BatchMatchesSingleCalls) {
  Fixture f;
  Rng rng(6);
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (int i = 0; i < 2; ++i) pairs.emplace_back(random_tensor({32, 32, 3}, rng, 0, 1), random_tensor({32, 32, 3}, rng, 0, 1));
  auto batch = f.backbone.pyramid_pairs(pairs);
  ASSERT_EQ(batch.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    auto [p1, p2] = f.backbone.pyramid_pair(pairs[s].first, pairs[s].second);
    for (std::size_t i = 0; i < kLevels; ++i) {
      EXPECT_EQ(batch[s].first.levels[i].to_vector(), p1.levels[i].to_vector());
      EXPECT_EQ(batch[s].second.levels[i].to_vector(), p2.levels[i].to_vector());
    }
  }
}

TEST(Backbone, GradientReachesPatchEmbedding) {
  Fixture f;
  Rng rng(7);
  auto img = random_tensor({32, 32, 3}, rng, 0, 1);
  auto w = f.backbone.patch_embedding().weight;
  auto rep = ptnet::testing::gradcheck_leaves(
      {w}, [&] { return ptnet::testing::probe_sum(f.backbone.encode(img).levels[3], 8); }, 10, 9);
  EXPECT_LE(rep.max_rel_error, 1e-4) << rep.worst;
  f.store.zero_grad();
  backward(sum_all(f.backbone.encode(img).levels[3]));
  double norm = 0;
  for (double g : w.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Backbone, LevelDependsOnlyOnEarlierBlocks) {
  Fixture f;
  Rng rng(10);
  auto img = random_tensor({32, 32, 3}, rng, 0, 1);
  auto before = f.backbone.encode(img);
  for (auto e : f.store.entries()) {
    if (e.name.rfind("backbone.block4.", 0) == 0) {
      for (auto& v : e.value.mutable_data()) v += 0.5;
    }
  }
  auto after = f.backbone.encode(img);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(before.levels[i].to_vector(), after.levels[i].to_vector());
  EXPECT_NE(before.levels[3].to_vector(), after.levels[3].to_vector());
}

TEST(Backbone, SameSeedSameParameters) {
  Fixture a({}, 11), b({}, 11);
  ASSERT_EQ(a.store.size(), b.store.size());
  for (std::size_t i = 0; i < a.store.size(); ++i) {
    EXPECT_EQ(a.store.entries()[i].value.to_vector(), b.store.entries()[i].value.to_vector());
  }
}
