#include <gtest/gtest.h>

#include "ptnet/config.hpp"
#include "ptnet/errors.hpp"

using namespace ptnet;

TEST(RunConfig, EmptyTextGivesDefaults) {
  auto c = RunConfig::parse_ini("");
  EXPECT_EQ(c.data.n_pairs, 512u);
  EXPECT_EQ(c.bank.k, 4u);
  EXPECT_EQ(c.train.epochs, 40u);
  EXPECT_DOUBLE_EQ(c.train.weight_decay, 5e-4);
  EXPECT_DOUBLE_EQ(c.train.align_weight, 0.3);
  EXPECT_TRUE(c.model.flags.proto && c.model.flags.tamg && c.model.flags.det_guided && c.model.flags.align);
}

TEST(RunConfig, ParsesEverySection) {
  auto c = RunConfig::parse_ini(
      "[data]\nn_pairs = 64\nseed = 3\nmix = 1,1,1,1\n"
      "[model]\nseed = 9\ndim = 16\nheads = 4\ndet_grid = 1\n"
      "[prototype]\nk = 2\ntau_proto = 0.5\n"
      "[train]\nepochs = 3\nlr = 0.01\nthreads = 2\n"
      "[ablation]\nproto = off\ntamg = false\ndet_guided = 0\nalign = no\n");
  EXPECT_EQ(c.data.n_pairs, 64u);
  EXPECT_EQ(c.data.mix, (std::array<double, 4>{1, 1, 1, 1}));
  EXPECT_EQ(c.model.seed, 9u);
  EXPECT_EQ(c.bank.seed, 9u);
  EXPECT_EQ(c.model.backbone.dim, 16u);
  EXPECT_EQ(c.model.decoder.feature_dim, 16u);
  EXPECT_EQ(c.model.decoder.det_grid_w, 1u);
  EXPECT_EQ(c.bank.k, 2u);
  EXPECT_DOUBLE_EQ(c.bank.temperature, 0.5);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.threads, 2u);
  EXPECT_FALSE(c.model.flags.proto || c.model.flags.tamg || c.model.flags.det_guided || c.model.flags.align);
}

TEST(RunConfig, IniRoundTrip) {
  auto c = RunConfig::parse_ini("[train]\nlr = 0.00123456789\n[ablation]\ntamg = false\n[data]\nmix = 0.1,0.2,0.3,0.4\n");
  auto again = RunConfig::parse_ini(c.to_ini());
  EXPECT_EQ(again.to_ini(), c.to_ini());
  EXPECT_EQ(again.to_json(), c.to_json());
  EXPECT_DOUBLE_EQ(again.train.lr, 0.00123456789);
  EXPECT_FALSE(again.model.flags.tamg);
}

TEST(RunConfig, RejectsUnknownKeysAndSections) {
  EXPECT_THROW(RunConfig::parse_ini("[train]\nlearning_rate = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[optimizer]\nlr = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("lr = 1\n"), ConfigError);
}

TEST(RunConfig, RejectsBadValues) {
  EXPECT_THROW(RunConfig::parse_ini("[train]\nepochs = many\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[train]\nlr = 0\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[train]\nweight_decay = -1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[ablation]\nproto = maybe\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[model]\ndim = 30\nheads = 4\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[model]\npatch = 5\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[data]\nmix = 1,2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse_ini("[train\n"), ConfigError);
}

TEST(RunConfig, MissingFileThrows) { EXPECT_ANY_THROW(RunConfig::load("/nonexistent/run.ini")); }
