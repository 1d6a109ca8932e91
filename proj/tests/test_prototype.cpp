#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ptnet/errors.hpp"
#include "ptnet/prototype.hpp"

using namespace ptnet;
using ptnet::testing::random_tensor;

namespace {

Points lloyd_oracle(const Points& pts, Points centers, int iters) {
  for (int it = 0; it < iters; ++it) {
    Points sums(centers.size(), std::vector<double>(pts[0].size(), 0.0));
    std::vector<int> counts(centers.size(), 0);
    for (const auto& p : pts) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t c = 0; c < centers.size(); ++c) {
        double d = 0;
        for (std::size_t j = 0; j < p.size(); ++j) d += (p[j] - centers[c][j]) * (p[j] - centers[c][j]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      counts[best]++;
      for (std::size_t j = 0; j < p.size(); ++j) sums[best][j] += p[j];
    }
    for (std::size_t c = 0; c < centers.size(); ++c)
      for (std::size_t j = 0; j < sums[c].size(); ++j) centers[c][j] = sums[c][j] / counts[c];
  }
  return centers;
}

ChangeSampleStats make_stats(Rng& rng, std::size_t n, std::size_t d) {
  ChangeSampleStats s;
  s.diff = random_tensor({n, d}, rng, 0, 1);
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = rng.uniform() < 0.3 ? 1 : 0;
  s.changed_tokens = changed_token_indices(m);
  s.pooled = pool_change_vector(s.diff, m);
  return s;
}

}  // namespace

TEST(PoolChangeVector, AllTokensEqualsGlobalMean) {
  Rng rng(1);
  auto z = random_tensor({4, 3}, rng);
  std::vector<std::uint8_t> all(4, 1), none(4, 0);
  auto a = pool_change_vector(z, all);
  auto b = pool_change_vector(z, none);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0;
    for (std::size_t r = 0; r < 4; ++r) m += z.at(r * 3 + j);
    EXPECT_NEAR(a[j], m / 4, 1e-12);
    EXPECT_NEAR(b[j], m / 4, 1e-12);
  }
}

TEST(PoolChangeVector, SingleTokenReturnsItsRow) {
  auto z = Tensor::from({2, 2}, {7, 8, 1, 2});
  std::vector<std::uint8_t> m{1, 0};
  EXPECT_EQ(pool_change_vector(z, m), (std::vector<double>{7, 8}));
}

TEST(PoolChangeVector, BruteForce) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto z = random_tensor({16, 5}, rng);
    std::vector<std::uint8_t> m(16);
    std::size_t count = 0;
    for (auto& v : m) count += (v = rng.uniform() < 0.4 ? 1 : 0);
    auto got = pool_change_vector(z, m);
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t r = 0; r < 16; ++r)
        if (m[r] || count == 0) s += z.at(r * 5 + j);
      EXPECT_NEAR(got[j], s / static_cast<double>(count ? count : 16), 1e-12);
    }
  }
}

TEST(TokenMask, HalfCoveredPatchCounts) {
  std::vector<std::uint8_t> mask(16, 0);
  mask[0] = mask[1] = 1;  // top-left 2x2 patch: 2 of 4 pixels
  mask[3] = 1;            // top-right patch: 1 of 4
  auto t = token_mask_from_pixels(mask, 4, 4, 2);
  EXPECT_EQ(t, (std::vector<std::uint8_t>{1, 0, 0, 0}));
}

TEST(KMeans, SymmetricTwoClusters) {
  Points pts{{0}, {0}, {10}, {10}};
  auto m = kmeans_fit(pts, 2, 3);
  std::vector<double> c{m.centers.at(0), m.centers.at(1)};
  std::sort(c.begin(), c.end());
  EXPECT_EQ(c, (std::vector<double>{0, 10}));
}

TEST(KMeans, SingleClusterIsMean) {
  Points pts{{1, 2}, {3, 4}, {5, 9}};
  auto m = kmeans_fit(pts, 1, 1);
  EXPECT_NEAR(m.centers.at(0), 3.0, 1e-12);
  EXPECT_NEAR(m.centers.at(1), 5.0, 1e-12);
}

TEST(KMeans, MatchesIndependentLloyd) {
  Rng rng(4);
  Points pts;
  const double cx[3] = {0, 5, 10};
  for (int i = 0; i < 8; ++i) pts.push_back({cx[i % 3] + rng.uniform(-1, 1), rng.uniform(-1, 1)});
  auto init = kmeans_seed(pts, 3, 5);
  Points centers;
  for (auto i : init) centers.push_back(pts[i]);
  auto model = kmeans_lloyd(pts, centers, 100, 1.0);
  auto oracle = lloyd_oracle(pts, centers, 100);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(model.centers.at(c * 2 + j), oracle[c][j], 1e-12);
}

TEST(KMeans, TooFewPointsThrows) { EXPECT_THROW(kmeans_fit({{1.0}}, 2, 0), ConfigError); }

TEST(KMeans, DeterministicUnderSeed) {
  Rng rng(6);
  Points pts;
  for (int i = 0; i < 30; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
  EXPECT_EQ(kmeans_fit(pts, 4, 9).centers.to_vector(), kmeans_fit(pts, 4, 9).centers.to_vector());
}

TEST(Rbf, SingleSourceReplicatesRow) {
  Rng rng(7);
  auto z = random_tensor({16, 3}, rng);
  std::vector<double> pooled(3, 0.0);
  auto e = rbf_expand(z, {5}, token_grid_coords(4), 1.5, pooled);
  for (std::size_t v = 0; v < 16; ++v)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(e.at(v * 3 + j), z.at(5 * 3 + j), 1e-12);
}

TEST(Rbf, EmptySourceIsUniformReplication) {
  auto z = Tensor::zeros({4, 2});
  std::vector<double> c{0.25, -3.0};
  auto e = rbf_expand(z, {}, token_grid_coords(2), 1.0, c);
  for (std::size_t v = 0; v < 4; ++v) {
    EXPECT_EQ(e.at(v * 2), 0.25);
    EXPECT_EQ(e.at(v * 2 + 1), -3.0);
  }
}

TEST(Rbf, HandEvaluatedWeights) {
  // 2x2 grid, sources at (0,0) and (1,1), sigma 1: squared distances are 0/2 at
  // the corners and 1/1 at the off-diagonal tokens.
  auto w = rbf_weights({0, 3}, token_grid_coords(2), 1.0);
  const double near = 1.0 / (1.0 + std::exp(-1.0));
  const double far = std::exp(-1.0) / (1.0 + std::exp(-1.0));
  const std::vector<double> want{near, far, 0.5, 0.5, 0.5, 0.5, far, near};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(w.at(i), want[i], 1e-12);
}

TEST(Rbf, RowsSumToOneProperty) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> omega;
    for (std::size_t i = 0; i < 16; ++i)
      if (rng.uniform() < 0.3) omega.push_back(i);
    if (omega.empty()) omega.push_back(0);
    auto w = rbf_weights(omega, token_grid_coords(4), rng.uniform(0.3, 4.0));
    for (std::size_t v = 0; v < 16; ++v) {
      double s = 0;
      for (std::size_t l = 0; l < omega.size(); ++l) s += w.at(v * omega.size() + l);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Rbf, NonPositiveSigmaThrows) {
  std::vector<double> pooled(2, 0.0);
  EXPECT_THROW(rbf_expand(Tensor::zeros({4, 2}), {0}, token_grid_coords(2), 0.0, pooled), ConfigError);
}

TEST(SoftAssign, Equidistant) {
  ClusterModel m;
  m.centers = Tensor::from({3, 2}, {1, 0, -1, 0, 0, 1});
  std::vector<double> z{0, 0};
  for (double a : soft_assign(z, m)) EXPECT_NEAR(a, 1.0 / 3, 1e-12);
}

TEST(SoftAssign, ClosedFormTwoCenters) {
  // squared distances 0 and tau give weights proportional to (1, e^-1)
  ClusterModel m;
  m.temperature = 2.0;
  m.centers = Tensor::from({2, 1}, {0.0, std::sqrt(2.0)});
  std::vector<double> z{0.0};
  auto a = soft_assign(z, m);
  EXPECT_NEAR(a[0], 0.7311, 1e-4);
  EXPECT_NEAR(a[1], 0.2689, 1e-4);
}

TEST(SoftAssign, SmallTemperatureApproachesOneHot) {
  ClusterModel m;
  m.temperature = 1e-4;
  m.centers = Tensor::from({2, 1}, {0.0, 1.0});
  std::vector<double> z{0.2};
  auto a = soft_assign(z, m);
  EXPECT_NEAR(a[0], 1.0, 1e-12);
}

TEST(SoftAssign, LowerTemperatureNeverLowersMax) {
  Rng rng(9);
  ClusterModel m;
  m.centers = random_tensor({4, 3}, rng);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    double prev = 0;
    for (double tau : {4.0, 2.0, 1.0, 0.5, 0.1}) {
      m.temperature = tau;
      auto a = soft_assign(z, m);
      double mx = *std::max_element(a.begin(), a.end());
      double sum = 0;
      for (double v : a) sum += v;
      EXPECT_NEAR(sum, 1.0, 1e-6);
      EXPECT_GE(mx, prev - 1e-15);
      prev = mx;
    }
  }
}

TEST(BuildBank, SingleSampleScalesByAlpha) {
  Rng rng(10);
  std::vector<ChangeSampleStats> stats{make_stats(rng, 4, 2), make_stats(rng, 4, 2)};
  stats[1] = stats[0];
  BankConfig cfg;
  cfg.k = 2;
  cfg.sigma = 1.0;
  auto bank = build_bank_from_stats(stats, 2, cfg);
  auto e = rbf_expand(stats[0].diff, stats[0].changed_tokens, token_grid_coords(2), 1.0, stats[0].pooled);
  auto alpha = soft_assign(stats[0].pooled, bank.clusters);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(bank.prototypes.at(k * 8 + i), 2 * alpha[k] * e.at(i), 1e-12);
}

TEST(BuildBank, DisjointAssignments) {
  ChangeSampleStats a, b;
  a.diff = Tensor::full({4, 1}, 0.0);
  b.diff = Tensor::full({4, 1}, 50.0);
  a.changed_tokens = {0, 1, 2, 3};
  b.changed_tokens = {0, 1, 2, 3};
  a.pooled = {0.0};
  b.pooled = {50.0};
  BankConfig cfg;
  cfg.k = 2;
  cfg.temperature = 1e-3;
  auto bank = build_bank_from_stats({a, b}, 2, cfg);
  const std::size_t ka = nearest_center(a.pooled, bank.clusters);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(bank.prototypes.at(ka * 4 + i), 0.0, 1e-12);
    EXPECT_NEAR(bank.prototypes.at((1 - ka) * 4 + i), 50.0, 1e-12);
  }
}

TEST(BuildBank, BruteForceTwentySamples) {
  Rng rng(11);
  std::vector<ChangeSampleStats> stats;
  for (int i = 0; i < 20; ++i) stats.push_back(make_stats(rng, 16, 4));
  BankConfig cfg;
  cfg.k = 3;
  cfg.sigma = 1.3;
  auto bank = build_bank_from_stats(stats, 4, cfg, "hash");
  EXPECT_EQ(bank.prototypes.shape(), (Shape{3, 16, 4}));
  EXPECT_EQ(bank.provenance.samples, 20u);
  EXPECT_EQ(bank.provenance.dataset_hash, "hash");
  std::vector<double> want(3 * 64, 0.0);
  for (const auto& s : stats) {
    std::vector<double> alpha(3);
    double z = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      double d = 0;
      for (std::size_t j = 0; j < 4; ++j) d += std::pow(s.pooled[j] - bank.clusters.centers.at(k * 4 + j), 2);
      alpha[k] = std::exp(-d / cfg.temperature);
      z += alpha[k];
    }
    for (std::size_t v = 0; v < 16; ++v) {
      std::vector<double> row(4, 0.0);
      if (s.changed_tokens.empty()) {
        row = s.pooled;
      } else {
        double wsum = 0;
        for (auto l : s.changed_tokens) {
          const double dr = double(v / 4) - double(l / 4), dc = double(v % 4) - double(l % 4);
          const double w = std::exp(-(dr * dr + dc * dc) / (2 * cfg.sigma * cfg.sigma));
          wsum += w;
          for (std::size_t j = 0; j < 4; ++j) row[j] += w * s.diff.at(l * 4 + j);
        }
        for (auto& r : row) r /= wsum;
      }
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 4; ++j) want[k * 64 + v * 4 + j] += alpha[k] / z * row[j];
    }
  }
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(bank.prototypes.at(i), want[i], 1e-9);
}

TEST(BuildBank, Deterministic) {
  Rng rng(12);
  std::vector<ChangeSampleStats> stats;
  for (int i = 0; i < 10; ++i) stats.push_back(make_stats(rng, 16, 4));
  BankConfig cfg;
  cfg.k = 3;
  EXPECT_EQ(build_bank_from_stats(stats, 4, cfg).prototypes.to_vector(),
            build_bank_from_stats(stats, 4, cfg).prototypes.to_vector());
}

TEST(BuildBank, EmptyThrows) { EXPECT_THROW(build_bank_from_stats({}, 4, BankConfig{}), ConfigError); }

TEST(BuildBank, NoChangeClusterRecorded) {
  Rng rng(13);
  std::vector<ChangeSampleStats> stats;
  for (int i = 0; i < 6; ++i) stats.push_back(make_stats(rng, 16, 4));
  stats[0].changed_tokens.clear();
  BankConfig cfg;
  cfg.k = 2;
  auto bank = build_bank_from_stats(stats, 4, cfg);
  ASSERT_TRUE(bank.no_change_cluster.has_value());
  EXPECT_EQ(*bank.no_change_cluster, nearest_center(stats[0].pooled, bank.clusters));
}

TEST(SampleStats, UsesLevelTwoDifference) {
  ParamStore store;
  Rng rng(14);
  auto bb = Backbone::create(store, {}, rng);
  auto a = random_tensor({32, 32, 3}, rng, 0, 1);
  auto b = random_tensor({32, 32, 3}, rng, 0, 1);
  std::vector<std::uint8_t> mask(1024, 0);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) mask[r * 32 + c] = 1;
  auto s = compute_sample_stats(bb, a, b, mask);
  auto [p1, p2] = bb.pyramid_pair(a, b);
  EXPECT_EQ(s.diff.to_vector(), abs_diff(p1.levels[1], p2.levels[1]).to_vector());
  EXPECT_EQ(s.changed_tokens, (std::vector<std::size_t>{0}));
}
