#pragma once

// Offline construction of the change-type prototype bank: per-sample
// difference features are pooled over changed tokens, clustered with K-means,
// spatially re-expanded with normalized Gaussian (RBF) weights, and aggregated
// under soft cluster assignments into a [K, N, D] bank.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptnet/backbone.hpp"

namespace ptnet {

using Points = std::vector<std::vector<double>>;
using GridCoords = std::vector<std::array<double, 2>>;

struct ChangeSampleStats {
  Tensor diff;                               // Z = |F1^2 - F2^2|, [N, D]
  std::vector<std::size_t> changed_tokens;   // Omega, 0-based token ids
  std::vector<double> pooled;                // z, [D]
};

struct ClusterModel {
  Tensor centers;  // [K, D]
  double temperature = 1.0;
  std::size_t iterations = 0;
  double inertia = 0.0;

  std::size_t k() const { return centers.dim(0); }
};

struct BankConfig {
  std::size_t k = 4;
  double temperature = 1.0;  // tau_proto
  double sigma = 2.0;        // RBF bandwidth, grid units
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
};

struct BankProvenance {
  std::string dataset_hash;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
};

struct PrototypeBank {
  Tensor prototypes;  // P, [K, N, D]
  ClusterModel clusters;
  double sigma = 2.0;
  BankProvenance provenance;
  // Cluster nearest to the centroid of unchanged samples' pooled vectors.
  std::optional<std::size_t> no_change_cluster;

  std::size_t k() const { return prototypes.dim(0); }
  std::size_t tokens() const { return prototypes.dim(1); }
  std::size_t dim() const { return prototypes.dim(2); }
};

/// A token counts as changed when at least half of its pixels are changed.
std::vector<std::uint8_t> token_mask_from_pixels(std::span<const std::uint8_t> mask, std::size_t height,
                                                 std::size_t width, std::size_t patch);
std::vector<std::size_t> changed_token_indices(std::span<const std::uint8_t> token_mask);

/// Mean of Z over changed rows, or over all rows when none changed.
std::vector<double> pool_change_vector(const Tensor& diff, std::span<const std::uint8_t> token_mask);

/// (row, col) of each token on a g x g grid.
GridCoords token_grid_coords(std::size_t grid);

/// Normalized Gaussian weights [N, |Omega|]; each row sums to 1.
Tensor rbf_weights(const std::vector<std::size_t>& omega, const GridCoords& coords, double sigma);

/// Dense re-expansion of changed-token features; uniform replication of
/// `pooled` when Omega is empty.
Tensor rbf_expand(const Tensor& diff, const std::vector<std::size_t>& omega, const GridCoords& coords, double sigma,
                  std::span<const double> pooled);

/// Initial center indices: one uniformly drawn point, then repeated
/// farthest-point picks (ties to the lowest index).
std::vector<std::size_t> kmeans_seed(const Points& points, std::size_t k, std::uint64_t seed);

/// Lloyd iterations from explicit initial centers.
ClusterModel kmeans_lloyd(const Points& points, Points centers, std::size_t max_iters, double temperature);

ClusterModel kmeans_fit(const Points& points, std::size_t k, std::uint64_t seed, double temperature = 1.0,
                        std::size_t max_iters = 100);

/// Index of the nearest center; ties resolve to the lowest index.
std::size_t nearest_center(std::span<const double> z, const ClusterModel& model);

/// Softmax over -||z - c_k||^2 / tau.
std::vector<double> soft_assign(std::span<const double> z, const ClusterModel& model);

/// Difference statistics of one pair from level-2 features of a frozen
/// backbone. `pixel_mask` is H*W, row-major, 0/1.
ChangeSampleStats compute_sample_stats(const Backbone& backbone, const Tensor& image1, const Tensor& image2,
                                       std::span<const std::uint8_t> pixel_mask);

PrototypeBank build_bank_from_stats(const std::vector<ChangeSampleStats>& stats, std::size_t grid,
                                    const BankConfig& config, std::string dataset_hash = {});

}  // namespace ptnet
