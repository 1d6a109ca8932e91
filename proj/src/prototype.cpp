#include "ptnet/prototype.hpp"

#include <cmath>
#include <limits>

#include "ptnet/errors.hpp"

namespace ptnet {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::span<const double> center_row(const ClusterModel& m, std::size_t k) {
  const std::size_t d = m.centers.dim(1);
  return m.centers.data().subspan(k * d, d);
}

}  // namespace

std::vector<std::uint8_t> token_mask_from_pixels(std::span<const std::uint8_t> mask, std::size_t height,
                                                 std::size_t width, std::size_t patch) {
  if (mask.size() != height * width) throw ShapeError("token_mask_from_pixels: mask size mismatch");
  if (patch == 0 || height % patch != 0 || width % patch != 0) throw ShapeError("token_mask_from_pixels: bad patch size");
  const std::size_t gh = height / patch, gw = width / patch;
  std::vector<std::uint8_t> out(gh * gw, 0);
  for (std::size_t tr = 0; tr < gh; ++tr)
    for (std::size_t tc = 0; tc < gw; ++tc) {
      std::size_t changed = 0;
      for (std::size_t r = 0; r < patch; ++r)
        for (std::size_t c = 0; c < patch; ++c) changed += mask[(tr * patch + r) * width + tc * patch + c] ? 1 : 0;
      out[tr * gw + tc] = (2 * changed >= patch * patch) ? 1 : 0;
    }
  return out;
}

std::vector<std::size_t> changed_token_indices(std::span<const std::uint8_t> token_mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < token_mask.size(); ++i)
    if (token_mask[i]) out.push_back(i);
  return out;
}

std::vector<double> pool_change_vector(const Tensor& diff, std::span<const std::uint8_t> token_mask) {
  if (diff.rank() != 2) throw ShapeError("pool_change_vector: Z must be [N, D]");
  const std::size_t n = diff.dim(0), d = diff.dim(1);
  if (token_mask.size() != n) throw ShapeError("pool_change_vector: mask length must equal N");
  const auto z = diff.data();
  std::size_t count = 0;
  for (auto m : token_mask) count += m ? 1 : 0;
  const bool use_all = count == 0;
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (!use_all && !token_mask[r]) continue;
    for (std::size_t j = 0; j < d; ++j) out[j] += z[r * d + j];
  }
  const double inv = 1.0 / static_cast<double>(use_all ? n : count);
  for (auto& v : out) v *= inv;
  return out;
}

GridCoords token_grid_coords(std::size_t grid) {
  GridCoords out;
  out.reserve(grid * grid);
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) out.push_back({static_cast<double>(r), static_cast<double>(c)});
  return out;
}

Tensor rbf_weights(const std::vector<std::size_t>& omega, const GridCoords& coords, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("rbf: sigma must be positive");
  if (omega.empty()) throw ConfigError("rbf_weights: empty source set");
  const std::size_t n = coords.size(), m = omega.size();
  std::vector<double> w(n * m);
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (std::size_t l = 0; l < m; ++l) {
      if (omega[l] >= n) throw ShapeError("rbf_weights: token index out of range");
      const auto& pv = coords[v];
      const auto& pl = coords[omega[l]];
      const double d2 = (pv[0] - pl[0]) * (pv[0] - pl[0]) + (pv[1] - pl[1]) * (pv[1] - pl[1]);
      w[v * m + l] = std::exp(-d2 / denom);
      s += w[v * m + l];
    }
    for (std::size_t l = 0; l < m; ++l) w[v * m + l] /= s;
  }
  return Tensor::from({n, m}, std::move(w));
}

Tensor rbf_expand(const Tensor& diff, const std::vector<std::size_t>& omega, const GridCoords& coords, double sigma,
                  std::span<const double> pooled) {
  if (!(sigma > 0.0)) throw ConfigError("rbf: sigma must be positive");
  if (diff.rank() != 2 || diff.dim(0) != coords.size()) throw ShapeError("rbf_expand: Z must be [N, D] with N coords");
  const std::size_t n = diff.dim(0), d = diff.dim(1);
  std::vector<double> out(n * d, 0.0);
  if (omega.empty()) {
    if (pooled.size() != d) throw ShapeError("rbf_expand: pooled vector must have D entries");
    for (std::size_t v = 0; v < n; ++v)
      for (std::size_t j = 0; j < d; ++j) out[v * d + j] = pooled[j];
    return Tensor::from({n, d}, std::move(out));
  }
  const auto w = rbf_weights(omega, coords, sigma);
  const auto wd = w.data();
  const auto z = diff.data();
  const std::size_t m = omega.size();
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t l = 0; l < m; ++l) {
      const double wl = wd[v * m + l];
      for (std::size_t j = 0; j < d; ++j) out[v * d + j] += wl * z[omega[l] * d + j];
    }
  return Tensor::from({n, d}, std::move(out));
}

std::vector<std::size_t> kmeans_seed(const Points& points, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ConfigError("kmeans: K must be positive");
  if (points.size() < k) {
    throw ConfigError("kmeans: need at least K=" + std::to_string(k) + " points, got " + std::to_string(points.size()));
  }
  Rng rng(seed);
  std::vector<std::size_t> chosen{static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(points.size()) - 1))};
  std::vector<double> min_d(points.size(), std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const auto& last = points[chosen.back()];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      min_d[i] = std::min(min_d[i], sq_dist(points[i], last));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

ClusterModel kmeans_lloyd(const Points& points, Points centers, std::size_t max_iters, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("kmeans: temperature must be positive");
  const std::size_t k = centers.size();
  if (k == 0 || points.size() < k) throw ConfigError("kmeans: need at least K points");
  const std::size_t d = points[0].size();
  std::vector<std::size_t> assign(points.size(), k);
  std::size_t iter = 0;
  for (; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sq_dist(points[i], centers[c]);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::size_t> counts(k, 0);
    Points sums(k, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed to the point farthest from its current center.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
          const double dd = sq_dist(points[i], centers[assign[i]]);
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        centers[c] = points[far];
        assign[far] = c;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }
  ClusterModel model;
  std::vector<double> flat;
  flat.reserve(k * d);
  for (const auto& c : centers) flat.insert(flat.end(), c.begin(), c.end());
  model.centers = Tensor::from({k, d}, std::move(flat));
  model.temperature = temperature;
  model.iterations = iter;
  for (std::size_t i = 0; i < points.size(); ++i) model.inertia += sq_dist(points[i], centers[nearest_center(points[i], model)]);
  return model;
}

ClusterModel kmeans_fit(const Points& points, std::size_t k, std::uint64_t seed, double temperature, std::size_t max_iters) {
  const auto init = kmeans_seed(points, k, seed);
  Points centers;
  for (auto i : init) centers.push_back(points[i]);
  return kmeans_lloyd(points, std::move(centers), max_iters, temperature);
}

std::size_t nearest_center(std::span<const double> z, const ClusterModel& model) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < model.k(); ++c) {
    const double d = sq_dist(z, center_row(model, c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<double> soft_assign(std::span<const double> z, const ClusterModel& model) {
  if (!(model.temperature > 0.0)) throw ConfigError("soft_assign: temperature must be positive");
  if (z.size() != model.centers.dim(1)) throw ShapeError("soft_assign: dimension mismatch");
  const std::size_t k = model.k();
  std::vector<double> logits(k);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    logits[c] = -sq_dist(z, center_row(model, c)) / model.temperature;
    mx = std::max(mx, logits[c]);
  }
  double s = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - mx);
    s += l;
  }
  for (auto& l : logits) l /= s;
  return logits;
}

ChangeSampleStats compute_sample_stats(const Backbone& backbone, const Tensor& image1, const Tensor& image2,
                                       std::span<const std::uint8_t> pixel_mask) {
  NoGradGuard no_grad;
  const auto& cfg = backbone.config();
  auto [p1, p2] = backbone.pyramid_pair(image1, image2);
  ChangeSampleStats s;
  s.diff = abs_diff(p1.levels[1], p2.levels[1]).detach();
  const auto tokens = token_mask_from_pixels(pixel_mask, image1.dim(0), image1.dim(1), cfg.patch);
  s.changed_tokens = changed_token_indices(tokens);
  s.pooled = pool_change_vector(s.diff, tokens);
  return s;
}

PrototypeBank build_bank_from_stats(const std::vector<ChangeSampleStats>& stats, std::size_t grid,
                                    const BankConfig& config, std::string dataset_hash) {
  if (stats.empty()) throw ConfigError("build_bank: empty dataset");
  if (!(config.sigma > 0.0)) throw ConfigError("build_bank: sigma must be positive");
  const std::size_t n = grid * grid;
  const std::size_t d = stats[0].pooled.size();
  for (const auto& s : stats) {
    if (s.diff.rank() != 2 || s.diff.dim(0) != n || s.diff.dim(1) != d) throw ShapeError("build_bank: inconsistent sample shapes");
  }
  Points points;
  points.reserve(stats.size());
  for (const auto& s : stats) points.push_back(s.pooled);

  PrototypeBank bank;
  bank.clusters = kmeans_fit(points, config.k, config.seed, config.temperature, config.max_iters);
  bank.sigma = config.sigma;
  bank.provenance = {std::move(dataset_hash), config.k, config.seed, stats.size()};

  const auto coords = token_grid_coords(grid);
  std::vector<double> p(config.k * n * d, 0.0);
  for (const auto& s : stats) {
    const auto alpha = soft_assign(s.pooled, bank.clusters);
    const auto expanded = rbf_expand(s.diff, s.changed_tokens, coords, config.sigma, s.pooled);
    const auto e = expanded.data();
    for (std::size_t k = 0; k < config.k; ++k)
      for (std::size_t i = 0; i < n * d; ++i) p[k * n * d + i] += alpha[k] * e[i];
  }
  bank.prototypes = Tensor::from({config.k, n, d}, std::move(p));

  std::vector<double> centroid(d, 0.0);
  std::size_t unchanged = 0;
  for (const auto& s : stats) {
    if (!s.changed_tokens.empty()) continue;
    ++unchanged;
    for (std::size_t j = 0; j < d; ++j) centroid[j] += s.pooled[j];
  }
  if (unchanged > 0) {
    for (auto& v : centroid) v /= static_cast<double>(unchanged);
    bank.no_change_cluster = nearest_center(centroid, bank.clusters);
  }
  return bank;
}

}  // namespace ptnet
