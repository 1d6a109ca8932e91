#pragma once

#include <span>
#include <string>
#include <vector>

#include "ptnet/nn.hpp"

namespace ptnet {

/// Frozen text embedder: hashed per-token table rows, mean pooled, passed
/// through a fixed random projection and L2-normalized. Holds no trainable
/// leaves, so gradients can never reach it.
class TextAnchor {
 public:
  explicit TextAnchor(std::size_t table_dim = 32, std::size_t out_dim = 32, std::uint64_t seed = 0x7e57a11c);

  /// Table row for one token; the same token always hashes to the same row.
  std::vector<double> token_row(const std::string& token) const;
  const Tensor& projection() const { return projection_; }  // [table_dim, out_dim]
  std::size_t dim() const { return out_dim_; }

 private:
  std::size_t table_dim_;
  std::size_t out_dim_;
  std::uint64_t seed_;
  Tensor projection_;
};

/// e_t = normalize(mean(rows) * P). Throws ConfigError on an empty caption.
Tensor anchor_embed(const std::vector<std::string>& tokens, const TextAnchor& anchor);

struct AlignmentHead {
  Linear proj;  // D_LM -> d_t
  double temperature = 0.07;

  static AlignmentHead create(ParamStore& store, std::size_t lm_dim, std::size_t text_dim, Rng& rng,
                              double temperature = 0.07);
};

/// e_v = normalize(Linear(mean over rows of hidden)), returned as [1, d_t].
Tensor pool_project(const Tensor& hidden, const AlignmentHead& head);

/// -(1/B) sum_b log softmax_b'(sim(e_v^b, e_t^b') / tau)[b] with cosine
/// similarity on unit rows.
Tensor infonce(const Tensor& ev, const Tensor& et, double temperature);

}  // namespace ptnet
