#include "ptnet/alignment.hpp"

#include <cmath>

#include "ptnet/errors.hpp"

namespace ptnet {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

TextAnchor::TextAnchor(std::size_t table_dim, std::size_t out_dim, std::uint64_t seed)
    : table_dim_(table_dim), out_dim_(out_dim), seed_(seed) {
  if (table_dim == 0 || out_dim == 0) throw ConfigError("text anchor: dimensions must be positive");
  Rng rng(mix_seed(seed, 0));
  projection_ = normal_tensor({table_dim, out_dim}, 1.0 / std::sqrt(static_cast<double>(table_dim)), rng);
}

std::vector<double> TextAnchor::token_row(const std::string& token) const {
  Rng rng(mix_seed(seed_ ^ fnv1a(token), 1));
  std::vector<double> row(table_dim_);
  for (auto& v : row) v = rng.normal();
  return row;
}

Tensor anchor_embed(const std::vector<std::string>& tokens, const TextAnchor& anchor) {
  if (tokens.empty()) throw ConfigError("anchor_embed: empty caption");
  NoGradGuard no_grad;
  const std::size_t td = anchor.projection().dim(0);
  std::vector<double> mean(td, 0.0);
  for (const auto& t : tokens) {
    const auto row = anchor.token_row(t);
    for (std::size_t i = 0; i < td; ++i) mean[i] += row[i];
  }
  for (auto& v : mean) v /= static_cast<double>(tokens.size());
  return l2_normalize_rows(matmul(Tensor::from({1, td}, std::move(mean)), anchor.projection()));
}

AlignmentHead AlignmentHead::create(ParamStore& store, std::size_t lm_dim, std::size_t text_dim, Rng& rng,
                                    double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("alignment head: temperature must be positive");
  return {Linear::create(store, "align.proj", lm_dim, text_dim, rng), temperature};
}

Tensor pool_project(const Tensor& hidden, const AlignmentHead& head) {
  if (hidden.rank() != 2 || hidden.dim(0) == 0) throw ShapeError("pool_project: hidden states must be [L>=1, D_LM]");
  return l2_normalize_rows(head.proj(mean_over(hidden, 0)));
}

Tensor infonce(const Tensor& ev, const Tensor& et, double temperature) {
  if (ev.rank() != 2 || et.shape() != ev.shape()) throw ShapeError("infonce: e_v and e_t must both be [B, d_t]");
  const std::size_t b = ev.dim(0);
  if (b < 2) throw ConfigError("infonce: batch size must be at least 2");
  if (!(temperature > 0.0)) throw ConfigError("infonce: temperature must be positive");
  auto sims = scale(matmul(ev, transpose_last2(et)), 1.0 / temperature);
  auto logp = log_softmax_last(sims);
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i * b + i;
  return scale(sum_all(gather_flat(logp, std::move(diag), {b})), -1.0 / static_cast<double>(b));
}

}  // namespace ptnet
