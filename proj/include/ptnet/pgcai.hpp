#pragma once

// Prototype-guided change-aware interaction.
//
// Per level: change queries U = MLP([F1; F2; |F1 - F2|]) attend over the
// flattened prototype bank to retrieve a modulation map M; each temporal
// direction then cross-attends from F_a to keys/values built from F_b * M,
// with a residual back to F_a. Two cascaded layers with independent
// parameters are applied.

#include <array>
#include <optional>

#include "ptnet/backbone.hpp"

namespace ptnet {

enum class Direction { t1_to_t2, t2_to_t1 };

struct RetrievalParams {
  Mlp change_mlp;        // 3D -> 2D -> D
  LayerNorm bank_norm;   // applied to each flattened prototype token
  Linear wq, wk, wv;
  Linear out;
};

struct DirectionParams {
  Linear wq, wk, wv;
  Linear out;  // zero weights and bias give an exact residual passthrough
};

struct PgCaiLevelParams {
  std::optional<RetrievalParams> retrieval;  // absent when prototypes are disabled
  DirectionParams forward;                   // T1 queries, T2 keys/values
  DirectionParams backward;                  // T2 queries, T1 keys/values
};

struct PgCaiLayer {
  std::array<PgCaiLevelParams, kLevels> levels;
  std::size_t heads = 2;

  /// Both directions of a level start from identical weights.
  static PgCaiLayer create(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                           bool with_prototypes, Rng& rng);
};

struct ChangeAwareFeatures {
  std::array<Tensor, kLevels> g1;
  std::array<Tensor, kLevels> g2;
};

struct ModulationOutput {
  Tensor modulation;  // M, [N, D]
  Tensor weights;     // [H, N, K*N]
};

struct CrossAttentionOutput {
  Tensor features;  // G_a, [N, D]
  Tensor weights;   // [H, N, N]
};

Tensor change_query(const Tensor& f1, const Tensor& f2, const RetrievalParams& params);

/// `bank` is [K, N, D]; it is flattened to K*N key/value tokens, each layer-normalized
/// before projection.
ModulationOutput prototype_modulation(const Tensor& queries, const Tensor& bank, const RetrievalParams& params,
                                      std::size_t heads);

/// `modulation` undefined means M = 1 (plain cross-attention).
CrossAttentionOutput modulated_cross_attention(const Tensor& fa, const Tensor& fb, const Tensor& modulation,
                                               const DirectionParams& params, std::size_t heads);

/// One layer at one level: returns (G1, G2).
std::pair<Tensor, Tensor> pgcai_level(const Tensor& f1, const Tensor& f2, const Tensor& bank,
                                      const PgCaiLevelParams& params, std::size_t heads);

/// `bank` undefined disables prototype modulation.
ChangeAwareFeatures pgcai_forward(const FeaturePyramid& pyr1, const FeaturePyramid& pyr2, const Tensor& bank,
                                  const PgCaiLayer& layer1, const PgCaiLayer& layer2);

}  // namespace ptnet
