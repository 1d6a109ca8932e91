#pragma once

#include <array>
#include <utility>
#include <vector>

#include "ptnet/nn.hpp"

namespace ptnet {

inline constexpr std::size_t kLevels = 4;

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t mlp_hidden = 64;

  std::size_t grid() const { return image_size / patch; }
  std::size_t tokens() const { return grid() * grid(); }
};

/// Per-image token maps tapped after each encoder block; level i depends only
/// on blocks 1..i.
struct FeaturePyramid {
  std::array<Tensor, kLevels> levels;  // each [N, D]
  std::size_t grid = 0;
  int phase = 1;  // bookkeeping only, never used in computation

  std::size_t tokens() const { return levels[0].dim(0); }
  std::size_t dim() const { return levels[0].dim(1); }
};

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
struct EncoderBlock {
  LayerNorm ln1;
  Linear wq, wk, wv, wo;
  LayerNorm ln2;
  Mlp mlp;
  std::size_t heads = 2;

  static EncoderBlock create(ParamStore& store, const std::string& name, const BackboneConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Siamese hierarchical encoder shared by both temporal phases.
class Backbone {
 public:
  static Backbone create(ParamStore& store, const BackboneConfig& cfg, Rng& rng);

  /// image: [H, W, C] with H, W divisible by the patch size.
  FeaturePyramid encode(const Tensor& image, int phase = 1) const;
  std::pair<FeaturePyramid, FeaturePyramid> pyramid_pair(const Tensor& image1, const Tensor& image2) const;
  std::vector<std::pair<FeaturePyramid, FeaturePyramid>> pyramid_pairs(
      const std::vector<std::pair<Tensor, Tensor>>& pairs) const;

  const BackboneConfig& config() const { return cfg_; }
  const std::array<EncoderBlock, kLevels>& blocks() const { return blocks_; }
  const Linear& patch_embedding() const { return patch_embed_; }

 private:
  BackboneConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;
  std::array<EncoderBlock, kLevels> blocks_;
};

}  // namespace ptnet
