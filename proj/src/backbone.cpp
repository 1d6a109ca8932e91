#include "ptnet/backbone.hpp"

#include "ptnet/errors.hpp"

namespace ptnet {

EncoderBlock EncoderBlock::create(ParamStore& store, const std::string& name, const BackboneConfig& cfg, Rng& rng) {
  const auto g = ParamGroup::encoder;
  EncoderBlock b;
  b.heads = cfg.heads;
  b.ln1 = LayerNorm::create(store, name + ".ln1", cfg.dim, g);
  b.wq = Linear::create(store, name + ".attn.q", cfg.dim, cfg.dim, rng, g, false);
  b.wk = Linear::create(store, name + ".attn.k", cfg.dim, cfg.dim, rng, g, false);
  b.wv = Linear::create(store, name + ".attn.v", cfg.dim, cfg.dim, rng, g, false);
  b.wo = Linear::create(store, name + ".attn.out", cfg.dim, cfg.dim, rng, g, true, 0.5);
  b.ln2 = LayerNorm::create(store, name + ".ln2", cfg.dim, g);
  b.mlp = Mlp::create(store, name + ".mlp", cfg.dim, cfg.mlp_hidden, cfg.dim, rng, g);
  return b;
}

Tensor EncoderBlock::operator()(const Tensor& x) const {
  auto h = ln1(x);
  auto attn = scaled_dot_attention(split_heads(wq(h), heads), split_heads(wk(h), heads), split_heads(wv(h), heads));
  auto y = add(x, wo(merge_heads(attn.values)));
  return add(y, mlp(ln2(y)));
}

Backbone Backbone::create(ParamStore& store, const BackboneConfig& cfg, Rng& rng) {
  if (cfg.patch == 0 || cfg.image_size % cfg.patch != 0) throw ConfigError("backbone: image size must be divisible by patch");
  if (cfg.dim % cfg.heads != 0) throw ConfigError("backbone: dim must be divisible by heads");
  Backbone b;
  b.cfg_ = cfg;
  const std::size_t patch_dim = cfg.patch * cfg.patch * cfg.channels;
  b.patch_embed_ = Linear::create(store, "backbone.patch_embed", patch_dim, cfg.dim, rng, ParamGroup::encoder);
  b.pos_embed_ = store.add("backbone.pos_embed", normal_tensor({cfg.tokens(), cfg.dim}, 0.1, rng), ParamGroup::encoder);
  for (std::size_t i = 0; i < kLevels; ++i) {
    b.blocks_[i] = EncoderBlock::create(store, "backbone.block" + std::to_string(i + 1), cfg, rng);
  }
  return b;
}

FeaturePyramid Backbone::encode(const Tensor& image, int phase) const {
  if (image.rank() != 3 || image.dim(2) != cfg_.channels) {
    throw ShapeError("encode: expected [H, W, " + std::to_string(cfg_.channels) + "] image, got " + shape_str(image.shape()));
  }
  if (image.dim(0) != cfg_.image_size || image.dim(1) != cfg_.image_size) {
    throw ShapeError("encode: image " + shape_str(image.shape()) + " does not match configured size " +
                     std::to_string(cfg_.image_size));
  }
  FeaturePyramid pyr;
  pyr.grid = cfg_.grid();
  pyr.phase = phase;
  auto x = add(patch_embed_(patchify(image, cfg_.patch)), pos_embed_);
  for (std::size_t i = 0; i < kLevels; ++i) {
    x = blocks_[i](x);
    pyr.levels[i] = x;
  }
  return pyr;
}

std::pair<FeaturePyramid, FeaturePyramid> Backbone::pyramid_pair(const Tensor& image1, const Tensor& image2) const {
  if (image1.shape() != image2.shape()) {
    throw ShapeError("pyramid_pair: image shapes differ " + shape_str(image1.shape()) + " vs " + shape_str(image2.shape()));
  }
  return {encode(image1, 1), encode(image2, 2)};
}

std::vector<std::pair<FeaturePyramid, FeaturePyramid>> Backbone::pyramid_pairs(
    const std::vector<std::pair<Tensor, Tensor>>& pairs) const {
  std::vector<std::pair<FeaturePyramid, FeaturePyramid>> out;
  out.reserve(pairs.size());
  for (const auto& [a, b] : pairs) out.push_back(pyramid_pair(a, b));
  return out;
}

}  // namespace ptnet
