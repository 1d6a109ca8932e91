#include "ptnet/decoders.hpp"

#include <algorithm>

#include "ptnet/errors.hpp"

namespace ptnet {

Conv3x3 Conv3x3::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  return {Linear::create(store, name, 9 * in, out, rng)};
}

Tensor Conv3x3::operator()(const Tensor& x) const {
  const std::size_t h = x.dim(0), w = x.dim(1);
  return reshape(linear(im2col3x3(x)), {h, w, linear.out_features()});
}

DetectionHead DetectionHead::create(ParamStore& store, const DecoderConfig& cfg, Rng& rng) {
  if (cfg.grid * 8 != cfg.image_size) throw ConfigError("detection head: image size must be 8x the token grid");
  DetectionHead h;
  h.grid = cfg.grid;
  h.image_size = cfg.image_size;
  h.stem = Conv3x3::create(store, "det.stem", cfg.feature_dim, cfg.feature_dim, rng);
  h.stage1 = Conv3x3::create(store, "det.stage1", cfg.feature_dim, cfg.mid_channels, rng);
  h.stage2 = Conv3x3::create(store, "det.stage2", cfg.mid_channels, cfg.mid_channels, rng);
  h.logit = Conv3x3::create(store, "det.logit", cfg.mid_channels, 1, rng);
  h.lateral = Conv3x3::create(store, "det.lateral", cfg.image_channels, cfg.mid_channels, rng);
  // Most pixels are unchanged; start from a low change prior.
  h.logit.linear.bias.mutable_data()[0] = -2.0;
  return h;
}

DetectionOutput DetectionHead::operator()(const Tensor& od, const Tensor& image1, const Tensor& image2) const {
  if (od.rank() != 2 || od.dim(0) != grid * grid) {
    throw ShapeError("detect_mask: O^d must have g*g rows with g=" + std::to_string(grid) + ", got " + shape_str(od.shape()));
  }
  if (image1.defined() != image2.defined()) throw ShapeError("detect_mask: lateral path needs both images");
  Tensor lat_full, lat_half;
  if (image1.defined()) {
    if (image1.shape() != image2.shape() || image1.rank() != 3 || image1.dim(0) != image_size || image1.dim(1) != image_size) {
      throw ShapeError("detect_mask: lateral images must be [H, W, C] with H = W = " + std::to_string(image_size));
    }
    lat_full = abs_diff(gelu(lateral(image1)), gelu(lateral(image2)));
    lat_half = adaptive_avg_pool(lat_full, image_size / 2, image_size / 2);
  }
  auto x = gelu(stem(reshape(od, {grid, grid, od.dim(1)})));
  x = gelu(stage1(upsample_nearest2x(x)));
  auto pre = stage2(upsample_nearest2x(x));
  auto fine = gelu(lat_half.defined() ? add(pre, lat_half) : pre);
  auto up = upsample_nearest2x(fine);
  auto logits = logit(lat_full.defined() ? add(up, lat_full) : up);
  return {reshape(logits, {image_size, image_size}), fine};
}

Tensor detection_loss(const Tensor& logits, std::span<const double> mask) { return bce_with_logits(logits, mask, 1e-7); }

std::vector<std::uint8_t> binarize_logits(const Tensor& logits) {
  std::vector<std::uint8_t> out(logits.numel());
  const auto v = logits.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] >= 0.0 ? 1 : 0;
  return out;
}

DetectionTokenEncoder DetectionTokenEncoder::create(ParamStore& store, const DecoderConfig& cfg, Rng& rng) {
  DetectionTokenEncoder e;
  e.out_h = cfg.det_grid_h;
  e.out_w = cfg.det_grid_w;
  e.mlp = Mlp::create(store, "det_tokens.mlp", cfg.mid_channels, cfg.lm_dim, cfg.lm_dim, rng);
  return e;
}

Tensor DetectionTokenEncoder::operator()(const Tensor& fine) const {
  if (fine.rank() != 3) throw ShapeError("detection tokens: F_s2 must be [h, w, c]");
  auto pooled = adaptive_avg_pool(fine, out_h, out_w);
  return mlp(reshape(pooled, {out_h * out_w, fine.dim(2)}));
}

LmBlock LmBlock::create(ParamStore& store, const std::string& name, const DecoderConfig& cfg, Rng& rng) {
  LmBlock b;
  b.heads = cfg.lm_heads;
  b.ln1 = LayerNorm::create(store, name + ".ln1", cfg.lm_dim);
  b.wq = Linear::create(store, name + ".attn.q", cfg.lm_dim, cfg.lm_dim, rng, ParamGroup::main, false);
  b.wk = Linear::create(store, name + ".attn.k", cfg.lm_dim, cfg.lm_dim, rng, ParamGroup::main, false);
  b.wv = Linear::create(store, name + ".attn.v", cfg.lm_dim, cfg.lm_dim, rng, ParamGroup::main, false);
  b.wo = Linear::create(store, name + ".attn.out", cfg.lm_dim, cfg.lm_dim, rng, ParamGroup::main, true, 0.5);
  b.ln2 = LayerNorm::create(store, name + ".ln2", cfg.lm_dim);
  b.mlp = Mlp::create(store, name + ".mlp", cfg.lm_dim, cfg.lm_mlp_hidden, cfg.lm_dim, rng);
  return b;
}

Tensor LmBlock::operator()(const Tensor& x, const Tensor& mask) const {
  auto h = ln1(x);
  auto attn = scaled_dot_attention(split_heads(wq(h), heads), split_heads(wk(h), heads), split_heads(wv(h), heads), mask);
  auto y = add(x, wo(merge_heads(attn.values)));
  return add(y, mlp(ln2(y)));
}

CaptionDecoder CaptionDecoder::create(ParamStore& store, const DecoderConfig& cfg, Vocabulary vocab, Rng& rng) {
  if (cfg.lm_dim % cfg.lm_heads != 0) throw ConfigError("caption decoder: lm_dim must be divisible by heads");
  CaptionDecoder d;
  d.cfg_ = cfg;
  d.vocab_ = std::move(vocab);
  d.token_embed_ = store.add("lm.token_embed", normal_tensor({d.vocab_.size(), cfg.lm_dim}, 0.1, rng));
  d.prompt_ = store.add("lm.prompt", normal_tensor({1, cfg.lm_dim}, 0.1, rng));
  d.pos_embed_ = store.add("lm.pos_embed", normal_tensor({cfg.max_sequence(), cfg.lm_dim}, 0.05, rng));
  d.proj_ = Linear::create(store, "lm.visual_proj", cfg.feature_dim, cfg.lm_dim, rng, ParamGroup::encoder);
  for (std::size_t i = 0; i < cfg.lm_blocks; ++i) {
    d.blocks_.push_back(LmBlock::create(store, "lm.block" + std::to_string(i + 1), cfg, rng));
  }
  d.final_ln_ = LayerNorm::create(store, "lm.final_ln", cfg.lm_dim);
  d.head_ = Linear::create(store, "lm.head", cfg.lm_dim, d.vocab_.size(), rng);
  return d;
}

Tensor CaptionDecoder::assemble(const Tensor& detection_tokens, const Tensor& caption_features) const {
  if (caption_features.rank() != 2 || caption_features.dim(1) != cfg_.feature_dim) {
    throw ShapeError("assemble_lm_input: O^c must be [N, " + std::to_string(cfg_.feature_dim) + "]");
  }
  std::vector<Tensor> parts{prompt_};
  if (detection_tokens.defined()) {
    if (detection_tokens.rank() != 2 || detection_tokens.dim(1) != cfg_.lm_dim) {
      throw ShapeError("assemble_lm_input: detection tokens must be [N_m, D_LM]");
    }
    parts.push_back(detection_tokens);
  }
  parts.push_back(proj_(caption_features));
  return concat(parts, 0);
}

Tensor CaptionDecoder::logits(const Tensor& v_comb, std::span<const int> input_ids, Tensor* final_hidden) const {
  if (v_comb.rank() != 2 || v_comb.dim(1) != cfg_.lm_dim) throw ShapeError("caption decoder: V_comb must be [S, D_LM]");
  Tensor seq = v_comb;
  if (!input_ids.empty()) seq = concat({v_comb, embedding(token_embed_, input_ids)}, 0);
  const std::size_t t = seq.dim(0);
  if (t > cfg_.max_sequence()) throw ConfigError("caption decoder: sequence exceeds maximum length");
  auto x = add(seq, slice(pos_embed_, 0, 0, t));
  const auto mask = causal_mask(t);
  for (const auto& b : blocks_) x = b(x, mask);
  x = final_ln_(x);
  if (final_hidden) *final_hidden = x;
  return head_(x);
}

CaptionLossOutput CaptionDecoder::caption_loss(const Tensor& v_comb, std::span<const int> target) const {
  if (target.size() + 1 > cfg_.max_caption) {
    throw ConfigError("caption_loss: target of " + std::to_string(target.size()) + " tokens exceeds max length " +
                      std::to_string(cfg_.max_caption - 1));
  }
  std::vector<int> inputs{Vocabulary::kBos};
  inputs.insert(inputs.end(), target.begin(), target.end());
  std::vector<int> labels(target.begin(), target.end());
  labels.push_back(Vocabulary::kEos);
  Tensor hidden;
  auto all = logits(v_comb, inputs, &hidden);
  const std::size_t prefix = v_comb.dim(0);
  auto caption_logits = slice(all, 0, prefix, inputs.size());
  CaptionLossOutput out;
  out.loss = cross_entropy(caption_logits, labels);
  if (!target.empty()) out.hidden = slice(hidden, 0, prefix + 1, target.size());
  return out;
}

std::vector<int> CaptionDecoder::greedy_decode(const Tensor& v_comb, std::size_t max_len) const {
  NoGradGuard no_grad;
  max_len = std::min(max_len, cfg_.max_caption - 1);
  std::vector<int> inputs{Vocabulary::kBos};
  std::vector<int> out;
  const std::size_t v = vocab_.size();
  while (out.size() <= max_len) {
    auto lg = logits(v_comb, inputs);
    const auto row = lg.data().subspan((lg.dim(0) - 1) * v, v);
    const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == Vocabulary::kEos || out.size() == max_len) break;
    out.push_back(best);
    inputs.push_back(best);
  }
  return out;
}

}  // namespace ptnet
