#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ptnet/nn.hpp"
#include "ptnet/vocab.hpp"

namespace ptnet {

struct DecoderConfig {
  std::size_t feature_dim = 32;  // D
  std::size_t grid = 4;          // token grid side g
  std::size_t image_size = 32;
  std::size_t image_channels = 3;
  std::size_t mid_channels = 16;  // channels of the two finer FPN maps
  std::size_t lm_dim = 64;        // D_LM (= K_d)
  std::size_t lm_heads = 2;
  std::size_t lm_blocks = 2;
  std::size_t lm_mlp_hidden = 128;
  std::size_t max_caption = 16;  // predicted tokens including EOS
  std::size_t det_grid_h = 2;    // H_m
  std::size_t det_grid_w = 2;    // W_m

  std::size_t tokens() const { return grid * grid; }
  std::size_t det_tokens() const { return det_grid_h * det_grid_w; }
  /// prompt + detection tokens + visual tokens + BOS + caption positions
  std::size_t max_sequence() const { return 1 + det_tokens() + tokens() + max_caption; }
};

// ----------------------------------------------------------------------------
// Detection branch

/// 3x3 "same" convolution on an [H, W, Cin] map implemented as im2col + Linear.
struct Conv3x3 {
  Linear linear;  // [9*Cin, Cout]
  static Conv3x3 create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct DetectionOutput {
  Tensor logits;  // [H, W]
  Tensor fine;    // F_s2: the finest internal map, [H/2, W/2, mid_channels]
};

/// Top-down decoder: g x g tokens -> two 2x upsample+conv stages -> one more
/// upsample and a 1-channel logit conv at full resolution.
struct DetectionHead {
  Conv3x3 stem;    // at g x g
  Conv3x3 stage1;  // at 2g x 2g
  Conv3x3 stage2;  // at 4g x 4g  (= F_s2)
  Conv3x3 logit;   // at full resolution
  Conv3x3 lateral;  // shared per-phase image conv; |difference| joins the 4g and 8g maps
  std::size_t grid = 4;
  std::size_t image_size = 32;

  static DetectionHead create(ParamStore& store, const DecoderConfig& cfg, Rng& rng);
  /// Without images the lateral path is skipped.
  DetectionOutput operator()(const Tensor& od, const Tensor& image1 = {}, const Tensor& image2 = {}) const;
};

/// Mean BCE between sigmoid(logits) and a binary mask, probabilities clamped to
/// [1e-7, 1 - 1e-7].
Tensor detection_loss(const Tensor& logits, std::span<const double> mask);
/// Probability >= 0.5 marks a changed pixel.
std::vector<std::uint8_t> binarize_logits(const Tensor& logits);

/// Adaptive average pooling of F_s2 to H_m x W_m, flattened to N_m tokens and
/// passed through a two-layer MLP to K_d channels.
struct DetectionTokenEncoder {
  Mlp mlp;
  std::size_t out_h = 2, out_w = 2;

  static DetectionTokenEncoder create(ParamStore& store, const DecoderConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& fine) const;  // -> [N_m, K_d]
};

// ----------------------------------------------------------------------------
// Caption branch

struct LmBlock {
  LayerNorm ln1;
  Linear wq, wk, wv, wo;
  LayerNorm ln2;
  Mlp mlp;
  std::size_t heads = 2;

  static LmBlock create(ParamStore& store, const std::string& name, const DecoderConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& mask) const;
};

struct CaptionLossOutput {
  Tensor loss;    // mean token cross-entropy over caption targets (incl. EOS)
  Tensor hidden;  // last-layer states at the caption-token input positions, [L, D_LM]
};

/// Tiny causal decoder standing in for the language model.
class CaptionDecoder {
 public:
  static CaptionDecoder create(ParamStore& store, const DecoderConfig& cfg, Vocabulary vocab, Rng& rng);

  /// [prompt ; D_d ; W_c O^c] (detection rows omitted when `detection_tokens`
  /// is undefined).
  Tensor assemble(const Tensor& detection_tokens, const Tensor& caption_features) const;

  /// Logits for every position of [V_comb ; embed(input_ids)], [T, V].
  Tensor logits(const Tensor& v_comb, std::span<const int> input_ids, Tensor* final_hidden = nullptr) const;

  /// Teacher-forced loss for `target` (word ids, no BOS/EOS).
  CaptionLossOutput caption_loss(const Tensor& v_comb, std::span<const int> target) const;

  /// Greedy argmax decoding until EOS or `max_len` tokens.
  std::vector<int> greedy_decode(const Tensor& v_comb, std::size_t max_len) const;

  const Vocabulary& vocab() const { return vocab_; }
  const DecoderConfig& config() const { return cfg_; }
  const Linear& projection() const { return proj_; }
  const Linear& output_head() const { return head_; }

 private:
  DecoderConfig cfg_;
  Vocabulary vocab_;
  Tensor token_embed_;  // [V, D_LM]
  Tensor prompt_;       // [1, D_LM]
  Tensor pos_embed_;    // [max_sequence, D_LM]
  Linear proj_;         // W_c
  std::vector<LmBlock> blocks_;
  LayerNorm final_ln_;
  Linear head_;
};

}  // namespace ptnet
