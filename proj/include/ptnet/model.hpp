#pragma once

// Full change-captioning / change-detection network.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptnet/alignment.hpp"
#include "ptnet/backbone.hpp"
#include "ptnet/decoders.hpp"
#include "ptnet/pgcai.hpp"
#include "ptnet/prototype.hpp"
#include "ptnet/tamg.hpp"
#include "ptnet/vocab.hpp"

namespace ptnet {

/// Component switches. All on is the full network; all off is the baseline
/// (unmodulated cross-attention, uniform level fusion, no detection tokens,
/// no alignment loss).
struct AblationFlags {
  bool proto = true;
  bool tamg = true;
  bool det_guided = true;
  bool align = true;

  bool operator==(const AblationFlags&) const = default;
  nlohmann::json to_json() const;
  static AblationFlags from_json(const nlohmann::json& j);
};

/// The five cumulative configurations: baseline, +Proto, +TAMG, +Det. Guided, +L_a.
std::vector<std::pair<std::string, AblationFlags>> ablation_ladder();

struct ModelConfig {
  BackboneConfig backbone;
  DecoderConfig decoder;
  std::size_t text_dim = 32;
  double tau_align = 0.07;
  std::uint64_t seed = 0;
  AblationFlags flags;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Decoder geometry derived from the backbone so the two always agree.
DecoderConfig decoder_config_for(const BackboneConfig& backbone, DecoderConfig base = {});

/// The backbone exactly as the network initializes it for `seed`; used to
/// compute prototype statistics before training.
Backbone make_backbone(ParamStore& store, const BackboneConfig& cfg, std::uint64_t seed);

struct ForwardOutput {
  Tensor det_logits;        // [H, W]
  Tensor v_comb;            // [S, D_LM]
  Tensor detection_tokens;  // [N_m, D_LM] or undefined
  TaskFeatures task;
  ChangeAwareFeatures cam;
};

struct SampleLosses {
  Tensor caption;    // L_c
  Tensor detection;  // L_d
  Tensor ev;         // [1, d_t], undefined without alignment
  Tensor et;         // [1, d_t], frozen target
};

class PtNet {
 public:
  /// `bank` is required exactly when flags.proto is set.
  static PtNet create(const ModelConfig& config, Vocabulary vocab, std::optional<PrototypeBank> bank = std::nullopt);

  ForwardOutput forward(const Tensor& image1, const Tensor& image2) const;
  /// Forward plus per-sample losses for one reference caption.
  SampleLosses losses(const Tensor& image1, const Tensor& image2, std::span<const std::uint8_t> mask,
                      const std::string& caption) const;

  struct Prediction {
    std::vector<std::uint8_t> mask;
    std::string caption;
  };
  Prediction predict(const Tensor& image1, const Tensor& image2) const;

  const ModelConfig& config() const { return config_; }
  const AblationFlags& flags() const { return config_.flags; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Vocabulary& vocab() const { return decoder_.vocab(); }
  const std::optional<PrototypeBank>& bank() const { return bank_; }
  const Backbone& backbone() const { return backbone_; }
  const TextAnchor& anchor() const { return anchor_; }
  const CaptionDecoder& decoder() const { return decoder_; }
  const DetectionHead& detection_head() const { return det_head_; }
  const std::optional<AlignmentHead>& alignment_head() const { return align_head_; }

 private:
  ModelConfig config_;
  ParamStore store_;
  Backbone backbone_;
  std::optional<PrototypeBank> bank_;
  Tensor bank_param_;
  PgCaiLayer layer1_, layer2_;
  std::optional<TamgParams> tamg_;
  DetectionHead det_head_;
  std::optional<DetectionTokenEncoder> det_tokens_;
  CaptionDecoder decoder_;
  std::optional<AlignmentHead> align_head_;
  TextAnchor anchor_;
};

/// Fixed caption vocabulary of the synthetic benchmark.
Vocabulary default_vocabulary();

}  // namespace ptnet

namespace ptnet {

struct Sample;

/// Prototype bank from the training samples, using the backbone the network
/// starts from for `model_seed`. Throws ConfigError when k exceeds the sample
/// count.
PrototypeBank build_prototype_bank(const std::vector<const Sample*>& samples, const BackboneConfig& backbone,
                                   std::uint64_t model_seed, const BankConfig& config, const std::string& dataset_hash);

}  // namespace ptnet
