#include "ptnet/model.hpp"

#include "ptnet/errors.hpp"
#include "ptnet/synthscene.hpp"

namespace ptnet {

using nlohmann::json;

namespace {

// Independent init streams, so toggling one component leaves the others unchanged.
enum Stream : std::uint64_t { kBackbone = 1, kLayer1, kLayer2, kTamg, kDetHead, kDetTokens, kDecoder, kAlign };

}  // namespace

json AblationFlags::to_json() const {
  return {{"proto", proto}, {"tamg", tamg}, {"det_guided", det_guided}, {"align", align}};
}

AblationFlags AblationFlags::from_json(const json& j) {
  return {j.at("proto").get<bool>(), j.at("tamg").get<bool>(), j.at("det_guided").get<bool>(), j.at("align").get<bool>()};
}

std::vector<std::pair<std::string, AblationFlags>> ablation_ladder() {
  return {{"baseline", {false, false, false, false}},
          {"+proto", {true, false, false, false}},
          {"+tamg", {true, true, false, false}},
          {"+det_guided", {true, true, true, false}},
          {"+align", {true, true, true, true}}};
}

json ModelConfig::to_json() const {
  return {{"image_size", backbone.image_size},
          {"channels", backbone.channels},
          {"patch", backbone.patch},
          {"dim", backbone.dim},
          {"heads", backbone.heads},
          {"mlp_hidden", backbone.mlp_hidden},
          {"mid_channels", decoder.mid_channels},
          {"lm_dim", decoder.lm_dim},
          {"lm_heads", decoder.lm_heads},
          {"lm_blocks", decoder.lm_blocks},
          {"lm_mlp_hidden", decoder.lm_mlp_hidden},
          {"max_caption", decoder.max_caption},
          {"det_grid_h", decoder.det_grid_h},
          {"det_grid_w", decoder.det_grid_w},
          {"text_dim", text_dim},
          {"tau_align", tau_align},
          {"seed", seed},
          {"flags", flags.to_json()}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.backbone.image_size = j.at("image_size").get<std::size_t>();
  c.backbone.channels = j.at("channels").get<std::size_t>();
  c.backbone.patch = j.at("patch").get<std::size_t>();
  c.backbone.dim = j.at("dim").get<std::size_t>();
  c.backbone.heads = j.at("heads").get<std::size_t>();
  c.backbone.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  DecoderConfig d;
  d.mid_channels = j.at("mid_channels").get<std::size_t>();
  d.lm_dim = j.at("lm_dim").get<std::size_t>();
  d.lm_heads = j.at("lm_heads").get<std::size_t>();
  d.lm_blocks = j.at("lm_blocks").get<std::size_t>();
  d.lm_mlp_hidden = j.at("lm_mlp_hidden").get<std::size_t>();
  d.max_caption = j.at("max_caption").get<std::size_t>();
  d.det_grid_h = j.at("det_grid_h").get<std::size_t>();
  d.det_grid_w = j.at("det_grid_w").get<std::size_t>();
  c.decoder = decoder_config_for(c.backbone, d);
  c.text_dim = j.at("text_dim").get<std::size_t>();
  c.tau_align = j.at("tau_align").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.flags = AblationFlags::from_json(j.at("flags"));
  return c;
}

DecoderConfig decoder_config_for(const BackboneConfig& backbone, DecoderConfig base) {
  base.feature_dim = backbone.dim;
  base.grid = backbone.grid();
  base.image_size = backbone.image_size;
  base.image_channels = backbone.channels;
  return base;
}

Backbone make_backbone(ParamStore& store, const BackboneConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed, kBackbone));
  return Backbone::create(store, cfg, rng);
}

Vocabulary default_vocabulary() { return Vocabulary(caption_words()); }

PtNet PtNet::create(const ModelConfig& config, Vocabulary vocab, std::optional<PrototypeBank> bank) {
  const auto& f = config.flags;
  if (f.proto && !bank) throw ConfigError("prototype modulation is enabled but no prototype bank was given");
  PtNet m;
  m.config_ = config;
  m.config_.decoder = decoder_config_for(config.backbone, config.decoder);
  const auto& dc = m.config_.decoder;
  const std::size_t dim = config.backbone.dim, heads = config.backbone.heads;

  m.backbone_ = make_backbone(m.store_, config.backbone, config.seed);
  if (f.proto) {
    const Shape expected{bank->k(), config.backbone.tokens(), dim};
    if (bank->prototypes.shape() != expected) {
      throw ConfigError("prototype bank shape " + shape_str(bank->prototypes.shape()) + " does not match " +
                        shape_str(expected));
    }
    m.bank_ = std::move(bank);
    m.bank_param_ = m.store_.add("prototype.bank", Tensor::from(expected, m.bank_->prototypes.to_vector()));
    m.bank_->prototypes = m.bank_param_;
  }
  Rng r1(mix_seed(config.seed, kLayer1)), r2(mix_seed(config.seed, kLayer2));
  m.layer1_ = PgCaiLayer::create(m.store_, "pgcai.layer1", dim, heads, f.proto, r1);
  m.layer2_ = PgCaiLayer::create(m.store_, "pgcai.layer2", dim, heads, f.proto, r2);
  if (f.tamg) {
    Rng r(mix_seed(config.seed, kTamg));
    m.tamg_ = TamgParams::create(m.store_, dim, heads, r);
  }
  Rng rd(mix_seed(config.seed, kDetHead));
  m.det_head_ = DetectionHead::create(m.store_, dc, rd);
  if (f.det_guided) {
    Rng r(mix_seed(config.seed, kDetTokens));
    m.det_tokens_ = DetectionTokenEncoder::create(m.store_, dc, r);
  }
  Rng rc(mix_seed(config.seed, kDecoder));
  m.decoder_ = CaptionDecoder::create(m.store_, dc, std::move(vocab), rc);
  if (f.align) {
    Rng r(mix_seed(config.seed, kAlign));
    m.align_head_ = AlignmentHead::create(m.store_, dc.lm_dim, config.text_dim, r, config.tau_align);
  }
  m.anchor_ = TextAnchor(config.text_dim, config.text_dim);
  return m;
}

ForwardOutput PtNet::forward(const Tensor& image1, const Tensor& image2) const {
  ForwardOutput out;
  const auto [p1, p2] = backbone_.pyramid_pair(image1, image2);
  out.cam = pgcai_forward(p1, p2, bank_param_, layer1_, layer2_);
  out.task = tamg_ ? tamg_forward(out.cam, *tamg_) : uniform_fusion(out.cam);
  auto det = det_head_(out.task.detection, image1, image2);
  out.det_logits = det.logits;
  if (det_tokens_) out.detection_tokens = (*det_tokens_)(det.fine);
  out.v_comb = decoder_.assemble(out.detection_tokens, out.task.caption);
  return out;
}

SampleLosses PtNet::losses(const Tensor& image1, const Tensor& image2, std::span<const std::uint8_t> mask,
                           const std::string& caption) const {
  const auto fwd = forward(image1, image2);
  std::vector<double> target(mask.begin(), mask.end());
  SampleLosses out;
  out.detection = detection_loss(fwd.det_logits, target);
  const auto ids = decoder_.vocab().encode(caption);
  auto cap = decoder_.caption_loss(fwd.v_comb, ids);
  out.caption = cap.loss;
  if (align_head_) {
    if (!cap.hidden.defined()) throw ConfigError("alignment needs a non-empty caption");
    out.ev = pool_project(cap.hidden, *align_head_);
    out.et = anchor_embed(tokenize(caption), anchor_);
  }
  return out;
}

PtNet::Prediction PtNet::predict(const Tensor& image1, const Tensor& image2) const {
  NoGradGuard no_grad;
  const auto fwd = forward(image1, image2);
  Prediction p;
  p.mask = binarize_logits(fwd.det_logits);
  p.caption = decoder_.vocab().decode(decoder_.greedy_decode(fwd.v_comb, decoder_.config().max_caption - 1));
  return p;
}

}  // namespace ptnet

namespace ptnet {

PrototypeBank build_prototype_bank(const std::vector<const Sample*>& samples, const BackboneConfig& backbone,
                                   std::uint64_t model_seed, const BankConfig& config, const std::string& dataset_hash) {
  if (samples.empty()) throw ConfigError("build_bank: no samples");
  if (config.k == 0 || config.k > samples.size()) {
    throw ConfigError("build_bank: k=" + std::to_string(config.k) + " needs at least that many samples, got " +
                      std::to_string(samples.size()));
  }
  ParamStore store;
  const auto encoder = make_backbone(store, backbone, model_seed);
  std::vector<ChangeSampleStats> stats;
  stats.reserve(samples.size());
  for (const auto* s : samples) stats.push_back(compute_sample_stats(encoder, s->image1, s->image2, s->mask));
  return build_bank_from_stats(stats, backbone.grid(), config, dataset_hash);
}

}  // namespace ptnet
