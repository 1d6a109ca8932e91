#include "ptnet/pgcai.hpp"

#include "ptnet/errors.hpp"

namespace ptnet {

namespace {

DirectionParams create_direction(ParamStore& store, const std::string& name, std::size_t dim, Rng& rng) {
  DirectionParams p;
  p.wq = Linear::create(store, name + ".q", dim, dim, rng, ParamGroup::main, false);
  p.wk = Linear::create(store, name + ".k", dim, dim, rng, ParamGroup::main, false);
  p.wv = Linear::create(store, name + ".v", dim, dim, rng, ParamGroup::main, false);
  p.out = Linear::create(store, name + ".out", dim, dim, rng, ParamGroup::main, true, 0.5);
  return p;
}

void copy_values(const Linear& from, Linear& to) {
  auto dst = to.weight.mutable_data();
  std::copy(from.weight.data().begin(), from.weight.data().end(), dst.begin());
  if (from.bias.defined()) {
    auto b = to.bias.mutable_data();
    std::copy(from.bias.data().begin(), from.bias.data().end(), b.begin());
  }
}

}  // namespace

PgCaiLayer PgCaiLayer::create(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                              bool with_prototypes, Rng& rng) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("pgcai: dim must be divisible by heads");
  PgCaiLayer layer;
  layer.heads = heads;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::string lv = name + ".level" + std::to_string(i + 1);
    auto& level = layer.levels[i];
    if (with_prototypes) {
      RetrievalParams r;
      r.change_mlp = Mlp::create(store, lv + ".change_mlp", 3 * dim, 2 * dim, dim, rng);
      r.bank_norm = LayerNorm::create(store, lv + ".retrieve.bank_ln", dim);
      r.wq = Linear::create(store, lv + ".retrieve.q", dim, dim, rng, ParamGroup::main, false);
      r.wk = Linear::create(store, lv + ".retrieve.k", dim, dim, rng, ParamGroup::main, false);
      r.wv = Linear::create(store, lv + ".retrieve.v", dim, dim, rng, ParamGroup::main, false);
      r.out = Linear::create(store, lv + ".retrieve.out", dim, dim, rng, ParamGroup::main, true, 0.5);
      // M starts near 1 so early training sees close to plain cross-attention.
      for (auto& b : r.out.bias.mutable_data()) b = 1.0;
      level.retrieval = r;
    }
    level.forward = create_direction(store, lv + ".t1_to_t2", dim, rng);
    level.backward = create_direction(store, lv + ".t2_to_t1", dim, rng);
    copy_values(level.forward.wq, level.backward.wq);
    copy_values(level.forward.wk, level.backward.wk);
    copy_values(level.forward.wv, level.backward.wv);
    copy_values(level.forward.out, level.backward.out);
  }
  return layer;
}

Tensor change_query(const Tensor& f1, const Tensor& f2, const RetrievalParams& params) {
  if (f1.shape() != f2.shape()) throw ShapeError("change_query: F1 and F2 shapes differ");
  return params.change_mlp(concat({f1, f2, abs_diff(f1, f2)}, 1));
}

ModulationOutput prototype_modulation(const Tensor& queries, const Tensor& bank, const RetrievalParams& params,
                                      std::size_t heads) {
  if (bank.rank() != 3) throw ShapeError("prototype_modulation: bank must be [K, N, D]");
  const std::size_t d = bank.dim(2);
  if (queries.rank() != 2 || queries.dim(1) != d) throw ShapeError("prototype_modulation: queries must be [N, D]");
  auto flat = params.bank_norm(reshape(bank, {bank.dim(0) * bank.dim(1), d}));
  auto q = split_heads(params.wq(queries), heads);
  auto k = split_heads(params.wk(flat), heads);
  auto v = split_heads(params.wv(flat), heads);
  auto attn = scaled_dot_attention(q, k, v);
  return {params.out(merge_heads(attn.values)), attn.weights};
}

CrossAttentionOutput modulated_cross_attention(const Tensor& fa, const Tensor& fb, const Tensor& modulation,
                                               const DirectionParams& params, std::size_t heads) {
  if (fa.shape() != fb.shape()) throw ShapeError("cross_attention: F_a and F_b shapes differ");
  Tensor source = fb;
  if (modulation.defined()) {
    if (modulation.shape() != fb.shape()) throw ShapeError("cross_attention: modulation must match F_b");
    source = mul(fb, modulation);
  }
  auto q = split_heads(params.wq(fa), heads);
  auto k = split_heads(params.wk(source), heads);
  auto v = split_heads(params.wv(source), heads);
  auto attn = scaled_dot_attention(q, k, v);
  return {add(params.out(merge_heads(attn.values)), fa), attn.weights};
}

std::pair<Tensor, Tensor> pgcai_level(const Tensor& f1, const Tensor& f2, const Tensor& bank,
                                      const PgCaiLevelParams& params, std::size_t heads) {
  Tensor m;
  if (bank.defined() && params.retrieval) {
    m = prototype_modulation(change_query(f1, f2, *params.retrieval), bank, *params.retrieval, heads).modulation;
  }
  auto g1 = modulated_cross_attention(f1, f2, m, params.forward, heads).features;
  auto g2 = modulated_cross_attention(f2, f1, m, params.backward, heads).features;
  return {g1, g2};
}

ChangeAwareFeatures pgcai_forward(const FeaturePyramid& pyr1, const FeaturePyramid& pyr2, const Tensor& bank,
                                  const PgCaiLayer& layer1, const PgCaiLayer& layer2) {
  ChangeAwareFeatures out;
  for (std::size_t i = 0; i < kLevels; ++i) {
    if (pyr1.levels[i].shape() != pyr2.levels[i].shape()) throw ShapeError("pgcai: pyramid level shapes differ");
    auto [h1, h2] = pgcai_level(pyr1.levels[i], pyr2.levels[i], bank, layer1.levels[i], layer1.heads);
    auto [g1, g2] = pgcai_level(h1, h2, bank, layer2.levels[i], layer2.heads);
    out.g1[i] = g1;
    out.g2[i] = g2;
  }
  return out;
}

}  // namespace ptnet
