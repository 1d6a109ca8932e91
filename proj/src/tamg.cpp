#include "ptnet/tamg.hpp"

#include <cmath>

#include "ptnet/errors.hpp"

namespace ptnet {

namespace {

// [D, H] indicator: column h selects the d_k channels of head h.
Tensor head_indicator(std::size_t dim, std::size_t heads) {
  const std::size_t dk = dim / heads;
  std::vector<double> e(dim * heads, 0.0);
  for (std::size_t c = 0; c < dim; ++c) e[c * heads + c / dk] = 1.0;
  return Tensor::from({dim, heads}, std::move(e));
}

TaskGateParams create_task(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads, Rng& rng) {
  TaskGateParams p;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim / heads));
  p.weights = store.add(name + ".gate_w", normal_tensor({kFusionSlots, dim}, stddev, rng));
  p.biases = store.add(name + ".gate_b", Tensor::full({kFusionSlots, heads}, 2.0));
  p.scores = store.add(name + ".fusion_s", Tensor::zeros({kFusionSlots}));
  return p;
}

Tensor task_forward(const std::vector<Tensor>& slots, const TaskGateParams& p, std::size_t heads) {
  std::vector<Tensor> gated;
  gated.reserve(slots.size());
  for (std::size_t s = 0; s < slots.size(); ++s) {
    gated.push_back(head_gate(slots[s], slice(p.weights, 0, s, 1), slice(p.biases, 0, s, 1), heads).gated);
  }
  return fuse_levels(gated, p.scores).fused;
}

}  // namespace

TamgParams TamgParams::create(ParamStore& store, std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("tamg: dim must be divisible by heads");
  TamgParams p;
  p.heads = heads;
  p.detection = create_task(store, "tamg.detection", dim, heads, rng);
  p.caption = create_task(store, "tamg.caption", dim, heads, rng);
  return p;
}

GateOutput head_gate(const Tensor& features, const Tensor& weights, const Tensor& biases, std::size_t heads) {
  if (features.rank() != 2) throw ShapeError("head_gate: features must be [N, D]");
  const std::size_t d = features.dim(1);
  if (heads == 0 || d % heads != 0) throw ShapeError("head_gate: D=" + std::to_string(d) + " not divisible by H=" + std::to_string(heads));
  if (weights.numel() != d || biases.numel() != heads) throw ShapeError("head_gate: gate parameter shapes do not match");
  const auto indicator = head_indicator(d, heads);
  auto pooled = mean_over(features, 0);                                  // [1, D]
  auto logits = matmul(mul(pooled, reshape(weights, {1, d})), indicator);  // [1, H]
  auto gates = sigmoid(add(logits, reshape(biases, {1, heads})));
  auto expanded = matmul(gates, transpose_last2(indicator));             // [1, D]
  return {mul_row(features, expanded), gates};
}

FusionOutput fuse_levels(const std::vector<Tensor>& gated, const Tensor& scores) {
  if (gated.empty()) throw ShapeError("fuse_levels: no inputs");
  if (scores.numel() != gated.size()) throw ShapeError("fuse_levels: one score per input required");
  const auto shape = gated[0].shape();
  const std::size_t n = gated[0].numel();
  std::vector<Tensor> rows;
  rows.reserve(gated.size());
  for (const auto& g : gated) {
    if (g.shape() != shape) throw ShapeError("fuse_levels: inputs must share a shape");
    rows.push_back(reshape(g, {1, n}));
  }
  auto beta = softmax_last(reshape(scores, {1, gated.size()}));
  auto fused = reshape(matmul(beta, concat(rows, 0)), shape);
  return {fused, beta};
}

std::vector<Tensor> ordered_slots(const ChangeAwareFeatures& cam) {
  std::vector<Tensor> slots(kFusionSlots);
  for (std::size_t i = 1; i <= kLevels; ++i) {
    slots[fusion_slot(i, 1)] = cam.g1[i - 1];
    slots[fusion_slot(i, 2)] = cam.g2[i - 1];
  }
  return slots;
}

TaskFeatures tamg_forward(const ChangeAwareFeatures& cam, const TamgParams& params) {
  const auto slots = ordered_slots(cam);
  return {task_forward(slots, params.detection, params.heads), task_forward(slots, params.caption, params.heads)};
}

TaskFeatures uniform_fusion(const ChangeAwareFeatures& cam) {
  const auto slots = ordered_slots(cam);
  Tensor sum = slots[0];
  for (std::size_t s = 1; s < slots.size(); ++s) sum = add(sum, slots[s]);
  auto mean = scale(sum, 1.0 / static_cast<double>(slots.size()));
  return {mean, mean};
}

}  // namespace ptnet
