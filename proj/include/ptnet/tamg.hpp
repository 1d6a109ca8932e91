#pragma once

// Task-adaptive multi-head gating: each change-aware map is split into heads,
// each head is scaled by a sigmoid gate computed from its globally pooled
// features, and the 8 gated maps (4 levels x 2 phases) are fused with
// softmax weights. Detection and captioning keep fully disjoint parameters.

#include <array>
#include <optional>
#include <vector>

#include "ptnet/pgcai.hpp"

namespace ptnet {

inline constexpr std::size_t kFusionSlots = 2 * kLevels;

/// Slot index for (level i, phase j), both 1-based.
constexpr std::size_t fusion_slot(std::size_t level, std::size_t phase) { return (level - 1) * 2 + (phase - 1); }

enum class Task { detection, caption };

struct TaskGateParams {
  Tensor weights;  // [8, D]: slot row holds H consecutive d_k gate vectors
  Tensor biases;   // [8, H]
  Tensor scores;   // [8], softmax -> fusion weights beta
};

struct TamgParams {
  TaskGateParams detection;
  TaskGateParams caption;
  std::size_t heads = 2;

  static TamgParams create(ParamStore& store, std::size_t dim, std::size_t heads, Rng& rng);
  const TaskGateParams& for_task(Task t) const { return t == Task::detection ? detection : caption; }
};

struct TaskFeatures {
  Tensor detection;  // O^d, [N, D]
  Tensor caption;    // O^c, [N, D]
};

struct GateOutput {
  Tensor gated;  // [N, D]
  Tensor gates;  // [1, H]
};

struct FusionOutput {
  Tensor fused;  // [N, D]
  Tensor beta;   // [1, 8]
};

/// weights: [1, D] (or [D]); biases: [1, H] (or [H]).
GateOutput head_gate(const Tensor& features, const Tensor& weights, const Tensor& biases, std::size_t heads);

FusionOutput fuse_levels(const std::vector<Tensor>& gated, const Tensor& scores);

std::vector<Tensor> ordered_slots(const ChangeAwareFeatures& cam);

TaskFeatures tamg_forward(const ChangeAwareFeatures& cam, const TamgParams& params);

/// Ablated path: no gating, uniform mean over the 8 slots shared by both tasks.
TaskFeatures uniform_fusion(const ChangeAwareFeatures& cam);

}  // namespace ptnet
