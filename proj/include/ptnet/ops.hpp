#pragma once

// Differentiable tensor operations. All ops are pure: inputs are never
// modified, and the result participates in the tape when any input does.

#include <cstddef>
#include <span>
#include <vector>

#include "ptnet/tensor.hpp"

namespace ptnet {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

/// Adds a row vector (numel == last dim) to every last-axis slice.
Tensor add_row(const Tensor& x, const Tensor& row);
/// Multiplies every last-axis slice by a row vector (numel == last dim).
Tensor mul_row(const Tensor& x, const Tensor& row);

/// Batched product: a[..., m, k] x b[..., k, n]. `b` may also be a plain
/// [k, n] matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose_last2(const Tensor& x);

/// Max-subtracted softmax over the last axis. Throws NumericError on NaN/Inf.
Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// tanh-approximated GELU.
Tensor gelu(const Tensor& x);
/// |a - b| with subgradient 0 at ties.
Tensor abs_diff(const Tensor& a, const Tensor& b);

/// Arithmetic mean along `axis`; the axis is kept with size 1.
Tensor mean_over(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// out.flat[i] = x.flat[index[i]] (index == npos yields 0). Backward is the
/// matching scatter-add. Building block for layout permutations.
Tensor gather_flat(const Tensor& x, std::vector<std::size_t> index, Shape out_shape);
inline constexpr std::size_t kNoSource = static_cast<std::size_t>(-1);

/// Rows of a [V, D] table selected by id.
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Per-row layer normalization over the last axis with affine gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Each row scaled to unit L2 norm.
Tensor l2_normalize_rows(const Tensor& x);

/// Mean token cross-entropy of logits [T, V] against class ids.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
/// Mean binary cross-entropy with probabilities sigmoid(logits) clamped to
/// [eps, 1 - eps]; clamped entries carry no gradient. Targets must be 0/1.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets, double eps = 1e-7);

// Spatial layout helpers on [H, W, C] maps.
/// 3x3 neighbourhoods with zero padding: [H, W, C] -> [H*W, 9*C].
Tensor im2col3x3(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);
/// PyTorch-style adaptive average pooling to [out_h, out_w, C].
Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// Non-overlapping p x p patches flattened row-major: [H, W, C] -> [N, p*p*C].
Tensor patchify(const Tensor& image, std::size_t patch);

/// [T, H*dk] -> [H, T, dk]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [H, T, dk] -> [T, H*dk]
Tensor merge_heads(const Tensor& x);

}  // namespace ptnet
