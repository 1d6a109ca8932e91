#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ptnet/ops.hpp"
#include "ptnet/tensor.hpp"

namespace ptnet {

/// Learning-rate group. `encoder` covers the vision encoder and the
/// projection layers, which train at the lower rate.
enum class ParamGroup { main, encoder };

std::string to_string(ParamGroup group);
ParamGroup param_group_from_string(const std::string& name);

struct ParamEntry {
  std::string name;
  Tensor value;
  ParamGroup group = ParamGroup::main;
};

/// Ordered, named registry of trainable leaves. Iteration order is insertion
/// order, which fixes optimizer and checkpoint layouts.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor init, ParamGroup group = ParamGroup::main);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic generator used for every initialization and sampling step.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo = 0.0, double hi = 1.0);
  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi);
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer; derives independent stream seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when bias-free

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       ParamGroup group = ParamGroup::main, bool with_bias = true, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t dim,
                          ParamGroup group = ParamGroup::main);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

/// Two-layer perceptron with GELU between the layers.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp create(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                    Rng& rng, ParamGroup group = ParamGroup::main);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

struct AttentionOutput {
  Tensor values;   // [H, T, dk]
  Tensor weights;  // [H, T, S], rows sum to 1
};

/// softmax(q k^T / sqrt(dk) + mask) v per head. `additive_mask`, when given,
/// is a constant [T, S] tensor added to every head's scores.
AttentionOutput scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const std::optional<Tensor>& additive_mask = std::nullopt);

/// Strictly-upper-triangular -1e9 mask for causal self-attention over T positions.
Tensor causal_mask(std::size_t t);

}  // namespace ptnet
