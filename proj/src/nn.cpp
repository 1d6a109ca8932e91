#include "ptnet/nn.hpp"

#include <cmath>

#include "ptnet/errors.hpp"

namespace ptnet {

std::string to_string(ParamGroup group) { return group == ParamGroup::encoder ? "encoder" : "main"; }

ParamGroup param_group_from_string(const std::string& name) {
  if (name == "encoder") return ParamGroup::encoder;
  if (name == "main") return ParamGroup::main;
  throw FormatError("unknown parameter group '" + name + "'");
}

Tensor ParamStore::add(const std::string& name, Tensor init, ParamGroup group) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (!init.is_leaf()) throw std::logic_error("parameter '" + name + "' must be a leaf");
  init.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back({name, init, group});
  return init;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

double Rng::normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

std::int64_t Rng::integer(std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      ParamGroup group, bool with_bias, double gain) {
  Linear l;
  const double stddev = gain / std::sqrt(static_cast<double>(in));
  l.weight = store.add(name + ".weight", normal_tensor({in, out}, stddev, rng), group);
  if (with_bias) l.bias = store.add(name + ".bias", Tensor::zeros({out}), group);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  auto y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t dim, ParamGroup group) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor::full({dim}, 1.0), group);
  ln.beta = store.add(name + ".beta", Tensor::zeros({dim}), group);
  return ln;
}

Mlp Mlp::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                Rng& rng, ParamGroup group) {
  return {Linear::create(store, name + ".fc1", in, hidden, rng, group),
          Linear::create(store, name + ".fc2", hidden, out, rng, group)};
}

AttentionOutput scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const std::optional<Tensor>& additive_mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError("attention: expected [H, T, dk] operands");
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
  auto scores = scale(matmul(q, transpose_last2(k)), inv);
  if (additive_mask) {
    const auto& m = *additive_mask;
    if (m.rank() != 2 || m.dim(0) != scores.dim(1) || m.dim(1) != scores.dim(2)) {
      throw ShapeError("attention: mask shape " + shape_str(m.shape()) + " does not match scores");
    }
    std::vector<double> tiled;
    tiled.reserve(scores.numel());
    for (std::size_t h = 0; h < scores.dim(0); ++h) tiled.insert(tiled.end(), m.data().begin(), m.data().end());
    scores = add(scores, Tensor::from(scores.shape(), std::move(tiled)));
  }
  auto weights = softmax_last(scores);
  return {matmul(weights, v), weights};
}

Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
  return Tensor::from({t, t}, std::move(m));
}

}  // namespace ptnet
