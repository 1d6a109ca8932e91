#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ptnet/metrics.hpp"
#include "ptnet/model.hpp"
#include "ptnet/synthscene.hpp"

namespace ptnet {

struct DwaState {
  std::vector<std::array<double, 2>> history;  // per-epoch mean (L_c, L_d)
  double temperature = 2.0;

  void record(double lc, double ld);
};

/// lambda_k = 2 exp(w_k / T) / sum_i exp(w_i / T).
std::array<double, 2> dwa_from_ratios(const std::array<double, 2>& w, double temperature);

/// dwa_from_ratios with w_k = L_k(t-1) / L_k(t-2);
/// (1, 1) until two epochs of history exist.
std::array<double, 2> dwa_weights(const DwaState& state);

/// lambda1 Lc + lambda2 Ld + align_weight La; an undefined La drops the term.
Tensor total_loss(const Tensor& lc, const Tensor& ld, const Tensor& la, double lambda1, double lambda2,
                  double align_weight = 0.3);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct Moments {
  std::vector<double> m, v;
};

/// One decoupled-weight-decay Adam update of `param` in place; `step` is
/// 1-based.
void adamw_update(std::span<double> param, std::span<const double> grad, Moments& moments, std::uint64_t step,
                  double lr, double weight_decay, const AdamWConfig& cfg = {});

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  /// Updates every parameter of `store` from its gradient. Throws
  /// NumericError (naming the parameter) on a non-finite gradient before any
  /// parameter changes.
  void step(ParamStore& store, double lr_main, double lr_encoder, double weight_decay);

  std::uint64_t steps() const { return step_; }
  void set_steps(std::uint64_t s) { step_ = s; }
  std::vector<Moments>& moments() { return moments_; }
  const std::vector<Moments>& moments() const { return moments_; }

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Moments> moments_;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double lr_encoder = 1e-4;
  double weight_decay = 5e-4;
  double align_weight = 0.3;
  double dwa_temperature = 2.0;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochReport {
  std::size_t epoch = 0;  // 1-based
  double lc = 0, ld = 0, la = 0, total = 0;
  double lambda1 = 1, lambda2 = 1;
  double lr = 0, lr_encoder = 0;
  double grad_norm = 0;  // mean pre-clip norm over batches
  std::size_t batches = 0;

  nlohmann::json to_json() const;
  static EpochReport from_json(const nlohmann::json& j);
  bool operator==(const EpochReport&) const = default;
};

struct TrainState {
  AdamW optimizer;
  DwaState dwa;
  std::size_t epoch = 0;  // completed epochs
};

/// Contiguous batches of at most `batch_size`; a trailing batch of one is
/// folded into the previous batch.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size);

/// Caption index (0..captions-1) used for a sample in a given epoch.
std::size_t caption_choice(std::uint64_t seed, std::size_t epoch, std::size_t sample, std::size_t captions);

EpochReport train_epoch(PtNet& model, const std::vector<const Sample*>& data, const TrainConfig& config,
                        TrainState& state);

struct Prediction {
  std::string id;
  std::string caption;
  std::vector<std::uint8_t> mask;
};

std::vector<Prediction> predict_all(const PtNet& model, const std::vector<const Sample*>& data, std::size_t threads = 1);

/// Scores predictions against the split's references and masks, including
/// change-type word accuracy.
MetricReport score_predictions(const std::vector<Prediction>& predictions, const std::vector<const Sample*>& data);

MetricReport evaluate(const PtNet& model, const std::vector<const Sample*>& data, std::size_t threads = 1);

/// Worker threads from PTN_THREADS (>= 1), else `fallback`.
std::size_t threads_from_env(std::size_t fallback = 1);

/// Runs f(i) for i in [0, n) on up to `threads` threads.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f);

}  // namespace ptnet
