#include "ptnet/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "ptnet/errors.hpp"

namespace ptnet {

using nlohmann::json;

void DwaState::record(double lc, double ld) { history.push_back({lc, ld}); }

std::array<double, 2> dwa_from_ratios(const std::array<double, 2>& w, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("dwa: temperature must be positive");
  const double mx = std::max(w[0], w[1]) / temperature;
  const double e0 = std::exp(w[0] / temperature - mx), e1 = std::exp(w[1] / temperature - mx);
  return {2.0 * e0 / (e0 + e1), 2.0 * e1 / (e0 + e1)};
}

std::array<double, 2> dwa_weights(const DwaState& state) {
  if (!(state.temperature > 0.0)) throw ConfigError("dwa: temperature must be positive");
  const auto& h = state.history;
  if (h.size() < 2) return {1.0, 1.0};
  const auto& prev = h[h.size() - 1];
  const auto& prev2 = h[h.size() - 2];
  std::array<double, 2> w{};
  for (std::size_t k = 0; k < 2; ++k) {
    if (!(prev[k] > 0.0) || !(prev2[k] > 0.0)) throw ConfigError("dwa: loss history must be positive");
    w[k] = prev[k] / prev2[k];
  }
  return dwa_from_ratios(w, state.temperature);
}

Tensor total_loss(const Tensor& lc, const Tensor& ld, const Tensor& la, double lambda1, double lambda2,
                  double align_weight) {
  for (const Tensor* t : {&lc, &ld, &la}) {
    if (t->defined() && !t->all_finite()) throw NumericError("total_loss: non-finite loss term");
  }
  auto total = add(scale(lc, lambda1), scale(ld, lambda2));
  if (la.defined()) total = add(total, scale(la, align_weight));
  return total;
}

void adamw_update(std::span<double> param, std::span<const double> grad, Moments& mo, std::uint64_t step, double lr,
                  double weight_decay, const AdamWConfig& cfg) {
  if (step == 0) throw ConfigError("adamw: step is 1-based");
  if (grad.size() != param.size()) throw ShapeError("adamw: gradient size mismatch");
  if (mo.m.size() != param.size()) {
    mo.m.assign(param.size(), 0.0);
    mo.v.assign(param.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    param[i] -= lr * weight_decay * param[i];
    mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
    mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = mo.m[i] / bc1, vhat = mo.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void AdamW::step(ParamStore& store, double lr_main, double lr_encoder, double weight_decay) {
  const auto& entries = store.entries();
  if (moments_.empty()) moments_.resize(entries.size());
  if (moments_.size() != entries.size()) throw ConfigError("adamw: optimizer state does not match the parameters");
  for (const auto& e : entries) {
    if (e.value.has_grad() && !e.value.all_finite()) throw NumericError("adamw: non-finite value in " + e.name);
    if (!e.value.has_grad()) continue;
    for (double g : e.value.grad()) {
      if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + e.name);
    }
  }
  ++step_;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor p = entries[i].value;
    const double lr = entries[i].group == ParamGroup::encoder ? lr_encoder : lr_main;
    std::vector<double> zeros;
    std::span<const double> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), 0.0);
      g = zeros;
    }
    adamw_update(p.mutable_data(), g, moments_[i], step_, lr, weight_decay, cfg_);
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0;
  for (const auto& e : store.entries()) {
    if (!e.value.has_grad()) continue;
    for (double g : e.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& e : store.entries()) {
      if (!e.value.has_grad()) continue;
      Tensor t = e.value;
      for (double& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size},     {"lr", lr},
          {"lr_encoder", lr_encoder}, {"weight_decay", weight_decay}, {"align_weight", align_weight},
          {"dwa_temperature", dwa_temperature}, {"clip_norm", clip_norm}, {"seed", seed},
          {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.lr_encoder = j.at("lr_encoder").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.align_weight = j.at("align_weight").get<double>();
  c.dwa_temperature = j.at("dwa_temperature").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.threads = j.value("threads", std::size_t{1});
  return c;
}

json EpochReport::to_json() const {
  return {{"epoch", epoch},   {"L_c", lc},         {"L_d", ld},           {"L_a", la},
          {"total", total},   {"lambda1", lambda1}, {"lambda2", lambda2}, {"lr", lr},
          {"lr_encoder", lr_encoder}, {"grad_norm", grad_norm}, {"batches", batches}};
}

EpochReport EpochReport::from_json(const json& j) {
  EpochReport r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.lc = j.at("L_c").get<double>();
  r.ld = j.at("L_d").get<double>();
  r.la = j.at("L_a").get<double>();
  r.total = j.at("total").get<double>();
  r.lambda1 = j.at("lambda1").get<double>();
  r.lambda2 = j.at("lambda2").get<double>();
  r.lr = j.at("lr").get<double>();
  r.lr_encoder = j.at("lr_encoder").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.batches = j.at("batches").get<std::size_t>();
  return r;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> b;
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) b.push_back(i);
    out.push_back(std::move(b));
  }
  if (out.size() >= 2 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

std::size_t caption_choice(std::uint64_t seed, std::size_t epoch, std::size_t sample, std::size_t captions) {
  if (captions == 0) throw ConfigError("sample has no captions");
  Rng rng(mix_seed(mix_seed(seed ^ 0xc0ffee, epoch), sample));
  return static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(captions - 1)));
}

std::size_t threads_from_env(std::size_t fallback) {
  if (const char* v = std::getenv("PTN_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
    }
    throw ConfigError(std::string("PTN_THREADS must be a positive integer, got '") + v + "'");
  }
  return fallback;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

EpochReport train_epoch(PtNet& model, const std::vector<const Sample*>& data, const TrainConfig& config,
                        TrainState& state) {
  if (data.empty()) throw ConfigError("train_epoch: empty training split");
  const bool align = model.flags().align;
  if (align && data.size() < 2) throw ConfigError("train_epoch: alignment needs at least 2 samples");
  state.dwa.temperature = config.dwa_temperature;
  const std::size_t epoch = state.epoch + 1;
  const auto [lambda1, lambda2] = dwa_weights(state.dwa);

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle(mix_seed(config.seed, epoch));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.integer(0, static_cast<std::int64_t>(i - 1)))]);
  }

  EpochReport rep;
  rep.epoch = epoch;
  rep.lambda1 = lambda1;
  rep.lambda2 = lambda2;
  rep.lr = config.lr;
  rep.lr_encoder = config.lr_encoder;
  double sum_lc = 0, sum_ld = 0, sum_la = 0;
  auto& store = model.params();
  store.zero_grad();

  for (const auto& batch : make_batches(order.size(), config.batch_size)) {
    const std::size_t b = batch.size();
    std::vector<SampleLosses> ls(b);
    parallel_for(b, config.threads, [&](std::size_t i) {
      const std::size_t idx = order[batch[i]];
      const Sample& s = *data[idx];
      const auto& caption = s.captions[caption_choice(config.seed, epoch, idx, s.captions.size())];
      ls[i] = model.losses(s.image1, s.image2, s.mask, caption);
    });
    for (const auto& l : ls) {
      if (!l.caption.all_finite() || !l.detection.all_finite()) throw NumericError("non-finite loss in epoch " + std::to_string(epoch));
      sum_lc += l.caption.item();
      sum_ld += l.detection.item();
    }

    // The contrastive term couples the batch: differentiate it once with
    // respect to the stacked e_v rows, then push each row's gradient back
    // through its own sample graph.
    std::vector<double> gev;
    std::size_t dt = 0;
    if (align && b >= 2) {
      dt = ls[0].ev.numel();
      std::vector<double> ev_rows, et_rows;
      for (const auto& l : ls) {
        const auto ev = l.ev.to_vector(), et = l.et.to_vector();
        ev_rows.insert(ev_rows.end(), ev.begin(), ev.end());
        et_rows.insert(et_rows.end(), et.begin(), et.end());
      }
      auto ev = Tensor::from({b, dt}, std::move(ev_rows), true);
      auto et = Tensor::from({b, dt}, std::move(et_rows));
      auto la = infonce(ev, et, model.config().tau_align);
      if (!la.all_finite()) throw NumericError("non-finite alignment loss in epoch " + std::to_string(epoch));
      sum_la += la.item() * static_cast<double>(b);
      backward(la);
      gev.assign(ev.grad().begin(), ev.grad().end());
    }

    std::vector<GradSink> sinks(b);
    parallel_for(b, config.threads, [&](std::size_t i) {
      GradSinkScope scope(sinks[i]);
      auto loss = add(scale(ls[i].caption, lambda1 / static_cast<double>(b)),
                      scale(ls[i].detection, lambda2 / static_cast<double>(b)));
      if (!gev.empty()) {
        std::vector<double> row(gev.begin() + static_cast<std::ptrdiff_t>(i * dt),
                                gev.begin() + static_cast<std::ptrdiff_t>((i + 1) * dt));
        loss = add(loss, scale(sum_all(mul(ls[i].ev, Tensor::from({1, dt}, std::move(row)))), config.align_weight));
      }
      backward(loss);
    });
    for (auto& s : sinks) s.flush();
    ls.clear();

    rep.grad_norm += clip_grad_norm(store, config.clip_norm);
    state.optimizer.step(store, config.lr, config.lr_encoder, config.weight_decay);
    store.zero_grad();
    ++rep.batches;
  }

  const auto n = static_cast<double>(data.size());
  rep.lc = sum_lc / n;
  rep.ld = sum_ld / n;
  rep.la = align ? sum_la / n : 0.0;
  rep.total = lambda1 * rep.lc + lambda2 * rep.ld + (align ? config.align_weight * rep.la : 0.0);
  rep.grad_norm /= static_cast<double>(rep.batches);
  state.dwa.record(rep.lc, rep.ld);
  state.epoch = epoch;
  return rep;
}

std::vector<Prediction> predict_all(const PtNet& model, const std::vector<const Sample*>& data, std::size_t threads) {
  std::vector<Prediction> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    auto p = model.predict(data[i]->image1, data[i]->image2);
    out[i] = {data[i]->id, std::move(p.caption), std::move(p.mask)};
  });
  return out;
}

MetricReport score_predictions(const std::vector<Prediction>& predictions, const std::vector<const Sample*>& data) {
  if (data.empty()) throw ConfigError("evaluate: empty split");
  if (predictions.size() != data.size()) throw ConfigError("evaluate: prediction count does not match the split");
  std::vector<std::string> ids;
  std::vector<Tokens> cands;
  std::vector<References> refs;
  std::vector<std::vector<std::uint8_t>> preds, gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (predictions[i].id != data[i]->id) throw ConfigError("evaluate: prediction " + predictions[i].id + " is out of order");
    ids.push_back(data[i]->id);
    cands.push_back(tokenize(predictions[i].caption));
    References r;
    for (const auto& c : data[i]->captions) r.push_back(tokenize(c));
    refs.push_back(std::move(r));
    preds.push_back(predictions[i].mask);
    gts.push_back(data[i]->mask);
  }
  MetricReport report;
  score_captions(report, ids, cands, refs);
  score_masks(report, ids, preds, gts);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto t = classify_caption(predictions[i].caption);
    const bool ok = t && *t == data[i]->change_type;
    report.per_sample[i].caption = predictions[i].caption;
    report.per_sample[i].type_correct = ok;
    correct += ok ? 1 : 0;
  }
  report.word_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  report.metadata["parameters"] = metric_parameters();
  return report;
}

MetricReport evaluate(const PtNet& model, const std::vector<const Sample*>& data, std::size_t threads) {
  if (data.empty()) throw ConfigError("evaluate: empty split");
  return score_predictions(predict_all(model, data, threads), data);
}

}  // namespace ptnet
