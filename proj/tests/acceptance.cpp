// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "ptnet/alignment.hpp"
#include "ptnet/checkpoint.hpp"
#include "ptnet/container.hpp"
#include "ptnet/metrics.hpp"
#include "ptnet/model.hpp"
#include "ptnet/trainer.hpp"
#include "ptnet/vocab.hpp"
#include "samples.hpp"

using namespace ptnet;
using ptnet::testing::gradcheck;
using ptnet::testing::gradcheck_leaves;
using ptnet::testing::GradCheckReport;
using ptnet::testing::probe_sum;
using ptnet::testing::random_tensor;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradProbes = 12;
constexpr double kGradSeconds = 60.0;
constexpr double kSumTol = 1e-6;
constexpr std::size_t kInstances = 100;
constexpr double kDwaSumTol = 1e-9;
constexpr double kDwaClosedForm = 1.4621;
constexpr double kDwaClosedTol = 1e-4;
constexpr double kInfoNceTol = 1e-6;
constexpr double kBankTol = 1e-5;
constexpr double kMetricTol = 1e-6;
constexpr double kSmokeF1 = 0.80 - 0.05;
constexpr double kSmokeWordAcc = 0.90 - 0.05;
constexpr std::size_t kSmokeEpochs = 40;
constexpr double kSmokeSeconds = 15 * 60;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!failures_.empty()) failures_ += "; ";
      failures_ += what;
    }
  }
  bool pass() const { return pass_; }
  Outcome outcome(const std::string& summary) const { return {pass_, pass_ ? summary : summary + " | " + failures_}; }

 private:
  bool pass_ = true;
  std::string failures_;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double grad_norm(const Tensor& t) {
  if (!t.has_grad()) return 0.0;
  double n = 0;
  for (double g : t.grad()) n += g * g;
  return std::sqrt(n);
}

double prefix_grad_norm(const PtNet& model, const std::string& needle) {
  double n = 0;
  for (const auto& e : model.params().entries())
    if (e.name.find(needle) != std::string::npos) n += grad_norm(e.value);
  return n;
}

FeaturePyramid random_pyramid(Rng& rng, std::size_t n, std::size_t d) {
  FeaturePyramid p;
  p.grid = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  for (auto& lv : p.levels) lv = random_tensor({n, d}, rng);
  return p;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  Check c;
  std::size_t checks = 0;
  double worst = 0;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    ++checks;
    worst = std::max(worst, r.max_rel_error);
    c.expect(r.probes >= 10, name + " ran " + std::to_string(r.probes) + " probes");
    c.expect(r.max_rel_error <= kGradTol, name + " rel err " + fmt(r.max_rel_error) + " (" + r.worst + ")");
  };
  using In = std::vector<Tensor>;
  auto op = [&](const std::string& name, std::function<Tensor(const In&)> f, In inputs) {
    record(name, gradcheck([&](const In& x) { return probe_sum(f(x), 99); }, inputs, kGradProbes, checks + 1));
  };
  Rng rng(2024);
  auto r = [&](Shape s, double lo = -1, double hi = 1) { return random_tensor(std::move(s), rng, lo, hi); };

  op("add", [](const In& x) { return add(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  op("sub", [](const In& x) { return sub(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  op("mul", [](const In& x) { return mul(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  op("scale", [](const In& x) { return scale(x[0], -1.7); }, {r({5})});
  op("add_scalar", [](const In& x) { return add_scalar(x[0], 0.3); }, {r({5})});
  op("add_row", [](const In& x) { return add_row(x[0], x[1]); }, {r({3, 4}), r({4})});
  op("mul_row", [](const In& x) { return mul_row(x[0], x[1]); }, {r({3, 4}), r({4})});
  op("matmul", [](const In& x) { return matmul(x[0], x[1]); }, {r({3, 4}), r({4, 2})});
  op("matmul batched", [](const In& x) { return matmul(x[0], x[1]); }, {r({2, 3, 4}), r({2, 4, 2})});
  op("transpose_last2", [](const In& x) { return transpose_last2(x[0]); }, {r({2, 3, 4})});
  op("softmax_last", [](const In& x) { return softmax_last(x[0]); }, {r({3, 5}, -3, 3)});
  op("log_softmax_last", [](const In& x) { return log_softmax_last(x[0]); }, {r({3, 5}, -3, 3)});
  op("sigmoid", [](const In& x) { return sigmoid(x[0]); }, {r({6}, -4, 4)});
  op("gelu", [](const In& x) { return gelu(x[0]); }, {r({6}, -3, 3)});
  op("abs_diff", [](const In& x) { return abs_diff(x[0], x[1]); }, {r({8}), r({8})});
  op("mean_over", [](const In& x) { return mean_over(x[0], 0); }, {r({4, 3})});
  op("sum_all", [](const In& x) { return sum_all(x[0]); }, {r({4, 3})});
  op("mean_all", [](const In& x) { return mean_all(x[0]); }, {r({4, 3})});
  op("reshape", [](const In& x) { return reshape(x[0], {6, 2}); }, {r({3, 4})});
  op("concat", [](const In& x) { return concat({x[0], x[1]}, 0); }, {r({2, 3}), r({1, 3})});
  op("slice", [](const In& x) { return slice(x[0], 1, 1, 2); }, {r({3, 4})});
  op("gather_flat", [](const In& x) { return gather_flat(x[0], {5, 0, 5, 2}, {2, 2}); }, {r({6})});
  op("embedding", [](const In& x) {
       std::vector<int> ids{2, 0, 2};
       return embedding(x[0], ids);
     },
     {r({4, 3})});
  op("layer_norm", [](const In& x) { return layer_norm(x[0], x[1], x[2]); }, {r({3, 6}), r({6}), r({6})});
  op("l2_normalize_rows", [](const In& x) { return l2_normalize_rows(x[0]); }, {r({3, 4})});
  op("cross_entropy", [](const In& x) {
       std::vector<int> t{1, 0, 4};
       return cross_entropy(x[0], t);
     },
     {r({3, 5}, -2, 2)});
  op("bce_with_logits", [](const In& x) {
       std::vector<double> t{1, 0, 0, 1, 1, 0};
       return bce_with_logits(x[0], t);
     },
     {r({6}, -3, 3)});
  op("im2col3x3", [](const In& x) { return im2col3x3(x[0]); }, {r({4, 4, 2})});
  op("upsample_nearest2x", [](const In& x) { return upsample_nearest2x(x[0]); }, {r({2, 3, 2})});
  op("adaptive_avg_pool", [](const In& x) { return adaptive_avg_pool(x[0], 2, 2); }, {r({4, 5, 2})});
  op("patchify", [](const In& x) { return patchify(x[0], 2); }, {r({4, 4, 3})});
  op("split_heads", [](const In& x) { return split_heads(x[0], 2); }, {r({3, 4})});
  op("merge_heads", [](const In& x) { return merge_heads(x[0]); }, {r({2, 3, 2})});

  {
    ParamStore store;
    Rng prng(1);
    auto l1 = PgCaiLayer::create(store, "l1", 32, 2, true, prng);
    auto l2 = PgCaiLayer::create(store, "l2", 32, 2, true, prng);
    auto p1 = random_pyramid(rng, 16, 32), p2 = random_pyramid(rng, 16, 32);
    for (auto& lv : p1.levels) lv.set_requires_grad(true);
    for (auto& lv : p2.levels) lv.set_requires_grad(true);
    auto bank = r({4, 16, 32}).set_requires_grad(true);
    auto f = [&] {
      auto cam = pgcai_forward(p1, p2, bank, l1, l2);
      Tensor total;
      for (std::size_t i = 0; i < kLevels; ++i) {
        auto s = add(probe_sum(cam.g1[i], 10 + i), probe_sum(cam.g2[i], 20 + i));
        total = total.defined() ? add(total, s) : s;
      }
      return total;
    };
    record("pgcai forward", gradcheck_leaves({bank, p1.levels[0], p1.levels[2], p2.levels[1], p2.levels[3],
                                              l1.levels[1].retrieval->wq.weight, l2.levels[3].forward.wv.weight},
                                             f, 3 * kGradProbes, 31));
  }
  {
    ParamStore store;
    Rng prng(2);
    auto params = TamgParams::create(store, 32, 2, prng);
    ChangeAwareFeatures cam;
    for (std::size_t i = 0; i < kLevels; ++i) {
      cam.g1[i] = r({16, 32}).set_requires_grad(true);
      cam.g2[i] = r({16, 32}).set_requires_grad(true);
    }
    auto f = [&] {
      auto out = tamg_forward(cam, params);
      return add(probe_sum(out.detection, 40), probe_sum(out.caption, 41));
    };
    record("tamg", gradcheck_leaves({cam.g1[0], cam.g2[3], params.detection.weights, params.detection.biases,
                                     params.detection.scores, params.caption.weights, params.caption.scores},
                                    f, 2 * kGradProbes, 42));
  }
  {
    ParamStore store;
    Rng prng(3);
    DecoderConfig dc;
    auto head = DetectionHead::create(store, dc, prng);
    auto od = r({16, 32}).set_requires_grad(true);
    auto i1 = r({32, 32, 3}, 0, 1), i2 = r({32, 32, 3}, 0, 1);
    std::vector<double> mask(1024, 0.0);
    for (std::size_t y = 5; y < 14; ++y)
      for (std::size_t x = 8; x < 20; ++x) mask[y * 32 + x] = 1.0;
    record("detection loss", gradcheck_leaves({od, head.stem.linear.weight, head.lateral.linear.weight,
                                               head.logit.linear.bias},
                                              [&] { return detection_loss(head(od, i1, i2).logits, mask); },
                                              kGradProbes, 43));
  }
  {
    ParamStore store;
    Rng prng(4);
    DecoderConfig dc;
    auto dec = CaptionDecoder::create(store, dc, default_vocabulary(), prng);
    auto v = r({1 + dc.det_tokens() + dc.tokens(), dc.lm_dim}).set_requires_grad(true);
    auto target = dec.vocab().encode("a block was added at the top left");
    record("caption loss", gradcheck_leaves({v, dec.output_head().weight, dec.projection().weight},
                                            [&] { return dec.caption_loss(v, target).loss; }, kGradProbes, 44));
  }
  {
    ParamStore store;
    Rng prng(5);
    auto head = AlignmentHead::create(store, 64, 32, prng);
    TextAnchor anchor;
    auto h1 = r({3, 64}).set_requires_grad(true), h2 = r({5, 64}).set_requires_grad(true);
    auto et = concat({anchor_embed({"a", "block", "was", "added"}, anchor), anchor_embed({"no", "change"}, anchor)}, 0);
    record("alignment loss",
           gradcheck_leaves({h1, h2, head.proj.weight},
                            [&] { return infonce(concat({pool_project(h1, head), pool_project(h2, head)}, 0), et, 0.07); },
                            kGradProbes, 45));
  }
  const double secs = seconds_since(t0);
  c.expect(secs < kGradSeconds, "runtime " + fmt(secs) + " s");
  return c.outcome(std::to_string(checks) + " checks, max rel err " + fmt(worst, 3) + " (tol " + fmt(kGradTol) + "), " +
                   fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 2. Normalization invariants

double worst_row_sum_error(const Tensor& w) {
  const std::size_t cols = w.dim(w.rank() - 1), rows = w.numel() / cols;
  double worst = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += w.at(r * cols + j);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

Outcome normalization_invariants() {
  Check c;
  Rng rng(7);
  ParamStore store;
  auto layer = PgCaiLayer::create(store, "l", 32, 2, true, rng);
  std::array<double, 5> worst{};
  for (std::size_t t = 0; t < kInstances; ++t) {
    NoGradGuard ng;
    const auto& lv = layer.levels[t % kLevels];
    auto f1 = random_tensor({16, 32}, rng, -2, 2), f2 = random_tensor({16, 32}, rng, -2, 2);
    auto bank = random_tensor({4, 16, 32}, rng, -3, 3);
    auto mod = prototype_modulation(change_query(f1, f2, *lv.retrieval), bank, *lv.retrieval, 2);
    worst[0] = std::max(worst[0], worst_row_sum_error(mod.weights));
    auto att = modulated_cross_attention(f1, f2, mod.modulation, lv.forward, 2);
    worst[1] = std::max(worst[1], worst_row_sum_error(att.weights));

    std::vector<Tensor> slots;
    for (std::size_t s = 0; s < kFusionSlots; ++s) slots.push_back(random_tensor({16, 32}, rng));
    auto fused = fuse_levels(slots, random_tensor({kFusionSlots}, rng, -5, 5));
    worst[2] = std::max(worst[2], worst_row_sum_error(fused.beta));

    ClusterModel cm;
    const auto k = static_cast<std::size_t>(rng.integer(2, 6));
    cm.centers = random_tensor({k, 8}, rng, 0, 2);
    cm.temperature = rng.uniform(0.1, 3.0);
    auto z = random_tensor({8}, rng, 0, 2).to_vector();
    auto alpha = soft_assign(z, cm);
    double s = 0;
    for (double a : alpha) s += a;
    worst[3] = std::max(worst[3], std::abs(s - 1.0));

    std::vector<std::size_t> omega;
    for (std::size_t i = 0; i < 16; ++i)
      if (rng.uniform() < 0.3) omega.push_back(i);
    if (omega.empty()) omega.push_back(static_cast<std::size_t>(rng.integer(0, 15)));
    auto w = rbf_weights(omega, token_grid_coords(4), rng.uniform(0.3, 4.0));
    worst[4] = std::max(worst[4], worst_row_sum_error(w));
  }
  const char* names[] = {"retrieval attention", "cross attention", "fusion beta", "soft assignment", "rbf rows"};
  std::string summary;
  for (std::size_t i = 0; i < worst.size(); ++i) {
    c.expect(worst[i] <= kSumTol, std::string(names[i]) + " off by " + fmt(worst[i]));
    summary += std::string(i ? ", " : "") + names[i] + " " + fmt(worst[i], 2);
  }
  return c.outcome(std::to_string(kInstances) + " instances each, max |sum-1|: " + summary);
}

// ---------------------------------------------------------------------------
// 3. DWA

Outcome dwa_checks() {
  Check c;
  Rng rng(9);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    DwaState s;
    s.temperature = rng.uniform(0.25, 5.0);
    const int epochs = static_cast<int>(rng.integer(2, 6));
    for (int e = 0; e < epochs; ++e) s.record(rng.uniform(1e-3, 10.0), rng.uniform(1e-3, 10.0));
    const auto l = dwa_weights(s);
    worst = std::max(worst, std::abs(l[0] + l[1] - 2.0));
  }
  c.expect(worst <= kDwaSumTol, "sum off by " + fmt(worst));
  const auto closed = dwa_from_ratios({2.0, 0.0}, 2.0);
  c.expect(std::abs(closed[0] - kDwaClosedForm) <= kDwaClosedTol, "lambda1 = " + fmt(closed[0], 8));
  return c.outcome("1000 histories, max |sum-2| " + fmt(worst, 2) + "; w=(2,0), T=2 gives lambda1 " + fmt(closed[0], 6));
}

// ---------------------------------------------------------------------------
// 4. InfoNCE degenerate case

Outcome infonce_degenerate() {
  Check c;
  std::string summary;
  for (std::size_t b : {2u, 4u, 8u}) {
    auto e = l2_normalize_rows(Tensor::full({b, 32}, 0.5));
    const double got = infonce(e, e, 0.07).item();
    const double err = std::abs(got - std::log(static_cast<double>(b)));
    c.expect(err <= kInfoNceTol, "B=" + std::to_string(b) + " off by " + fmt(err));
    summary += (summary.empty() ? "" : ", ") + ("B=" + std::to_string(b) + " err " + fmt(err, 2));
  }
  return c.outcome(summary);
}

// ---------------------------------------------------------------------------
// 5. Prototype pipeline against a brute-force recomputation

Outcome prototype_oracle() {
  Check c;
  auto samples = ptnet::testing::make_samples(20, 77);
  auto data = ptnet::testing::pointers(samples);
  ModelConfig mc;
  BankConfig bc;
  bc.seed = 5;
  const std::uint64_t model_seed = 5;
  auto bank = build_prototype_bank(data, mc.backbone, model_seed, bc, "oracle");

  ParamStore store;
  auto encoder = make_backbone(store, mc.backbone, model_seed);
  const std::size_t n = 16, d = 32, g = 4, patch = 8;
  struct Row {
    std::vector<double> diff;  // n*d
    std::vector<std::size_t> omega;
    std::vector<double> pooled;
  };
  std::vector<Row> rows;
  for (const auto* s : data) {
    NoGradGuard ng;
    auto [p1, p2] = encoder.pyramid_pair(s->image1, s->image2);
    Row r;
    r.diff.resize(n * d);
    for (std::size_t i = 0; i < n * d; ++i) r.diff[i] = std::abs(p1.levels[1].at(i) - p2.levels[1].at(i));
    for (std::size_t t = 0; t < n; ++t) {
      std::size_t hits = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) hits += s->mask[((t / g) * patch + y) * 32 + (t % g) * patch + x];
      if (2 * hits >= patch * patch) r.omega.push_back(t);
    }
    r.pooled.assign(d, 0.0);
    const auto& src = r.omega;
    const std::size_t cnt = src.empty() ? n : src.size();
    for (std::size_t t = 0; t < n; ++t) {
      if (!src.empty() && std::find(src.begin(), src.end(), t) == src.end()) continue;
      for (std::size_t j = 0; j < d; ++j) r.pooled[j] += r.diff[t * d + j] / static_cast<double>(cnt);
    }
    rows.push_back(std::move(r));
  }
  Points pts;
  for (const auto& r : rows) pts.push_back(r.pooled);
  Points centers;
  for (auto i : kmeans_seed(pts, bc.k, bc.seed)) centers.push_back(pts[i]);
  auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };
  for (std::size_t it = 0; it < bc.max_iters; ++it) {
    Points sums(bc.k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(bc.k, 0);
    for (const auto& p : pts) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < bc.k; ++k)
        if (dist2(p, centers[k]) < dist2(p, centers[best])) best = k;
      ++counts[best];
      for (std::size_t j = 0; j < d; ++j) sums[best][j] += p[j];
    }
    Points next = centers;
    for (std::size_t k = 0; k < bc.k; ++k)
      if (counts[k])
        for (std::size_t j = 0; j < d; ++j) next[k][j] = sums[k][j] / static_cast<double>(counts[k]);
    const bool done = next == centers;
    centers = std::move(next);
    if (done) break;
  }
  std::vector<double> want(bc.k * n * d, 0.0);
  for (const auto& r : rows) {
    std::vector<double> alpha(bc.k);
    double z = 0;
    for (std::size_t k = 0; k < bc.k; ++k) z += alpha[k] = std::exp(-dist2(r.pooled, centers[k]) / bc.temperature);
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<double> e(d, 0.0);
      if (r.omega.empty()) {
        e = r.pooled;
      } else {
        double wsum = 0;
        for (auto l : r.omega) {
          const double dr = double(v / g) - double(l / g), dc = double(v % g) - double(l % g);
          const double w = std::exp(-(dr * dr + dc * dc) / (2 * bc.sigma * bc.sigma));
          wsum += w;
          for (std::size_t j = 0; j < d; ++j) e[j] += w * r.diff[l * d + j];
        }
        for (auto& x : e) x /= wsum;
      }
      for (std::size_t k = 0; k < bc.k; ++k)
        for (std::size_t j = 0; j < d; ++j) want[(k * n + v) * d + j] += alpha[k] / z * e[j];
    }
  }
  double worst = 0;
  c.expect(bank.prototypes.shape() == Shape({bc.k, n, d}), "bank shape " + shape_str(bank.prototypes.shape()));
  for (std::size_t i = 0; i < want.size() && i < bank.prototypes.numel(); ++i)
    worst = std::max(worst, std::abs(bank.prototypes.at(i) - want[i]));
  c.expect(worst <= kBankTol, "max abs diff " + fmt(worst));
  return c.outcome("20 samples, K=" + std::to_string(bc.k) + ", max |bank - oracle| " + fmt(worst, 2) + " (tol " +
                   fmt(kBankTol) + ")");
}

// ---------------------------------------------------------------------------
// 6. Residual identity

Outcome residual_identity() {
  Check c;
  auto samples = ptnet::testing::make_samples(4, 91);
  auto data = ptnet::testing::pointers(samples);
  ModelConfig mc;
  auto bank = build_prototype_bank(data, mc.backbone, 0, BankConfig{}, "id");
  ParamStore store;
  Rng rng(3);
  auto l1 = PgCaiLayer::create(store, "l1", 32, 2, true, rng);
  auto l2 = PgCaiLayer::create(store, "l2", 32, 2, true, rng);
  auto zero = [](Linear& l) {
    for (auto& v : l.weight.mutable_data()) v = 0;
    if (l.bias.defined())
      for (auto& v : l.bias.mutable_data()) v = 0;
  };
  for (auto* layer : {&l1, &l2})
    for (auto& lv : layer->levels) {
      zero(lv.forward.out);
      zero(lv.backward.out);
    }
  ParamStore bstore;
  auto encoder = make_backbone(bstore, mc.backbone, 0);
  std::size_t compared = 0;
  for (const auto* s : data) {
    NoGradGuard ng;
    auto [p1, p2] = encoder.pyramid_pair(s->image1, s->image2);
    auto cam = pgcai_forward(p1, p2, bank.prototypes, l1, l2);
    for (std::size_t i = 0; i < kLevels; ++i) {
      c.expect(cam.g1[i].to_vector() == p1.levels[i].to_vector(), "G1 level " + std::to_string(i + 1) + " differs");
      c.expect(cam.g2[i].to_vector() == p2.levels[i].to_vector(), "G2 level " + std::to_string(i + 1) + " differs");
      compared += 2;
    }
  }
  return c.outcome(std::to_string(compared) + " feature maps equal their inputs bit-for-bit");
}

// ---------------------------------------------------------------------------
// 7. Ablation switch semantics

Outcome ablation_semantics() {
  Check c;
  auto samples = ptnet::testing::make_samples(8, 55);
  auto data = ptnet::testing::pointers(samples);
  ModelConfig base;
  auto bank = build_prototype_bank(data, base.backbone, 0, BankConfig{}, "ablation");
  const auto ladder = ablation_ladder();
  c.expect(ladder.size() == 5, "ladder has " + std::to_string(ladder.size()) + " rungs");

  auto is_proto = [](const std::string& n) {
    return n == "prototype.bank" || n.find(".retrieve.") != std::string::npos || n.find(".change_mlp.") != std::string::npos;
  };
  auto starts = [](const std::string& p) { return [p](const std::string& n) { return n.rfind(p, 0) == 0; }; };
  const std::vector<std::function<bool(const std::string&)>> added = {is_proto, starts("tamg."), starts("det_tokens."),
                                                                      starts("align.")};
  std::vector<PtNet> models;
  std::vector<std::set<std::string>> names;
  for (const auto& [label, flags] : ladder) {
    ModelConfig mc = base;
    mc.flags = flags;
    models.push_back(PtNet::create(mc, default_vocabulary(), flags.proto ? std::optional(bank) : std::nullopt));
    auto v = models.back().params().names();
    names.emplace_back(v.begin(), v.end());
  }
  for (const auto& n : names[0])
    for (const auto& pred : added) c.expect(!pred(n), "baseline holds " + n);
  for (std::size_t i = 1; i < names.size(); ++i) {
    std::size_t grew = 0;
    for (const auto& n : names[i - 1]) c.expect(names[i].count(n) == 1, ladder[i].first + " drops " + n);
    for (const auto& n : names[i]) {
      if (names[i - 1].count(n)) continue;
      ++grew;
      c.expect(added[i - 1](n), ladder[i].first + " adds unexpected " + n);
    }
    c.expect(grew > 0, ladder[i].first + " adds no parameters");
  }

  // Gradient-path probes on a changed pair.
  const auto* s = data[1];
  auto probe = [&](PtNet& m, bool caption) {
    m.params().zero_grad();
    auto l = m.losses(s->image1, s->image2, s->mask, s->captions[0]);
    backward(caption ? l.caption : l.detection);
  };
  // baseline: caption loss never reaches the detection head
  probe(models[0], true);
  c.expect(prefix_grad_norm(models[0], "det.") == 0.0, "baseline L_c reaches det head");
  // +proto: the bank learns from both tasks
  probe(models[1], true);
  c.expect(grad_norm(models[1].params().get("prototype.bank")) > 0, "+proto bank gets no L_c gradient");
  probe(models[1], false);
  c.expect(grad_norm(models[1].params().get("prototype.bank")) > 0, "+proto bank gets no L_d gradient");
  // +tamg: disjoint task gates
  probe(models[2], true);
  c.expect(prefix_grad_norm(models[2], "tamg.caption.") > 0, "+tamg caption gate idle under L_c");
  c.expect(prefix_grad_norm(models[2], "tamg.detection.") == 0.0, "+tamg detection gate reached by L_c");
  c.expect(prefix_grad_norm(models[2], "det.") == 0.0, "+tamg L_c reaches det head");
  probe(models[2], false);
  c.expect(prefix_grad_norm(models[2], "tamg.detection.") > 0, "+tamg detection gate idle under L_d");
  c.expect(prefix_grad_norm(models[2], "tamg.caption.") == 0.0, "+tamg caption gate reached by L_d");
  // +det_guided: caption loss flows through detection tokens into the detection branch
  probe(models[3], true);
  c.expect(prefix_grad_norm(models[3], "det_tokens.") > 0, "+det_guided tokens idle under L_c");
  c.expect(grad_norm(models[3].params().get("det.stage2.weight")) > 0, "+det_guided L_c misses det.stage2");
  c.expect(grad_norm(models[3].params().get("det.logit.weight")) == 0.0, "+det_guided L_c reaches det.logit");
  // +align: only the full model emits alignment embeddings
  for (std::size_t i = 0; i < 4; ++i) {
    auto l = models[i].losses(s->image1, s->image2, s->mask, s->captions[0]);
    c.expect(!l.ev.defined(), ladder[i].first + " emits e_v");
  }
  {
    auto& m = models[4];
    m.params().zero_grad();
    auto a = m.losses(data[1]->image1, data[1]->image2, data[1]->mask, data[1]->captions[0]);
    auto b = m.losses(data[2]->image1, data[2]->image2, data[2]->mask, data[2]->captions[0]);
    c.expect(a.ev.defined() && a.et.defined(), "+align lacks e_v/e_t");
    if (a.ev.defined()) {
      backward(infonce(concat({a.ev, b.ev}, 0), concat({a.et, b.et}, 0), m.config().tau_align));
      c.expect(prefix_grad_norm(m, "align.") > 0, "+align head idle under L_a");
      c.expect(prefix_grad_norm(m, "det.logit") == 0.0, "L_a reaches det.logit");
    }
  }
  std::string sizes;
  for (std::size_t i = 0; i < names.size(); ++i) sizes += (i ? " < " : "") + std::to_string(names[i].size());
  return c.outcome("parameter tensors per rung " + sizes + "; gradient paths probed per flag");
}

// ---------------------------------------------------------------------------
// 8. Metric oracles

Outcome metric_oracles() {
  Check c;
  auto t = [](const std::string& s) { return tokenize(s); };
  const double b1 = bleu({t("a b c")}, {{t("a b d")}}, 1);
  c.expect(std::abs(b1 - 2.0 / 3.0) <= kMetricTol, "BLEU-1 " + fmt(b1, 10));

  const double p = 0.75, r = 1.0, b2 = 1.2 * 1.2;
  const double rouge = rouge_l(t("a b c d"), {t("a c d")});
  c.expect(std::abs(rouge - (1 + b2) * p * r / (r + b2 * p)) <= kMetricTol, "ROUGE-L " + fmt(rouge, 10));

  const double meteor = meteor_lite(t("b a"), {t("a b")});
  c.expect(std::abs(meteor - 0.5) <= kMetricTol, "METEOR swapped pair " + fmt(meteor, 10));
  const auto words = t("a block was added at the top left");
  const double m8 = meteor_lite(words, {words});
  c.expect(std::abs(m8 - (1 - 0.5 / 512.0)) <= kMetricTol, "METEOR identical " + fmt(m8, 10));

  const auto cider = cider_d({t("a b"), t("a c")}, {{t("a b")}, {t("a d")}});
  c.expect(std::abs(cider.per_sample[0] - 5.0) <= kMetricTol && std::abs(cider.per_sample[1]) <= kMetricTol &&
               std::abs(cider.corpus - 2.5) <= kMetricTol,
           "CIDEr-D toy " + fmt(cider.corpus, 10));
  const auto one = cider_d({words}, {{words, words, words, words, words}});
  c.expect(std::abs(one.corpus - 10.0) <= kMetricTol, "CIDEr-D degenerate " + fmt(one.corpus, 10));

  Rng rng(12);
  std::size_t identity_ok = 0;
  for (std::size_t trial = 0; trial < kInstances; ++trial) {
    std::vector<std::uint8_t> a(1024), g(1024);
    const double pa = rng.uniform(0.01, 0.5), pg = rng.uniform(0.01, 0.5);
    for (auto& v : a) v = rng.uniform() < pa;
    for (auto& v : g) v = rng.uniform() < pg;
    const auto s = mask_f1_iou(a, g);
    const auto k = mask_counts(a, g);
    const double prec = static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp);
    const double rec = static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    const bool exact = s.f1 == 2.0 * s.iou / (1.0 + s.iou);
    const bool pr = k.tp == 0 || std::abs(s.f1 - 2 * prec * rec / (prec + rec)) <= 1e-12;
    identity_ok += exact && pr;
  }
  c.expect(identity_ok == kInstances, "F1/IoU identity held on " + std::to_string(identity_ok) + " pairs");
  const auto half = mask_f1_iou({1, 0, 1, 0}, {1, 1, 1, 1});
  c.expect(half.iou == 0.5 && std::abs(half.f1 - 2.0 / 3.0) <= 1e-15, "left-half fixture");
  return c.outcome("BLEU-1 " + fmt(b1, 6) + ", ROUGE-L " + fmt(rouge, 6) + ", METEOR " + fmt(meteor, 6) + ", CIDEr-D " +
                   fmt(cider.corpus, 6) + ", F1 identity on " + std::to_string(identity_ok) + "/100");
}

// ---------------------------------------------------------------------------
// 9. End-to-end smoke

Outcome end_to_end(const fs::path& work) {
  Check c;
  const auto t0 = Clock::now();
  const auto dir = work / "smoke";
  fs::remove_all(dir);
  DatasetConfig dcfg;  // 512 pairs, default 74:26 mix
  dcfg.seed = 0;
  build_dataset(dir / "data", dcfg);
  const auto ds = load_dataset(dir / "data");
  const auto train = ds.split("train"), test = ds.split("test");
  std::size_t changed = 0;
  for (const auto& s : ds.samples) changed += s.change_type != ChangeType::none;

  ModelConfig mc;  // full configuration, K = 4
  BankConfig bc;
  bc.seed = mc.seed;
  auto bank = build_prototype_bank(train, mc.backbone, mc.seed, bc, ds.content_hash());
  auto model = PtNet::create(mc, default_vocabulary(), bank);
  TrainConfig tc;
  tc.epochs = kSmokeEpochs;
  TrainState state;
  std::ofstream log(dir / "log.jsonl");
  EpochReport last;
  while (state.epoch < tc.epochs) {
    last = train_epoch(model, train, tc, state);
    log << last.to_json().dump() << "\n" << std::flush;
  }
  const auto report = evaluate(model, test);
  std::ofstream(dir / "report.json") << report.to_json().dump(2) << "\n";
  const double secs = seconds_since(t0);

  c.expect(ds.samples.size() == 512, "dataset size " + std::to_string(ds.samples.size()));
  const auto counts = mix_counts(dcfg.n_pairs, dcfg.mix);
  const double ratio = static_cast<double>(changed) / static_cast<double>(ds.samples.size());
  c.expect(changed == dcfg.n_pairs - counts[0], "changed pairs " + std::to_string(changed));
  c.expect(std::abs(ratio - 0.74) < 0.01, "changed fraction " + fmt(ratio));
  c.expect(bank.k() == 4, "K = " + std::to_string(bank.k()));
  c.expect(*report.f1 >= kSmokeF1, "F1 " + fmt(*report.f1) + " < " + fmt(kSmokeF1));
  c.expect(*report.word_accuracy >= kSmokeWordAcc, "word accuracy " + fmt(*report.word_accuracy) + " < " + fmt(kSmokeWordAcc));
  c.expect(secs < kSmokeSeconds, "wall time " + fmt(secs) + " s");
  return c.outcome("512 pairs (" + std::to_string(changed) + " changed), " + std::to_string(kSmokeEpochs) +
                   " epochs, test F1 " + fmt(*report.f1) + " (>= " + fmt(kSmokeF1) + "), word accuracy " +
                   fmt(*report.word_accuracy) + " (>= " + fmt(kSmokeWordAcc) + "), IoU " + fmt(*report.iou) +
                   ", BLEU-4 " + fmt(*report.bleu4) + ", CIDEr-D " + fmt(*report.cider_d) + ", " + fmt(secs, 4) + " s");
}

// ---------------------------------------------------------------------------
// 10. Determinism

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  std::vector<std::string> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) ra.push_back(fs::relative(e.path(), a).generic_string());
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rb.push_back(fs::relative(e.path(), b).generic_string());
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  if (ra != rb) return false;
  files = ra.size();
  for (const auto& r : ra)
    if (read_file_bytes(a / r) != read_file_bytes(b / r)) return false;
  return true;
}

Outcome determinism(const fs::path& work) {
  Check c;
  const auto dir = work / "determinism";
  fs::remove_all(dir);
  DatasetConfig dcfg;
  dcfg.n_pairs = 40;
  dcfg.seed = 13;
  build_dataset(dir / "a", dcfg);
  build_dataset(dir / "b", dcfg);
  std::size_t files = 0;
  c.expect(same_tree(dir / "a", dir / "b", files), "dataset bytes differ");

  auto run = [&](const fs::path& root) {
    const auto ds = load_dataset(root);
    const auto train = ds.split("train");
    ModelConfig mc;
    mc.seed = 4;
    BankConfig bc;
    bc.seed = mc.seed;
    auto model = PtNet::create(mc, default_vocabulary(), build_prototype_bank(train, mc.backbone, mc.seed, bc, ds.content_hash()));
    TrainConfig tc;
    tc.seed = 4;
    TrainState state;
    std::vector<EpochReport> log;
    for (int e = 0; e < 3; ++e) log.push_back(train_epoch(model, train, tc, state));
    return std::make_pair(log, evaluate(model, ds.split("test")).to_json().dump());
  };
  const auto ra = run(dir / "a");
  const auto rb = run(dir / "b");
  c.expect(ra.first == rb.first, "epoch logs differ");
  c.expect(ra.second == rb.second, "final metrics differ");
  return c.outcome(std::to_string(files) + " dataset files byte-identical, 3-epoch logs and test metrics bit-identical");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir = "acceptance-work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory for generated data");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(workdir);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"normalization invariants", normalization_invariants},
      {"DWA", dwa_checks},
      {"InfoNCE degenerate case", infonce_degenerate},
      {"prototype pipeline oracle", prototype_oracle},
      {"residual identity", residual_identity},
      {"ablation switches", ablation_semantics},
      {"metric oracles", metric_oracles},
      {"end-to-end smoke", [&] { return end_to_end(work); }},
      {"determinism", [&] { return determinism(work); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    all = all && out.pass;
    std::cout << (out.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << ". " << criteria[i].first << ": "
              << out.detail << std::endl;
  }
  return all ? 0 : 1;
}
