#include "ptnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ptnet/errors.hpp"

namespace ptnet {

using nlohmann::json;

namespace {

using NgramCounts = std::map<Tokens, double>;

NgramCounts ngrams(const Tokens& words, std::size_t n) {
  NgramCounts out;
  if (words.size() < n) return out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) out[Tokens(words.begin() + static_cast<std::ptrdiff_t>(i),
                                                                 words.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1;
  return out;
}

void check_corpus(const std::vector<Tokens>& candidates, const std::vector<References>& references) {
  if (candidates.empty()) throw ConfigError("caption metrics: empty corpus");
  if (candidates.size() != references.size()) throw ConfigError("caption metrics: candidate/reference count mismatch");
  for (const auto& r : references) {
    if (r.empty()) throw ConfigError("caption metrics: every candidate needs at least one reference");
  }
}

void check_refs(const References& references) {
  if (references.empty()) throw ConfigError("caption metrics: no references");
}

}  // namespace

double bleu(const std::vector<Tokens>& candidates, const std::vector<References>& references, std::size_t n) {
  if (n == 0) throw ConfigError("bleu: order must be positive");
  check_corpus(candidates, references);
  std::vector<double> matched(n, 0.0), total(n, 0.0);
  double cand_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    cand_len += static_cast<double>(cand.size());
    // Closest reference length; ties prefer the shorter one.
    std::size_t best = references[s][0].size();
    for (const auto& r : references[s]) {
      const auto d = std::abs(static_cast<long>(r.size()) - static_cast<long>(cand.size()));
      const auto bd = std::abs(static_cast<long>(best) - static_cast<long>(cand.size()));
      if (d < bd || (d == bd && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t k = 1; k <= n; ++k) {
      NgramCounts max_ref;
      for (const auto& r : references[s]) {
        for (const auto& [g, c] : ngrams(r, k)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : ngrams(cand, k)) {
        total[k - 1] += c;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[k - 1] += std::min(c, it->second);
      }
    }
  }
  if (cand_len == 0) return 0.0;
  double log_sum = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (matched[k] == 0 || total[k] == 0) return 0.0;
    log_sum += std::log(matched[k] / total[k]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / static_cast<double>(n));
}

std::array<double, 4> bleu_1_to_4(const std::vector<Tokens>& candidates, const std::vector<References>& references) {
  return {bleu(candidates, references, 1), bleu(candidates, references, 2), bleu(candidates, references, 3),
          bleu(candidates, references, 4)};
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const References& references, double beta) {
  check_refs(references);
  double best = 0.0;
  for (const auto& r : references) {
    const auto l = static_cast<double>(lcs_length(candidate, r));
    if (l == 0) continue;
    const double p = l / static_cast<double>(candidate.size());
    const double rec = l / static_cast<double>(r.size());
    const double f = (1 + beta * beta) * p * rec / (rec + beta * beta * p);
    best = std::max(best, f);
  }
  return best;
}

MeteorParts meteor_align(const Tokens& candidate, const Tokens& reference, double alpha, double gamma, double beta) {
  MeteorParts out;
  std::vector<bool> used(reference.size(), false);
  // (candidate index, reference index) in candidate order
  std::vector<std::pair<std::size_t, std::size_t>> align;
  std::optional<std::size_t> last_ref;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    std::optional<std::size_t> pick;
    if (last_ref && *last_ref + 1 < reference.size() && !used[*last_ref + 1] && reference[*last_ref + 1] == candidate[i]) {
      pick = *last_ref + 1;
    } else {
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (!used[j] && reference[j] == candidate[i]) {
          pick = j;
          break;
        }
      }
    }
    if (!pick) {
      last_ref.reset();
      continue;
    }
    used[*pick] = true;
    align.emplace_back(i, *pick);
    last_ref = pick;
  }
  out.matches = align.size();
  if (out.matches == 0) return out;
  out.chunks = 1;
  for (std::size_t k = 1; k < align.size(); ++k) {
    if (align[k].first != align[k - 1].first + 1 || align[k].second != align[k - 1].second + 1) ++out.chunks;
  }
  const auto m = static_cast<double>(out.matches);
  out.precision = m / static_cast<double>(candidate.size());
  out.recall = m / static_cast<double>(reference.size());
  out.fmean = out.precision * out.recall / (alpha * out.precision + (1 - alpha) * out.recall);
  out.penalty = gamma * std::pow(static_cast<double>(out.chunks) / m, beta);
  out.score = out.fmean * (1 - out.penalty);
  return out;
}

double meteor_lite(const Tokens& candidate, const References& references) {
  check_refs(references);
  double best = 0.0;
  for (const auto& r : references) best = std::max(best, meteor_align(candidate, r).score);
  return best;
}

CiderResult cider_d(const std::vector<Tokens>& candidates, const std::vector<References>& references, double sigma) {
  check_corpus(candidates, references);
  constexpr std::size_t kN = 4;
  struct Vec {
    std::array<NgramCounts, kN> counts;
    std::array<double, kN> norm{};
    double length = 0;
  };
  std::map<Tokens, double> df;
  for (const auto& refs : references) {
    std::map<Tokens, bool> seen;
    for (const auto& r : refs) {
      for (std::size_t n = 1; n <= kN; ++n) {
        for (const auto& [g, c] : ngrams(r, n)) seen[g] = true;
      }
    }
    for (const auto& [g, b] : seen) df[g] += 1;
  }
  const auto images = static_cast<double>(candidates.size());
  const double log_images = std::log(images);
  auto to_vec = [&](const Tokens& words) {
    Vec v;
    for (std::size_t n = 1; n <= kN; ++n) {
      for (const auto& [g, tf] : ngrams(words, n)) {
        double idf = 1.0;
        if (images > 1) {
          auto it = df.find(g);
          idf = log_images - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        }
        const double w = tf * idf;
        v.counts[n - 1][g] = w;
        v.norm[n - 1] += w * w;
        if (n == 2) v.length += tf;
      }
    }
    for (auto& x : v.norm) x = std::sqrt(x);
    return v;
  };
  CiderResult out;
  out.per_sample.reserve(candidates.size());
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const Vec hyp = to_vec(candidates[s]);
    std::array<double, kN> score{};
    for (const auto& r : references[s]) {
      const Vec ref = to_vec(r);
      const double delta = hyp.length - ref.length;
      for (std::size_t n = 0; n < kN; ++n) {
        double val = 0;
        for (const auto& [g, w] : hyp.counts[n]) {
          auto it = ref.counts[n].find(g);
          if (it != ref.counts[n].end()) val += std::min(w, it->second) * it->second;
        }
        if (hyp.norm[n] != 0 && ref.norm[n] != 0) val /= hyp.norm[n] * ref.norm[n];
        val *= std::exp(-(delta * delta) / (2 * sigma * sigma));
        score[n] += val;
      }
    }
    double mean = 0;
    for (double x : score) mean += x;
    mean /= static_cast<double>(kN);
    mean /= static_cast<double>(references[s].size());
    out.per_sample.push_back(mean * 10.0);
  }
  for (double x : out.per_sample) out.corpus += x;
  out.corpus /= images;
  return out;
}

MaskCounts& MaskCounts::operator+=(const MaskCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

MaskCounts mask_counts(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("mask_f1_iou: mask sizes differ");
  MaskCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) throw ConfigError("mask_f1_iou: masks must be binary");
    if (pred[i] && gt[i]) ++c.tp;
    else if (pred[i]) ++c.fp;
    else if (gt[i]) ++c.fn;
  }
  return c;
}

MaskScore mask_score(const MaskCounts& c) {
  const auto denom = c.tp + c.fp + c.fn;
  if (denom == 0) return {1.0, 1.0};
  const double iou = static_cast<double>(c.tp) / static_cast<double>(denom);
  // equals 2PR / (P + R)
  return {2.0 * iou / (1.0 + iou), iou};
}

MaskScore mask_f1_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  return mask_score(mask_counts(pred, gt));
}

namespace {

void put(json& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = *v;
}

std::optional<double> get(const json& j, const char* key) {
  if (j.contains(key) && !j.at(key).is_null()) return j.at(key).get<double>();
  return std::nullopt;
}

void ensure_rows(MetricReport& report, const std::vector<std::string>& ids) {
  if (report.per_sample.empty()) {
    for (const auto& id : ids) report.per_sample.push_back({id, {}, {}, {}, {}, {}, {}, {}});
    report.samples = ids.size();
    return;
  }
  if (report.per_sample.size() != ids.size()) throw ConfigError("metric report: sample count mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (report.per_sample[i].id != ids[i]) throw ConfigError("metric report: sample order mismatch");
  }
}

}  // namespace

void score_captions(MetricReport& report, const std::vector<std::string>& ids, const std::vector<Tokens>& candidates,
                    const std::vector<References>& references) {
  check_corpus(candidates, references);
  if (ids.size() != candidates.size()) throw ConfigError("score_captions: id count mismatch");
  ensure_rows(report, ids);
  const auto b = bleu_1_to_4(candidates, references);
  report.bleu1 = b[0];
  report.bleu2 = b[1];
  report.bleu3 = b[2];
  report.bleu4 = b[3];
  const auto cider = cider_d(candidates, references);
  report.cider_d = cider.corpus;
  double rouge = 0, meteor = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto& row = report.per_sample[i];
    row.rouge_l = rouge_l(candidates[i], references[i]);
    row.meteor = meteor_lite(candidates[i], references[i]);
    row.cider_d = cider.per_sample[i];
    rouge += *row.rouge_l;
    meteor += *row.meteor;
  }
  report.rouge_l = rouge / static_cast<double>(candidates.size());
  report.meteor = meteor / static_cast<double>(candidates.size());
}

void score_masks(MetricReport& report, const std::vector<std::string>& ids,
                 const std::vector<std::vector<std::uint8_t>>& preds,
                 const std::vector<std::vector<std::uint8_t>>& gts) {
  if (preds.empty()) throw ConfigError("score_masks: empty split");
  if (preds.size() != gts.size() || ids.size() != preds.size()) throw ConfigError("score_masks: count mismatch");
  ensure_rows(report, ids);
  MaskCounts total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto c = mask_counts(preds[i], gts[i]);
    total += c;
    const auto s = mask_score(c);
    report.per_sample[i].f1 = s.f1;
    report.per_sample[i].iou = s.iou;
  }
  const auto s = mask_score(total);
  report.f1 = s.f1;
  report.iou = s.iou;
}

json metric_parameters() {
  return {{"bleu", {{"max_order", 4}, {"smoothing", "none"}, {"brevity_penalty", "closest reference"}}},
          {"rouge_l", {{"beta", 1.2}, {"references", "max F over references"}}},
          {"meteor", {{"variant", "exact-match"}, {"alpha", 0.9}, {"gamma", 0.5}, {"beta", 3.0}}},
          {"cider_d", {{"n", 4}, {"sigma", 6.0}, {"scale", 10.0}, {"clipping", true}}},
          {"masks", {{"threshold", 0.5}, {"pooling", "pixels pooled over the split"}, {"empty_convention", 1.0}}}};
}

json MetricReport::to_json() const {
  json j;
  put(j, "BLEU-1", bleu1);
  put(j, "BLEU-2", bleu2);
  put(j, "BLEU-3", bleu3);
  put(j, "BLEU-4", bleu4);
  put(j, "METEOR", meteor);
  put(j, "ROUGE_L", rouge_l);
  put(j, "CIDEr-D", cider_d);
  put(j, "F1", f1);
  put(j, "IoU", iou);
  put(j, "word_accuracy", word_accuracy);
  j["samples"] = samples;
  j["metadata"] = metadata;
  json rows = json::array();
  for (const auto& r : per_sample) {
    json row{{"id", r.id}};
    if (r.caption) row["caption"] = *r.caption;
    put(row, "ROUGE_L", r.rouge_l);
    put(row, "METEOR", r.meteor);
    put(row, "CIDEr-D", r.cider_d);
    put(row, "F1", r.f1);
    put(row, "IoU", r.iou);
    if (r.type_correct) row["type_correct"] = *r.type_correct;
    rows.push_back(std::move(row));
  }
  j["per_sample"] = std::move(rows);
  return j;
}

MetricReport MetricReport::from_json(const json& j) {
  MetricReport r;
  r.bleu1 = get(j, "BLEU-1");
  r.bleu2 = get(j, "BLEU-2");
  r.bleu3 = get(j, "BLEU-3");
  r.bleu4 = get(j, "BLEU-4");
  r.meteor = get(j, "METEOR");
  r.rouge_l = get(j, "ROUGE_L");
  r.cider_d = get(j, "CIDEr-D");
  r.f1 = get(j, "F1");
  r.iou = get(j, "IoU");
  r.word_accuracy = get(j, "word_accuracy");
  r.samples = j.value("samples", std::size_t{0});
  r.metadata = j.value("metadata", json::object());
  for (const auto& row : j.value("per_sample", json::array())) {
    SampleMetrics s;
    s.id = row.at("id").get<std::string>();
    if (row.contains("caption")) s.caption = row.at("caption").get<std::string>();
    s.rouge_l = get(row, "ROUGE_L");
    s.meteor = get(row, "METEOR");
    s.cider_d = get(row, "CIDEr-D");
    s.f1 = get(row, "F1");
    s.iou = get(row, "IoU");
    if (row.contains("type_correct")) s.type_correct = row.at("type_correct").get<bool>();
    r.per_sample.push_back(std::move(s));
  }
  return r;
}

}  // namespace ptnet
