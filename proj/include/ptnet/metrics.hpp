#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace ptnet {

using Tokens = std::vector<std::string>;
using References = std::vector<Tokens>;

/// Corpus BLEU-n: clipped n-gram precisions pooled over the corpus, geometric
/// mean of orders 1..n, brevity penalty against the closest reference length.
double bleu(const std::vector<Tokens>& candidates, const std::vector<References>& references, std::size_t n);
std::array<double, 4> bleu_1_to_4(const std::vector<Tokens>& candidates, const std::vector<References>& references);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// LCS F-measure (beta = 1.2), best reference.
double rouge_l(const Tokens& candidate, const References& references, double beta = 1.2);

struct MeteorParts {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0, recall = 0, fmean = 0, penalty = 0, score = 0;
};
/// Exact-match unigram alignment against one reference.
MeteorParts meteor_align(const Tokens& candidate, const Tokens& reference, double alpha = 0.9, double gamma = 0.5,
                         double beta = 3.0);
double meteor_lite(const Tokens& candidate, const References& references);

struct CiderResult {
  double corpus = 0;
  std::vector<double> per_sample;
};
/// CIDEr-D with n = 1..4, sigma = 6, clipped counts and x10 scaling. A
/// single-image corpus uses unit IDF weights.
CiderResult cider_d(const std::vector<Tokens>& candidates, const std::vector<References>& references,
                    double sigma = 6.0);

struct MaskCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  MaskCounts& operator+=(const MaskCounts& o);
};
MaskCounts mask_counts(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct MaskScore {
  double f1 = 1.0;
  double iou = 1.0;
};
/// Both masks empty gives (1, 1).
MaskScore mask_score(const MaskCounts& c);
MaskScore mask_f1_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct SampleMetrics {
  std::string id;
  std::optional<std::string> caption;
  std::optional<double> rouge_l, meteor, cider_d;
  std::optional<double> f1, iou;
  std::optional<bool> type_correct;
};

struct MetricReport {
  std::optional<double> bleu1, bleu2, bleu3, bleu4, meteor, rouge_l, cider_d;
  std::optional<double> f1, iou;
  std::optional<double> word_accuracy;  // change-type word accuracy of decoded captions
  std::size_t samples = 0;
  std::vector<SampleMetrics> per_sample;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

/// Fills the caption metrics of `report` (and per-sample rows, created when absent).
void score_captions(MetricReport& report, const std::vector<std::string>& ids, const std::vector<Tokens>& candidates,
                    const std::vector<References>& references);
/// Pooled F1/IoU over all pixels of the split plus per-sample scores.
void score_masks(MetricReport& report, const std::vector<std::string>& ids,
                 const std::vector<std::vector<std::uint8_t>>& preds,
                 const std::vector<std::vector<std::uint8_t>>& gts);

/// Parameters echoed into every report.
nlohmann::json metric_parameters();

}  // namespace ptnet
