#include "ptnet/report.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ptnet {

namespace {

std::ofstream open(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10);
  return out;
}

struct Series {
  const char* name;
  const char* color;
  std::vector<double> values;
};

void panel(std::ostream& svg, double top, const char* title, const std::vector<Series>& series, std::size_t epochs) {
  constexpr double left = 60, width = 520, height = 180;
  double lo = 0, hi = 0;
  bool first = true;
  for (const auto& s : series) {
    for (double v : s.values) {
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  if (hi - lo < 1e-12) {
    hi += 0.5;
    lo -= 0.5;
  }
  svg << "<text x=\"" << left << "\" y=\"" << top - 8 << "\" font-size=\"13\">" << title << "</text>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
  svg << "<text x=\"" << left - 6 << "\" y=\"" << top + 10 << "\" font-size=\"10\" text-anchor=\"end\">" << hi
      << "</text>\n";
  svg << "<text x=\"" << left - 6 << "\" y=\"" << top + height << "\" font-size=\"10\" text-anchor=\"end\">" << lo
      << "</text>\n";
  const double xs = epochs > 1 ? width / static_cast<double>(epochs - 1) : 0.0;
  double legend_x = left + 8;
  for (const auto& s : series) {
    svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double x = left + xs * static_cast<double>(i);
      const double y = top + height - (s.values[i] - lo) / (hi - lo) * height;
      svg << x << "," << y << " ";
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << legend_x << "\" y=\"" << top + height + 16 << "\" font-size=\"11\" fill=\"" << s.color
        << "\">" << s.name << "</text>\n";
    legend_x += 80;
  }
}

}  // namespace

void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochReport>& log) {
  auto out = open(path);
  out << "epoch,L_c,L_d,L_a,total,lambda1,lambda2,lr,lr_encoder,grad_norm\n";
  for (const auto& r : log) {
    out << r.epoch << "," << r.lc << "," << r.ld << "," << r.la << "," << r.total << "," << r.lambda1 << ","
        << r.lambda2 << "," << r.lr << "," << r.lr_encoder << "," << r.grad_norm << "\n";
  }
}

void write_curves_svg(const std::filesystem::path& path, const std::vector<EpochReport>& log) {
  std::vector<Series> losses{{"L_c", "#1f77b4", {}}, {"L_d", "#d62728", {}}, {"L_a", "#2ca02c", {}}, {"total", "#555", {}}};
  std::vector<Series> weights{{"lambda1", "#1f77b4", {}}, {"lambda2", "#d62728", {}}};
  for (const auto& r : log) {
    losses[0].values.push_back(r.lc);
    losses[1].values.push_back(r.ld);
    losses[2].values.push_back(r.la);
    losses[3].values.push_back(r.total);
    weights[0].values.push_back(r.lambda1);
    weights[1].values.push_back(r.lambda2);
  }
  auto out = open(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"620\" height=\"500\" font-family=\"sans-serif\">\n";
  panel(out, 30, "training losses per epoch", losses, log.size());
  panel(out, 280, "DWA task weights", weights, log.size());
  out << "</svg>\n";
}

void write_metrics_csv(const std::filesystem::path& path, const MetricReport& report) {
  auto out = open(path);
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  out << "id,ROUGE_L,METEOR,CIDEr-D,F1,IoU,type_correct\n";
  for (const auto& r : report.per_sample) {
    out << r.id << ",";
    opt(r.rouge_l);
    out << ",";
    opt(r.meteor);
    out << ",";
    opt(r.cider_d);
    out << ",";
    opt(r.f1);
    out << ",";
    opt(r.iou);
    out << ",";
    if (r.type_correct) out << (*r.type_correct ? 1 : 0);
    out << "\n";
  }
}

}  // namespace ptnet
