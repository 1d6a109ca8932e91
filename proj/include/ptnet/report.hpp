#pragma once

#include <filesystem>
#include <vector>

#include "ptnet/metrics.hpp"
#include "ptnet/trainer.hpp"

namespace ptnet {

void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochReport>& log);
/// Two stacked line charts: losses per epoch and the DWA weights.
void write_curves_svg(const std::filesystem::path& path, const std::vector<EpochReport>& log);
/// One row per sample with the per-sample metrics.
void write_metrics_csv(const std::filesystem::path& path, const MetricReport& report);

}  // namespace ptnet
