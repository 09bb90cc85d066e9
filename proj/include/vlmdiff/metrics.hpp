// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vlmdiff/dataset.hpp"
#include "vlmdiff/image.hpp"
#include "vlmdiff/segmentation.hpp"

namespace vlmdiff {

/// Mann-Whitney statistic P(s+ > s-) + 0.5 P(s+ = s-), O(n log n).
/// Throws when either class is absent.
double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

struct Curve {
  std::vector<double> x;  // false positive rate, non-decreasing
  std::vector<double> y;
};

/// ROC points, one per distinct score (descending thresholds), starting at (0,0).
Curve roc_curve(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

/// Connected components of a binary mask with 8-connectivity; 0 is background,
/// regions are numbered 1..count in raster order of their first pixel.
struct Regions {
  std::vector<int> labels;
  int count = 0;
};
Regions label_regions(const Mask& mask);

struct ProOptions {
  double fpr_limit = 0.3;
  int n_thresholds = 200;  // evenly spaced over [min, max] of the scores; 0 = every distinct score
};

struct ProResult {
  double value = 0;
  Curve curve;  // (fpr, mean region overlap) per threshold, anchored at (0,0)
};

/// Per-region overlap integrated over FPR in [0, fpr_limit] and divided by fpr_limit.
/// The curve is integrated as a step function: at each FPR the overlap of the lowest
/// threshold reaching no more than that FPR.
ProResult pro_curve(const std::vector<const std::vector<float>*>& maps, const std::vector<const Mask*>& masks,
                    const ProOptions& options = {});
double pro(const std::vector<AnomalyMap>& maps, const std::vector<Mask>& masks, const ProOptions& options = {});

struct CategoryMetrics {
  double roc_i = 0;
  double roc_p = 0;
  double pro = 0;
  int n_images = 0;
  int n_anomalous = 0;
  Curve roc_i_curve, roc_p_curve, pro_curve;
};

struct EvalReport {
  double roc_i = 0;
  double roc_p = 0;
  double pro = 0;
  std::map<std::string, CategoryMetrics> per_category;
  ProOptions options;
};

using MapLoader = std::function<AnomalyMap(const ImageRecord&)>;

/// Evaluates every test record of `index`; overall values are the unweighted means over categories.
EvalReport evaluate(const DatasetIndex& index, const MapLoader& load_map, const ProOptions& options = {});

/// Maps stored as `<dir>/<category>/<defect>/<stem>_amap.bin`.
std::filesystem::path anomaly_map_path(const std::filesystem::path& dir, const ImageRecord& record);
EvalReport evaluate(const DatasetIndex& index, const std::filesystem::path& map_dir, const ProOptions& options = {});

/// key = value lines with %.17g numbers.
std::string format_report(const EvalReport& report);
/// category,curve,fpr,value rows; long curves are subsampled to at most `max_points`.
std::string format_curves_csv(const EvalReport& report, std::size_t max_points = 512);

}  // namespace vlmdiff
