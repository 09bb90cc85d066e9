// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "vlmdiff/error.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;

double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw user_error("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of positive ranks with ties given their average rank.
  double rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] > 1) throw user_error("auroc: labels must be 0 or 1");
      pos_in_group += labels[order[j]];
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    rank_sum += avg_rank * static_cast<double>(pos_in_group);
    n_pos += pos_in_group;
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw user_error("auroc: both classes must be present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

Curve roc_curve(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw user_error("roc curve: both classes must be present");
  Curve c;
  c.x.push_back(0);
  c.y.push_back(0);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double v = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == v; ++i) (labels[order[i]] ? tp : fp) += 1;
    c.x.push_back(fp / n_neg);
    c.y.push_back(tp / n_pos);
  }
  return c;
}

Regions label_regions(const Mask& mask) {
  Regions r;
  const int H = mask.height, W = mask.width;
  r.labels.assign(static_cast<std::size_t>(H) * W, 0);
  std::vector<int> stack;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const auto idx = static_cast<std::size_t>(y) * W + x;
      if (!mask.data[idx] || r.labels[idx]) continue;
      const int id = ++r.count;
      r.labels[idx] = id;
      stack.push_back(static_cast<int>(idx));
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int py = p / W, px = p % W;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = py + dy, nx = px + dx;
            if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            const auto n = static_cast<std::size_t>(ny) * W + nx;
            if (mask.data[n] && !r.labels[n]) {
              r.labels[n] = id;
              stack.push_back(static_cast<int>(n));
            }
          }
      }
    }
  }
  return r;
}

namespace {

double step_area(const Curve& c, double limit) {
  // c.x non-decreasing; the value on [x_k, x_{k+1}) is y_k.
  double area = 0;
  for (std::size_t k = 0; k < c.x.size(); ++k) {
    if (c.x[k] >= limit) break;
    const double next = k + 1 < c.x.size() ? std::min(c.x[k + 1], limit) : limit;
    area += c.y[k] * (next - c.x[k]);
  }
  return area / limit;
}

}  // namespace

ProResult pro_curve(const std::vector<const std::vector<float>*>& maps, const std::vector<const Mask*>& masks,
                    const ProOptions& options) {
  if (maps.size() != masks.size()) throw user_error("pro: maps and masks differ in count");
  if (!(options.fpr_limit > 0 && options.fpr_limit <= 1)) throw user_error("pro: fpr_limit must be in (0, 1]");
  if (options.n_thresholds < 0) throw user_error("pro: n_thresholds must be >= 0");

  struct Pixel {
    float score;
    int region;  // global region id, or -1 for a normal pixel
  };
  std::vector<Pixel> pixels;
  std::vector<double> region_size;
  std::size_t n_normal = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Mask& m = *masks[i];
    if (maps[i]->size() != m.data.size()) throw user_error("pro: map and mask sizes differ");
    for (auto v : m.data)
      if (v > 1) throw user_error("pro: mask is not binary");
    const Regions reg = label_regions(m);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(region_size.size() + static_cast<std::size_t>(reg.count), 0);
    for (std::size_t p = 0; p < m.data.size(); ++p) {
      const int r = reg.labels[p] ? base + reg.labels[p] - 1 : -1;
      if (r >= 0) region_size[static_cast<std::size_t>(r)] += 1;
      else ++n_normal;
      pixels.push_back({(*maps[i])[p], r});
    }
  }
  if (region_size.empty()) throw user_error("pro: no anomalous pixels in any mask");
  if (n_normal == 0) throw user_error("pro: no normal pixels in any mask");

  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

  std::vector<double> thresholds;  // descending
  if (options.n_thresholds == 0) {
    for (std::size_t i = 0; i < pixels.size(); ++i)
      if (i == 0 || pixels[i].score != pixels[i - 1].score) thresholds.push_back(pixels[i].score);
  } else {
    const double lo = pixels.back().score, hi = pixels.front().score;
    const int n = options.n_thresholds;
    if (n == 1 || lo == hi) {
      thresholds.push_back(lo);
    } else {
      for (int k = n - 1; k >= 0; --k) thresholds.push_back(lo + (hi - lo) * k / (n - 1));
      thresholds.back() = lo;
      thresholds.front() = hi;
    }
  }

  const double n_regions = static_cast<double>(region_size.size());
  std::vector<double> hit(region_size.size(), 0);
  double fp = 0;
  ProResult res;
  res.curve.x.push_back(0);
  res.curve.y.push_back(0);
  std::size_t p = 0;
  for (double th : thresholds) {
    for (; p < pixels.size() && static_cast<double>(pixels[p].score) >= th; ++p) {
      const int r = pixels[p].region;
      if (r < 0) {
        fp += 1;
      } else {
        hit[static_cast<std::size_t>(r)] += 1;
      }
    }
    double mean = 0;
    for (std::size_t r = 0; r < hit.size(); ++r) mean += hit[r] / region_size[r];
    res.curve.x.push_back(fp / static_cast<double>(n_normal));
    res.curve.y.push_back(mean / n_regions);
  }
  res.value = step_area(res.curve, options.fpr_limit);
  return res;
}

double pro(const std::vector<AnomalyMap>& maps, const std::vector<Mask>& masks, const ProOptions& options) {
  std::vector<const std::vector<float>*> m;
  std::vector<const Mask*> k;
  for (const auto& a : maps) m.push_back(&a.scores);
  for (const auto& a : masks) k.push_back(&a);
  return pro_curve(m, k, options).value;
}

EvalReport evaluate(const DatasetIndex& index, const MapLoader& load_map, const ProOptions& options) {
  EvalReport report;
  report.options = options;
  for (const auto& category : index.categories) {
    const auto ids = index.ids(Split::test, category);
    if (ids.empty()) continue;
    std::vector<AnomalyMap> maps;
    std::vector<Mask> masks;
    std::vector<double> img_scores, px_scores;
    std::vector<std::uint8_t> img_labels, px_labels;
    for (auto id : ids) {
      const ImageRecord& rec = index.records[id];
      AnomalyMap map = load_map(rec);
      Mask mask = load_record_mask(index, id);
      if (map.height != mask.height || map.width != mask.width) {
        throw user_error("anomaly map for " + rec.key + " is " + std::to_string(map.height) + "x" +
                         std::to_string(map.width) + ", mask is " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width));
      }
      img_scores.push_back(map.image_score);
      img_labels.push_back(rec.anomalous() ? 1 : 0);
      for (std::size_t p = 0; p < map.scores.size(); ++p) {
        px_scores.push_back(map.scores[p]);
        px_labels.push_back(mask.data[p] ? 1 : 0);
      }
      maps.push_back(std::move(map));
      masks.push_back(std::move(mask));
    }
    CategoryMetrics cm;
    cm.n_images = static_cast<int>(ids.size());
    cm.n_anomalous = static_cast<int>(std::count(img_labels.begin(), img_labels.end(), 1));
    try {
      cm.roc_i = auroc(img_scores, img_labels);
      cm.roc_i_curve = roc_curve(img_scores, img_labels);
      cm.roc_p = auroc(px_scores, px_labels);
      cm.roc_p_curve = roc_curve(px_scores, px_labels);
      std::vector<const std::vector<float>*> mp;
      std::vector<const Mask*> mk;
      for (std::size_t i = 0; i < maps.size(); ++i) {
        mp.push_back(&maps[i].scores);
        mk.push_back(&masks[i]);
      }
      auto pr = pro_curve(mp, mk, options);
      cm.pro = pr.value;
      cm.pro_curve = std::move(pr.curve);
    } catch (const Error& e) {
      throw user_error("category '" + category + "': " + e.what());
    }
    report.per_category.emplace(category, std::move(cm));
  }
  if (report.per_category.empty()) throw user_error("no test images to evaluate");
  const double n = static_cast<double>(report.per_category.size());
  for (const auto& [_, cm] : report.per_category) {
    report.roc_i += cm.roc_i / n;
    report.roc_p += cm.roc_p / n;
    report.pro += cm.pro / n;
  }
  return report;
}

fs::path anomaly_map_path(const fs::path& dir, const ImageRecord& record) {
  return dir / record.category / record.defect / (record.stem() + "_amap.bin");
}

EvalReport evaluate(const DatasetIndex& index, const fs::path& map_dir, const ProOptions& options) {
  return evaluate(
      index,
      [&](const ImageRecord& rec) {
        const auto path = anomaly_map_path(map_dir, rec);
        if (!fs::exists(path)) {
          throw Error(ErrorKind::missing_artifact, "anomaly map not found for " + rec.key + ": " + path.string());
        }
        return read_anomaly_map(path);
      },
      options);
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  out << "roc_i = " << num(r.roc_i) << "\n";
  out << "roc_p = " << num(r.roc_p) << "\n";
  out << "pro = " << num(r.pro) << "\n";
  out << "fpr_limit = " << num(r.options.fpr_limit) << "\n";
  out << "n_thresholds = " << r.options.n_thresholds << "\n";
  out << "categories = " << r.per_category.size() << "\n";
  for (const auto& [cat, cm] : r.per_category) {
    out << cat << ".roc_i = " << num(cm.roc_i) << "\n";
    out << cat << ".roc_p = " << num(cm.roc_p) << "\n";
    out << cat << ".pro = " << num(cm.pro) << "\n";
    out << cat << ".n_images = " << cm.n_images << "\n";
    out << cat << ".n_anomalous = " << cm.n_anomalous << "\n";
  }
  return out.str();
}

std::string format_curves_csv(const EvalReport& r, std::size_t max_points) {
  std::ostringstream out;
  out << "category,curve,fpr,value\n";
  auto emit = [&](const std::string& cat, const char* name, const Curve& c) {
    const std::size_t n = c.x.size();
    if (n == 0) return;
    const std::size_t keep = std::max<std::size_t>(2, std::min(n, max_points));
    std::size_t last = n;
    for (std::size_t k = 0; k < keep; ++k) {
      const std::size_t i = keep == 1 ? 0 : k * (n - 1) / (keep - 1);
      if (i == last) continue;
      last = i;
      out << cat << "," << name << "," << num(c.x[i]) << "," << num(c.y[i]) << "\n";
    }
  };
  for (const auto& [cat, cm] : r.per_category) {
    emit(cat, "roc_i", cm.roc_i_curve);
    emit(cat, "roc_p", cm.roc_p_curve);
    emit(cat, "pro", cm.pro_curve);
  }
  return out.str();
}

}  // namespace vlmdiff
