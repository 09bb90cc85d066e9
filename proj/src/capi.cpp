// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/vlmdiff.h"

#include <cstring>
#include <exception>
#include <memory>
#include <string>

#include <c10/util/Exception.h>

#include "vlmdiff/config.hpp"
#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"
#include "vlmdiff/metrics.hpp"
#include "vlmdiff/pipeline.hpp"
#include "vlmdiff/segmentation.hpp"

struct vlmdiff_run {
  std::unique_ptr<vlmdiff::Pipeline> pipeline;
};

namespace {

thread_local std::string g_last_error;

vlmdiff_status status_of(vlmdiff::ErrorKind kind) {
  using vlmdiff::ErrorKind;
  switch (kind) {
    case ErrorKind::user: return VLMDIFF_ERR_USER;
    case ErrorKind::io: return VLMDIFF_ERR_IO;
    case ErrorKind::missing_artifact: return VLMDIFF_ERR_MISSING_ARTIFACT;
    case ErrorKind::provider: return VLMDIFF_ERR_PROVIDER;
    case ErrorKind::numeric: return VLMDIFF_ERR_NUMERIC;
    case ErrorKind::internal: return VLMDIFF_ERR_INTERNAL;
  }
  return VLMDIFF_ERR_INTERNAL;
}

template <class F>
vlmdiff_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return VLMDIFF_OK;
  } catch (const vlmdiff::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return VLMDIFF_ERR_IO;
  } catch (const c10::Error& e) {
    g_last_error = e.what_without_backtrace();
    return VLMDIFF_ERR_INTERNAL;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return VLMDIFF_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return VLMDIFF_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return VLMDIFF_ERR_INTERNAL;
  }
}

void require_arg(bool ok, const char* what) {
  if (!ok) throw vlmdiff::user_error(std::string("invalid argument: ") + what);
}

vlmdiff_status copy_out(const std::string& s, char* buf, size_t cap, size_t* needed) {
  if (needed) *needed = s.size();
  if (buf && cap > 0) {
    const size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
  }
  return VLMDIFF_OK;
}

}  // namespace

extern "C" {

const char* vlmdiff_last_error(void) { return g_last_error.c_str(); }

const char* vlmdiff_version(void) { return "0.1.0"; }

const char* vlmdiff_status_name(vlmdiff_status status) {
  switch (status) {
    case VLMDIFF_OK: return "ok";
    case VLMDIFF_ERR_USER: return "user error";
    case VLMDIFF_ERR_IO: return "i/o error";
    case VLMDIFF_ERR_MISSING_ARTIFACT: return "missing artifact";
    case VLMDIFF_ERR_PROVIDER: return "caption provider error";
    case VLMDIFF_ERR_NUMERIC: return "numeric error";
    case VLMDIFF_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

vlmdiff_status vlmdiff_run_open(const char* config_path, const char* const* overrides, size_t n_overrides,
                                vlmdiff_run** out) {
  return guarded([&] {
    require_arg(out != nullptr, "out");
    require_arg(n_overrides == 0 || overrides != nullptr, "overrides");
    *out = nullptr;
    std::vector<std::string> ov;
    for (size_t i = 0; i < n_overrides; ++i) {
      require_arg(overrides[i] != nullptr, "override entry");
      ov.emplace_back(overrides[i]);
    }
    auto cfg = config_path ? vlmdiff::load_run_config(config_path, ov) : vlmdiff::parse_run_config("", ov);
    auto run = std::make_unique<vlmdiff_run>();
    run->pipeline = std::make_unique<vlmdiff::Pipeline>(std::move(cfg));
    *out = run.release();
  });
}

void vlmdiff_run_close(vlmdiff_run* run) { delete run; }

void vlmdiff_run_set_message_callback(vlmdiff_run* run, vlmdiff_message_fn fn, void* user) {
  if (!run) return;
  if (!fn) {
    run->pipeline->on_message = nullptr;
    return;
  }
  run->pipeline->on_message = [fn, user](const std::string& line) { fn(line.c_str(), user); };
}

vlmdiff_status vlmdiff_run_stage(vlmdiff_run* run, const char* stage) {
  return guarded([&] {
    require_arg(run != nullptr, "run");
    require_arg(stage != nullptr, "stage");
    if (std::strcmp(stage, "all") == 0) {
      run->pipeline->run_all();
    } else {
      run->pipeline->run(vlmdiff::parse_stage(stage));
    }
  });
}

vlmdiff_status vlmdiff_run_config_json(const vlmdiff_run* run, char* buf, size_t cap, size_t* needed) {
  vlmdiff_status st = VLMDIFF_OK;
  const auto g = guarded([&] {
    require_arg(run != nullptr, "run");
    st = copy_out(vlmdiff::config_json(run->pipeline->config()), buf, cap, needed);
  });
  return g == VLMDIFF_OK ? st : g;
}

vlmdiff_status vlmdiff_run_output_dir(const vlmdiff_run* run, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require_arg(run != nullptr, "run");
    copy_out(run->pipeline->paths().root.string(), buf, cap, needed);
  });
}

vlmdiff_status vlmdiff_run_report_text(const vlmdiff_run* run, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require_arg(run != nullptr, "run");
    const auto path = run->pipeline->paths().report_txt();
    if (!std::filesystem::exists(path)) {
      throw vlmdiff::Error(vlmdiff::ErrorKind::missing_artifact, "evaluation report not found; run eval");
    }
    copy_out(vlmdiff::read_file(path), buf, cap, needed);
  });
}

vlmdiff_status vlmdiff_auroc(const double* scores, const uint8_t* labels, size_t n, double* out) {
  return guarded([&] {
    require_arg(out != nullptr, "out");
    require_arg(n == 0 || (scores && labels), "scores/labels");
    *out = vlmdiff::auroc(std::vector<double>(scores, scores + n), std::vector<uint8_t>(labels, labels + n));
  });
}

vlmdiff_status vlmdiff_pro(const float* maps, const uint8_t* masks, size_t n_images, int height, int width,
                           double fpr_limit, int n_thresholds, double* out) {
  return guarded([&] {
    require_arg(out != nullptr, "out");
    require_arg(height > 0 && width > 0, "height/width");
    require_arg(n_images == 0 || (maps && masks), "maps/masks");
    const size_t px = static_cast<size_t>(height) * static_cast<size_t>(width);
    std::vector<std::vector<float>> m(n_images);
    std::vector<vlmdiff::Mask> k(n_images);
    std::vector<const std::vector<float>*> mp;
    std::vector<const vlmdiff::Mask*> kp;
    for (size_t i = 0; i < n_images; ++i) {
      m[i].assign(maps + i * px, maps + (i + 1) * px);
      k[i].height = height;
      k[i].width = width;
      k[i].data.assign(masks + i * px, masks + (i + 1) * px);
      mp.push_back(&m[i]);
      kp.push_back(&k[i]);
    }
    *out = vlmdiff::pro_curve(mp, kp, {fpr_limit, n_thresholds}).value;
  });
}

vlmdiff_status vlmdiff_anomaly_map(const float* features, const float* features_rec, int grid_h, int grid_w,
                                   int channels, int out_h, int out_w, double sigma, float* out_scores,
                                   float* out_image_score) {
  return guarded([&] {
    require_arg(features && features_rec && out_scores, "buffers");
    require_arg(grid_h > 0 && grid_w > 0 && channels > 0 && out_h > 0 && out_w > 0, "sizes");
    const size_t n = static_cast<size_t>(grid_h) * grid_w * channels;
    vlmdiff::FeatureStack a{grid_h, grid_w, channels, 0, "caller", std::vector<float>(features, features + n)};
    vlmdiff::FeatureStack b{grid_h, grid_w, channels, 0, "caller", std::vector<float>(features_rec, features_rec + n)};
    vlmdiff::SegmentationConfig cfg;
    cfg.sigma = sigma;
    const auto map = vlmdiff::anomaly_map(a, b, {out_h, out_w}, cfg);
    std::memcpy(out_scores, map.scores.data(), map.scores.size() * sizeof(float));
    if (out_image_score) *out_image_score = map.image_score;
  });
}

}  // extern "C"
