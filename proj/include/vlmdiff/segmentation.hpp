// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vlmdiff/image.hpp"

namespace vlmdiff {

/// Grid of C-dim features, row-major [grid_h, grid_w, C].
struct FeatureStack {
  int grid_h = 0;
  int grid_w = 0;
  int channels = 0;
  int patch_size = 0;
  std::string extractor_id;
  std::vector<float> features;

  const float* at(int y, int x) const { return features.data() + (static_cast<std::size_t>(y) * grid_w + x) * channels; }
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual FeatureStack extract(const Image& image) const = 0;
  virtual std::string id() const = 0;
  virtual int patch_size() const = 0;
  /// Pixels outside a changed region whose features may still change.
  virtual int halo() const { return 0; }
};

struct ExtractorConfig {
  std::string backend = "conv_stub";  // conv_stub | dino | resnet | torchscript
  int patch = 8;
  int channels = 64;
  std::uint64_t seed = 7;
  std::string model_path;  // torchscript-backed extractors
  int input_size = 0;      // resize before a torchscript extractor (0: keep)
};

/// Random-initialised two-layer convolution (3x3, 3x3) followed by patch average pooling.
/// Deterministic for a given seed; features of a patch depend on pixels within
/// `halo()` = 2 px of it.
class ConvStubExtractor : public FeatureExtractor {
 public:
  explicit ConvStubExtractor(int patch = 8, int channels = 64, std::uint64_t seed = 7);
  ~ConvStubExtractor() override;
  FeatureStack extract(const Image& image) const override;
  std::string id() const override;
  int patch_size() const override { return patch_; }
  int halo() const override { return 2; }

 private:
  struct Weights;
  int patch_;
  int channels_;
  std::uint64_t seed_;
  std::unique_ptr<Weights> weights_;
};

/// Loads a serialized TorchScript feature network (for example a DINO ViT or a
/// ResNet-50 trunk). Input is [1,3,S,S] with ImageNet normalisation; the output
/// may be [1,C,h,w] or [1,N,C] patch tokens (a leading class token is dropped).
class TorchScriptExtractor : public FeatureExtractor {
 public:
  TorchScriptExtractor(const std::filesystem::path& model_path, std::string kind, int input_size);
  ~TorchScriptExtractor() override;
  FeatureStack extract(const Image& image) const override;
  std::string id() const override { return id_; }
  int patch_size() const override { return patch_; }

 private:
  struct Module;
  std::unique_ptr<Module> module_;
  std::string id_;
  int input_size_;
  mutable int patch_ = 0;
};

std::unique_ptr<FeatureExtractor> make_feature_extractor(const ExtractorConfig& config);

FeatureStack extract_features(const Image& image, const FeatureExtractor& extractor);

struct AnomalyMap {
  int height = 0;
  int width = 0;
  std::vector<float> scores;  // [H, W]
  float image_score = 0.0f;
  bool smoothed = false;
  std::string input_id;
  std::string reconstruction_id;

  float at(int y, int x) const { return scores[static_cast<std::size_t>(y) * width + x]; }
};

enum class UpsampleMode {
  features,  // interpolate both feature grids to pixel resolution, then compare per pixel
  scores,    // compare on the grid, then interpolate the score grid
};

struct SegmentationConfig {
  UpsampleMode upsample = UpsampleMode::features;
  double sigma = 4.0;              // Gaussian smoothing in pixels; 0 disables
  std::string image_score = "max"; // max | topk_mean
  int topk = 10;
};

/// 1 - cos(a, b) with the zero-vector convention: both below 1e-12 in norm -> 0,
/// exactly one -> 2. Always in [0, 2].
double cosine_dissimilarity(const float* a, const float* b, int n);

/// Per-cell 1 - cos on the feature grid, [grid_h, grid_w].
std::vector<float> grid_dissimilarity(const FeatureStack& f, const FeatureStack& f_rec);

/// Bilinear (half-pixel centres, edge clamped) resize of a single-channel grid.
std::vector<float> resize_bilinear(const std::vector<float>& src, int src_h, int src_w, int dst_h, int dst_w);

/// Separable Gaussian blur with reflected borders; kernel radius ceil(4 sigma).
std::vector<float> gaussian_smooth(const std::vector<float>& src, int h, int w, double sigma);

AnomalyMap anomaly_map(const FeatureStack& f, const FeatureStack& f_rec, Resolution target,
                       const SegmentationConfig& config = {});

/// Max (or top-k mean) of the Gaussian-smoothed map; maps already smoothed are used as is.
double image_score(const AnomalyMap& map, const SegmentationConfig& config = {});

/// Raw float map: "VAMP" magic, u32 version, u32 H, u32 W, f32 image_score, H*W f32 (little endian).
void write_anomaly_map(const std::filesystem::path& path, const AnomalyMap& map);
AnomalyMap read_anomaly_map(const std::filesystem::path& path);
/// Per-image min-max normalised 8-bit visualisation.
void write_anomaly_png(const std::filesystem::path& path, const AnomalyMap& map);

}  // namespace vlmdiff
