// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/segmentation.hpp"

#include <torch/script.h>
#include <torch/torch.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>

#include "vlmdiff/error.hpp"
#include "vlmdiff/tensor_convert.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

FeatureStack stack_from_grid(const torch::Tensor& chw, int patch, std::string id) {
  auto hwc = chw.detach().to(torch::kFloat32).permute({1, 2, 0}).contiguous();
  FeatureStack s;
  s.grid_h = static_cast<int>(hwc.size(0));
  s.grid_w = static_cast<int>(hwc.size(1));
  s.channels = static_cast<int>(hwc.size(2));
  s.patch_size = patch;
  s.extractor_id = std::move(id);
  s.features.resize(static_cast<std::size_t>(hwc.numel()));
  std::memcpy(s.features.data(), hwc.data_ptr<float>(), s.features.size() * sizeof(float));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv stub
// ---------------------------------------------------------------------------

struct ConvStubExtractor::Weights {
  torch::Tensor w1, b1, w2, b2;
};

ConvStubExtractor::ConvStubExtractor(int patch, int channels, std::uint64_t seed)
    : patch_(patch), channels_(channels), seed_(seed), weights_(std::make_unique<Weights>()) {
  if (patch < 1 || channels < 1) throw user_error("conv stub extractor needs patch >= 1 and channels >= 1");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const int hidden = 32;
  auto opts = torch::TensorOptions().dtype(torch::kFloat32);
  weights_->w1 = torch::randn({hidden, 3, 3, 3}, gen, opts) * std::sqrt(2.0 / 27.0);
  weights_->b1 = torch::randn({hidden}, gen, opts) * 0.5;
  weights_->w2 = torch::randn({channels, hidden, 3, 3}, gen, opts) * std::sqrt(2.0 / (9.0 * hidden));
  weights_->b2 = torch::randn({channels}, gen, opts) * 0.5;
}

ConvStubExtractor::~ConvStubExtractor() = default;

std::string ConvStubExtractor::id() const {
  return "conv_stub-p" + std::to_string(patch_) + "-c" + std::to_string(channels_) + "-s" + std::to_string(seed_);
}

FeatureStack ConvStubExtractor::extract(const Image& image) const {
  if (image.height % patch_ != 0 || image.width % patch_ != 0) {
    throw user_error("image size must be divisible by the extractor patch size " + std::to_string(patch_));
  }
  torch::NoGradGuard no_grad;
  auto x = (image_to_tensor(image) - 0.5) / 0.25;
  auto h = torch::relu(F::conv2d(x, weights_->w1, F::Conv2dFuncOptions().bias(weights_->b1).padding(1)));
  h = F::conv2d(h, weights_->w2, F::Conv2dFuncOptions().bias(weights_->b2).padding(1));
  h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(patch_).stride(patch_));
  return stack_from_grid(h.squeeze(0), patch_, id());
}

// ---------------------------------------------------------------------------
// TorchScript
// ---------------------------------------------------------------------------

struct TorchScriptExtractor::Module {
  torch::jit::script::Module module;
};

TorchScriptExtractor::TorchScriptExtractor(const fs::path& model_path, std::string kind, int input_size)
    : module_(std::make_unique<Module>()), id_(std::move(kind)), input_size_(input_size) {
  if (!fs::is_regular_file(model_path)) {
    throw user_error("feature extractor '" + id_ + "' unavailable: model file not found: " + model_path.string());
  }
  try {
    module_->module = torch::jit::load(model_path.string());
  } catch (const c10::Error& e) {
    throw user_error("feature extractor '" + id_ + "' unavailable: cannot load " + model_path.string());
  }
  module_->module.eval();
  id_ += ":" + model_path.filename().string();
}

TorchScriptExtractor::~TorchScriptExtractor() = default;

FeatureStack TorchScriptExtractor::extract(const Image& image) const {
  torch::NoGradGuard no_grad;
  auto x = image_to_tensor(image);
  if (input_size_ > 0 && (image.height != input_size_ || image.width != input_size_)) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{input_size_, input_size_})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  const auto mean = torch::tensor({0.485f, 0.456f, 0.406f}).view({1, 3, 1, 1});
  const auto stdev = torch::tensor({0.229f, 0.224f, 0.225f}).view({1, 3, 1, 1});
  x = (x - mean) / stdev;
  auto out = module_->module.forward({x}).toTensor();
  const auto side = x.size(2);
  torch::Tensor grid;
  if (out.dim() == 4) {
    grid = out.squeeze(0);
  } else if (out.dim() == 3) {
    auto tokens = out.squeeze(0);  // [N, C]
    auto n = tokens.size(0);
    auto g = static_cast<int64_t>(std::lround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) {
      tokens = tokens.slice(0, 1);  // drop the class token
      n = tokens.size(0);
      g = static_cast<int64_t>(std::lround(std::sqrt(static_cast<double>(n))));
    }
    if (g * g != n) throw user_error("feature extractor returned a non-square token grid");
    grid = tokens.transpose(0, 1).reshape({tokens.size(1), g, g});
  } else {
    throw user_error("feature extractor output must be [1,C,h,w] or [1,N,C]");
  }
  patch_ = static_cast<int>(side / grid.size(1));
  return stack_from_grid(grid, patch_, id_);
}

std::unique_ptr<FeatureExtractor> make_feature_extractor(const ExtractorConfig& config) {
  if (config.backend == "conv_stub") return std::make_unique<ConvStubExtractor>(config.patch, config.channels, config.seed);
  if (config.backend == "dino" || config.backend == "resnet" || config.backend == "torchscript") {
    if (config.model_path.empty()) {
      throw user_error("feature extractor '" + config.backend + "' unavailable: segmentation.model_path not set");
    }
    return std::make_unique<TorchScriptExtractor>(config.model_path, config.backend, config.input_size);
  }
  throw user_error("unknown feature extractor backend '" + config.backend + "'");
}

FeatureStack extract_features(const Image& image, const FeatureExtractor& extractor) { return extractor.extract(image); }

// ---------------------------------------------------------------------------
// Maps
// ---------------------------------------------------------------------------

double cosine_dissimilarity(const float* a, const float* b, int n) {
  double dot = 0, na = 0, nb = 0;
  for (int i = 0; i < n; ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  constexpr double kTiny = 1e-12;
  const bool za = na < kTiny, zb = nb < kTiny;
  if (za && zb) return 0.0;
  if (za || zb) return 2.0;
  const double cos = std::clamp(dot / (na * nb), -1.0, 1.0);
  return 1.0 - cos;
}

namespace {

void check_compatible(const FeatureStack& f, const FeatureStack& g) {
  if (f.grid_h != g.grid_h || f.grid_w != g.grid_w || f.channels != g.channels) {
    throw user_error("feature grids differ in shape");
  }
  if (f.extractor_id != g.extractor_id) {
    throw user_error("feature stacks come from different extractors (" + f.extractor_id + " vs " + g.extractor_id + ")");
  }
}

// Half-pixel-centre sample positions along one axis.
struct Tap {
  int i0, i1;
  float w1;
};

std::vector<Tap> bilinear_taps(int src, int dst) {
  std::vector<Tap> taps(static_cast<std::size_t>(dst));
  const double scale = static_cast<double>(src) / dst;
  for (int d = 0; d < dst; ++d) {
    double pos = (d + 0.5) * scale - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    const int i0 = static_cast<int>(std::floor(pos));
    const int i1 = std::min(i0 + 1, src - 1);
    taps[d] = {i0, i1, static_cast<float>(pos - i0)};
  }
  return taps;
}

}  // namespace

std::vector<float> grid_dissimilarity(const FeatureStack& f, const FeatureStack& f_rec) {
  check_compatible(f, f_rec);
  std::vector<float> out(static_cast<std::size_t>(f.grid_h) * f.grid_w);
  for (int y = 0; y < f.grid_h; ++y)
    for (int x = 0; x < f.grid_w; ++x)
      out[static_cast<std::size_t>(y) * f.grid_w + x] =
          static_cast<float>(cosine_dissimilarity(f.at(y, x), f_rec.at(y, x), f.channels));
  return out;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int sh, int sw, int dh, int dw) {
  const auto ty = bilinear_taps(sh, dh), tx = bilinear_taps(sw, dw);
  std::vector<float> out(static_cast<std::size_t>(dh) * dw);
  for (int y = 0; y < dh; ++y) {
    for (int x = 0; x < dw; ++x) {
      auto v = [&](int yy, int xx) { return src[static_cast<std::size_t>(yy) * sw + xx]; };
      const float top = v(ty[y].i0, tx[x].i0) * (1 - tx[x].w1) + v(ty[y].i0, tx[x].i1) * tx[x].w1;
      const float bot = v(ty[y].i1, tx[x].i0) * (1 - tx[x].w1) + v(ty[y].i1, tx[x].i1) * tx[x].w1;
      out[static_cast<std::size_t>(y) * dw + x] = top * (1 - ty[y].w1) + bot * ty[y].w1;
    }
  }
  return out;
}

std::vector<float> gaussian_smooth(const std::vector<float>& src, int h, int w, double sigma) {
  if (sigma <= 0) return src;
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= sum;

  // Symmetric reflection about the edge ("d c b a | a b c d | d c b a").
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };

  std::vector<float> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * src[static_cast<std::size_t>(y) * w + reflect(x + k, w)];
      tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[static_cast<std::size_t>(reflect(y + k, h)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  return out;
}

AnomalyMap anomaly_map(const FeatureStack& f, const FeatureStack& f_rec, Resolution target,
                       const SegmentationConfig& config) {
  check_compatible(f, f_rec);
  if (target.height < 1 || target.width < 1) throw user_error("anomaly map target size must be positive");
  AnomalyMap map;
  map.height = target.height;
  map.width = target.width;

  if (config.upsample == UpsampleMode::scores) {
    map.scores = resize_bilinear(grid_dissimilarity(f, f_rec), f.grid_h, f.grid_w, target.height, target.width);
  } else {
    const auto ty = bilinear_taps(f.grid_h, target.height), tx = bilinear_taps(f.grid_w, target.width);
    const int C = f.channels;
    std::vector<float> a(static_cast<std::size_t>(C)), b(static_cast<std::size_t>(C));
    map.scores.resize(target.pixels());
    for (int y = 0; y < target.height; ++y) {
      for (int x = 0; x < target.width; ++x) {
        const float wy = ty[y].w1, wx = tx[x].w1;
        const float w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx, w10 = wy * (1 - wx), w11 = wy * wx;
        const float *f00 = f.at(ty[y].i0, tx[x].i0), *f01 = f.at(ty[y].i0, tx[x].i1), *f10 = f.at(ty[y].i1, tx[x].i0),
                    *f11 = f.at(ty[y].i1, tx[x].i1);
        const float *g00 = f_rec.at(ty[y].i0, tx[x].i0), *g01 = f_rec.at(ty[y].i0, tx[x].i1),
                    *g10 = f_rec.at(ty[y].i1, tx[x].i0), *g11 = f_rec.at(ty[y].i1, tx[x].i1);
        for (int c = 0; c < C; ++c) {
          a[c] = w00 * f00[c] + w01 * f01[c] + w10 * f10[c] + w11 * f11[c];
          b[c] = w00 * g00[c] + w01 * g01[c] + w10 * g10[c] + w11 * g11[c];
        }
        map.scores[static_cast<std::size_t>(y) * target.width + x] =
            static_cast<float>(cosine_dissimilarity(a.data(), b.data(), C));
      }
    }
  }
  if (config.sigma > 0) {
    map.scores = gaussian_smooth(map.scores, map.height, map.width, config.sigma);
    map.smoothed = true;
  }
  map.image_score = static_cast<float>(image_score(map, config));
  return map;
}

double image_score(const AnomalyMap& map, const SegmentationConfig& config) {
  if (map.scores.empty()) throw user_error("image_score needs a populated map");
  std::vector<float> s = map.smoothed ? map.scores : gaussian_smooth(map.scores, map.height, map.width, config.sigma);
  if (config.image_score == "max") return *std::max_element(s.begin(), s.end());
  if (config.image_score == "topk_mean") {
    const auto k = static_cast<std::size_t>(std::clamp<int>(config.topk, 1, static_cast<int>(s.size())));
    std::partial_sort(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end(), std::greater<>());
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) sum += s[i];
    return sum / static_cast<double>(k);
  }
  throw user_error("unknown image score '" + config.image_score + "' (expected max or topk_mean)");
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "anomaly map files are written little-endian");

void write_anomaly_map(const fs::path& path, const AnomalyMap& map) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::string buf = "VAMP";
  auto put = [&](const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); };
  const std::uint32_t version = 1, h = static_cast<std::uint32_t>(map.height), w = static_cast<std::uint32_t>(map.width);
  put(&version, 4);
  put(&h, 4);
  put(&w, 4);
  put(&map.image_score, 4);
  put(map.scores.data(), map.scores.size() * sizeof(float));
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw io_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

AnomalyMap read_anomaly_map(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot read anomaly map " + path.string());
  char magic[4];
  std::uint32_t version = 0, h = 0, w = 0;
  AnomalyMap map;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&map.image_score), 4);
  if (!in || std::memcmp(magic, "VAMP", 4) != 0 || version != 1) throw io_error("not an anomaly map file: " + path.string());
  map.height = static_cast<int>(h);
  map.width = static_cast<int>(w);
  map.smoothed = true;
  map.scores.resize(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(map.scores.data()), static_cast<std::streamsize>(map.scores.size() * sizeof(float)));
  if (!in) throw io_error("truncated anomaly map " + path.string());
  return map;
}

void write_anomaly_png(const fs::path& path, const AnomalyMap& map) {
  const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
  const float range = *hi - *lo;
  std::vector<std::uint8_t> gray(map.scores.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray[i] = range > 0 ? to_u8((map.scores[i] - *lo) / range) : 0;
  }
  save_gray8_png(path, map.height, map.width, gray);
}

}  // namespace vlmdiff
