// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "common/doctest_torch.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "common/testing.hpp"
#include "vlmdiff/error.hpp"
#include "vlmdiff/segmentation.hpp"

using namespace vlmdiff;

namespace {

FeatureStack stack(int gh, int gw, int c, std::vector<float> v, std::string id = "t") {
  FeatureStack f;
  f.grid_h = gh;
  f.grid_w = gw;
  f.channels = c;
  f.patch_size = 1;
  f.extractor_id = std::move(id);
  f.features = std::move(v);
  return f;
}

FeatureStack random_stack(int gh, int gw, int c, std::mt19937_64& rng) {
  std::normal_distribution<float> g;
  std::vector<float> v(static_cast<std::size_t>(gh) * gw * c);
  for (auto& x : v) x = g(rng);
  return stack(gh, gw, c, v);
}

Image noise_image(int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(side, side);
  for (auto& v : img.data) v = u(rng);
  return img;
}

std::vector<double> gauss_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(4 * sigma));
  std::vector<double> k;
  double sum = 0;
  for (int i = -r; i <= r; ++i) {
    k.push_back(std::exp(-0.5 * i * i / (sigma * sigma)));
    sum += k.back();
  }
  for (auto& v : k) v /= sum;
  return k;  // k[r] is the centre tap
}

}  // namespace

TEST_CASE("cosine dissimilarity values") {
  const float x[] = {1, 0}, y[] = {0, 1}, d[] = {1, 1}, m[] = {-1, 0}, z[] = {0, 0}, s[] = {3, 0};
  CHECK(cosine_dissimilarity(x, y, 2) == doctest::Approx(1.0));
  CHECK(cosine_dissimilarity(d, x, 2) == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)));
  CHECK(cosine_dissimilarity(x, m, 2) == doctest::Approx(2.0));
  CHECK(cosine_dissimilarity(x, s, 2) == doctest::Approx(0.0));
  CHECK(cosine_dissimilarity(z, z, 2) == 0.0);
  CHECK(cosine_dissimilarity(z, x, 2) == 2.0);
  CHECK(cosine_dissimilarity(x, z, 2) == 2.0);
}

TEST_CASE("grid dissimilarity on a hand-coded 2x2 grid") {
  const auto f = stack(2, 2, 2, {1, 0, 1, 1, 1, 0, 0, 0});
  const auto g = stack(2, 2, 2, {0, 1, 1, 0, -2, 0, 0, 0});
  const auto d = grid_dissimilarity(f, g);
  REQUIRE(d.size() == 4);
  CHECK(d[0] == doctest::Approx(1.0));
  CHECK(d[1] == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)));
  CHECK(d[2] == doctest::Approx(2.0));
  CHECK(d[3] == 0.0f);

  SegmentationConfig raw;
  raw.sigma = 0;
  for (auto mode : {UpsampleMode::features, UpsampleMode::scores}) {
    raw.upsample = mode;
    const auto a = anomaly_map(f, g, {2, 2}, raw);
    for (int i = 0; i < 4; ++i) CHECK(a.scores[i] == doctest::Approx(d[i]).epsilon(1e-6));
    CHECK(a.image_score == doctest::Approx(2.0));
  }
}

TEST_CASE("anomaly map properties on random features") {
  std::mt19937_64 rng(1);
  for (auto mode : {UpsampleMode::features, UpsampleMode::scores}) {
    SegmentationConfig cfg;
    cfg.upsample = mode;
    const auto f = random_stack(4, 4, 16, rng), g = random_stack(4, 4, 16, rng);
    const auto self = anomaly_map(f, f, {32, 32}, cfg);
    for (float v : self.scores) CHECK(std::abs(v) <= 1e-6f);
    CHECK(self.image_score <= 1e-6f);

    auto neg = f;
    for (auto& v : neg.features) v = -v;
    SegmentationConfig raw = cfg;
    raw.sigma = 0;
    for (float v : anomaly_map(f, neg, {32, 32}, raw).scores) CHECK(v == doctest::Approx(2.0).epsilon(1e-5));

    const auto ab = anomaly_map(f, g, {32, 32}, cfg), ba = anomaly_map(g, f, {32, 32}, cfg);
    CHECK(ab.scores == ba.scores);
    REQUIRE(ab.scores.size() == 32u * 32u);
    for (float v : ab.scores) {
      CHECK(v >= 0.0f);
      CHECK(v <= 2.0f);
    }
  }
}

TEST_CASE("zero feature vectors never produce NaN") {
  auto f = stack(2, 2, 3, std::vector<float>(12, 0.0f));
  auto g = f;
  g.features[0] = 1.0f;  // one non-zero cell
  for (auto mode : {UpsampleMode::features, UpsampleMode::scores}) {
    SegmentationConfig cfg;
    cfg.upsample = mode;
    cfg.sigma = 0;
    const auto a = anomaly_map(f, g, {8, 8}, cfg);
    for (float v : a.scores) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0f);
      CHECK(v <= 2.0f);
    }
    CHECK(a.at(0, 0) == doctest::Approx(2.0));
    CHECK(a.at(7, 7) == 0.0f);
  }
}

TEST_CASE("anomaly map rejects mismatched stacks") {
  std::mt19937_64 rng(2);
  const auto f = random_stack(4, 4, 8, rng);
  auto other = f;
  other.extractor_id = "other";
  CHECK_THROWS_AS(anomaly_map(f, other, {16, 16}), Error);
  const auto small = random_stack(2, 4, 8, rng);
  CHECK_THROWS_AS(anomaly_map(f, small, {16, 16}), Error);
}

TEST_CASE("bilinear resize uses half-pixel centres and clamps edges") {
  const auto r = resize_bilinear({0.0f, 1.0f}, 1, 2, 1, 4);
  REQUIRE(r.size() == 4);
  CHECK(r[0] == doctest::Approx(0.0));
  CHECK(r[1] == doctest::Approx(0.25));
  CHECK(r[2] == doctest::Approx(0.75));
  CHECK(r[3] == doctest::Approx(1.0));
  for (float v : resize_bilinear(std::vector<float>(6, 0.3f), 2, 3, 7, 5)) CHECK(v == doctest::Approx(0.3));
  const std::vector<float> same{1, 2, 3, 4};
  CHECK(resize_bilinear(same, 2, 2, 2, 2) == same);
}

TEST_CASE("gaussian smoothing against a direct kernel") {
  const double sigma = 1.0;
  const auto k = gauss_kernel(sigma);
  const int r = 4;

  std::vector<float> impulse(21 * 21, 0.0f);
  impulse[10 * 21 + 10] = 1.0f;
  const auto s = gaussian_smooth(impulse, 21, 21, sigma);
  CHECK(s[10 * 21 + 10] == doctest::Approx(k[r] * k[r]).epsilon(1e-6));
  CHECK(s[10 * 21 + 11] == doctest::Approx(k[r] * k[r + 1]).epsilon(1e-6));
  CHECK(s[12 * 21 + 9] == doctest::Approx(k[r + 2] * k[r + 1]).epsilon(1e-6));
  double sum = 0;
  for (float v : s) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));

  // Symmetric reflection at the border: the tap one step outside lands on the edge pixel.
  std::vector<float> corner(10 * 10, 0.0f);
  corner[0] = 1.0f;
  const auto c = gaussian_smooth(corner, 10, 10, sigma);
  const double edge = k[r] + k[r + 1];
  CHECK(c[0] == doctest::Approx(edge * edge).epsilon(1e-6));

  for (float v : gaussian_smooth(std::vector<float>(50, 0.7f), 5, 10, 4.0)) CHECK(v == doctest::Approx(0.7).epsilon(1e-6));
  const std::vector<float> src{1, 2, 3, 4};
  CHECK(gaussian_smooth(src, 2, 2, 0.0) == src);
}

TEST_CASE("image score") {
  AnomalyMap m;
  m.height = 4;
  m.width = 4;
  m.scores.assign(16, 0.1f);
  m.scores[5] = 0.9f;
  m.smoothed = true;
  CHECK(image_score(m) == doctest::Approx(0.9));
  SegmentationConfig topk;
  topk.image_score = "topk_mean";
  topk.topk = 2;
  CHECK(image_score(m, topk) == doctest::Approx(0.5));
  m.smoothed = false;
  CHECK(image_score(m) < 0.9);  // smoothing spreads the peak
  SegmentationConfig bad;
  bad.image_score = "median";
  CHECK_THROWS_AS(image_score(m, bad), Error);
}

TEST_CASE("conv stub extractor shapes and determinism") {
  const ConvStubExtractor ex(8, 64, 7);
  const auto img = noise_image(256, 1);
  const auto f = ex.extract(img);
  CHECK(f.grid_h == 32);
  CHECK(f.grid_w == 32);
  CHECK(f.channels == 64);
  CHECK(f.patch_size == 8);
  CHECK(f.features.size() == 32u * 32u * 64u);
  CHECK(f.extractor_id == ex.id());
  CHECK(ex.extract(img).features == f.features);
  CHECK(ConvStubExtractor(8, 64, 7).extract(img).features == f.features);
  CHECK(ConvStubExtractor(8, 64, 8).extract(img).features != f.features);
  CHECK(ConvStubExtractor(8, 64, 8).id() != ex.id());
  CHECK_THROWS_AS(ex.extract(noise_image(60, 1)), Error);

  ExtractorConfig cfg;
  cfg.patch = 4;
  cfg.channels = 16;
  const auto made = make_feature_extractor(cfg);
  CHECK(made->patch_size() == 4);
  cfg.backend = "nope";
  CHECK_THROWS_AS(make_feature_extractor(cfg), Error);
}

TEST_CASE("conv stub features are local") {
  const ConvStubExtractor ex(8, 32, 3);
  const auto img = noise_image(64, 2);
  auto changed = img;
  for (int y = 24; y < 32; ++y)
    for (int x = 24; x < 32; ++x)
      for (int c = 0; c < 3; ++c) changed.at(y, x, c) = 1.0f - changed.at(y, x, c);
  const auto a = ex.extract(img), b = ex.extract(changed);
  REQUIRE(ex.halo() < 8);
  int moved = 0;
  for (int gy = 0; gy < 8; ++gy)
    for (int gx = 0; gx < 8; ++gx) {
      double diff = 0;
      for (int c = 0; c < 32; ++c) diff = std::max(diff, static_cast<double>(std::abs(a.at(gy, gx)[c] - b.at(gy, gx)[c])));
      if (std::abs(gy - 3) > 1 || std::abs(gx - 3) > 1) CHECK(diff <= 1e-6);
      if (gy == 3 && gx == 3 && diff > 1e-3) ++moved;
    }
  CHECK(moved == 1);
}

TEST_CASE("anomaly map file round trip") {
  testing::TempDir dir;
  AnomalyMap m;
  m.height = 3;
  m.width = 5;
  for (int i = 0; i < 15; ++i) m.scores.push_back(0.125f * i);
  m.image_score = 1.5f;
  const auto path = dir.path() / "a" / "m.bin";
  write_anomaly_map(path, m);
  const auto back = read_anomaly_map(path);
  CHECK(back.height == 3);
  CHECK(back.width == 5);
  CHECK(back.scores == m.scores);
  CHECK(back.image_score == 1.5f);

  std::ofstream(dir.path() / "bad.bin") << "NOPE0000000000000000";
  CHECK_THROWS_AS(read_anomaly_map(dir.path() / "bad.bin"), Error);
  CHECK_THROWS_AS(read_anomaly_map(dir.path() / "missing.bin"), Error);
  write_anomaly_png(dir.path() / "m.png", m);
  CHECK(std::filesystem::file_size(dir.path() / "m.png") > 0);
}

TEST_CASE("torchscript extractors accept map and token outputs") {
  const std::filesystem::path dir = VLMDIFF_TS_FIXTURES;
  if (!std::filesystem::exists(dir / "conv_trunk.pt")) {
    MESSAGE("TorchScript fixtures unavailable; skipping");
    return;
  }
  const auto img = noise_image(64, 3);
  ExtractorConfig cfg;
  cfg.backend = "resnet";
  cfg.model_path = (dir / "conv_trunk.pt").string();
  const auto conv = make_feature_extractor(cfg);
  const auto a = conv->extract(img);
  CHECK(a.grid_h == 8);
  CHECK(a.grid_w == 8);
  CHECK(a.channels == 16);
  CHECK(conv->patch_size() == 8);
  CHECK(conv->extract(img).features == a.features);

  cfg.backend = "dino";
  cfg.model_path = (dir / "token_trunk.pt").string();
  const auto tok = make_feature_extractor(cfg)->extract(img);
  CHECK(tok.grid_h == 8);
  CHECK(tok.channels == 12);
  CHECK(anomaly_map(tok, tok, {64, 64}).image_score <= 1e-6f);

  cfg.model_path = (dir / "missing.pt").string();
  CHECK_THROWS_AS(make_feature_extractor(cfg), Error);
}
