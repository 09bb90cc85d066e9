// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "common/doctest_torch.hpp"

#include <cmath>
#include <filesystem>
#include <random>

#include "common/instances.hpp"
#include "common/testing.hpp"
#include "vlmdiff/error.hpp"
#include "vlmdiff/metrics.hpp"

using namespace vlmdiff;

namespace {

Mask mask_from(int h, int w, const std::vector<std::uint8_t>& v) {
  Mask m;
  m.height = h;
  m.width = w;
  m.data = v;
  return m;
}

AnomalyMap map_from(int h, int w, const std::vector<float>& v) {
  AnomalyMap a;
  a.height = h;
  a.width = w;
  a.scores = v;
  a.smoothed = true;
  return a;
}

double fast_pro(const oracle::ProInstance& in, double limit, int n) {
  std::vector<AnomalyMap> maps;
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < in.maps.size(); ++i) {
    maps.push_back(map_from(in.h, in.w, in.maps[i]));
    masks.push_back(mask_from(in.h, in.w, in.masks[i]));
  }
  return pro(maps, masks, {limit, n});
}

}  // namespace

TEST_CASE("auroc worked example") {
  CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
  CHECK(oracle::auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
}

TEST_CASE("auroc edge cases") {
  CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auroc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(auroc({0.5, 0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1, 1}) == 0.5);
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), Error);
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {0, 0}), Error);
  CHECK_THROWS_AS(auroc({}, {}), Error);
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {0, 2}), Error);
  CHECK_THROWS_AS(auroc({0.1}, {0, 1}), Error);
}

TEST_CASE("auroc properties") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (int i = 0; i < 40; ++i) {
      y.push_back(i % 3 == 0);
      s.push_back(g(rng) + (y.back() ? 0.7 : 0.0));
    }
    const double a = auroc(s, y);
    std::vector<double> e, neg;
    for (double v : s) {
      e.push_back(std::exp(v));
      neg.push_back(-v);
    }
    CHECK(auroc(e, y) == doctest::Approx(a).epsilon(1e-12));
    CHECK(a + auroc(neg, y) == doctest::Approx(1.0).epsilon(1e-12));  // continuous scores: no ties
  }
}

TEST_CASE("roc curve is monotone and spans the unit square") {
  const auto c = roc_curve({0.1, 0.4, 0.35, 0.8, 0.4}, {0, 0, 1, 1, 1});
  REQUIRE(c.x.size() == c.y.size());
  CHECK(c.x.front() == 0.0);
  CHECK(c.y.front() == 0.0);
  CHECK(c.x.back() == 1.0);
  CHECK(c.y.back() == 1.0);
  for (std::size_t i = 1; i < c.x.size(); ++i) {
    CHECK(c.x[i] >= c.x[i - 1]);
    CHECK(c.y[i] >= c.y[i - 1]);
  }
}

TEST_CASE("regions use 8-connectivity") {
  // Two diagonal pixels touch; the far pixel is separate.
  const Mask m = mask_from(3, 4, {1, 0, 0, 0,  //
                                  0, 1, 0, 1,  //
                                  0, 0, 0, 1});
  const auto r = label_regions(m);
  CHECK(r.count == 2);
  CHECK(r.labels[0] == r.labels[5]);
  CHECK(r.labels[7] == r.labels[11]);
  CHECK(r.labels[0] != r.labels[7]);
  CHECK(r.labels[1] == 0);
}

TEST_CASE("pro of a perfect predictor is 1") {
  const std::vector<std::uint8_t> k{0, 1, 1, 0, 0, 1, 0, 0, 0};
  std::vector<float> s(k.begin(), k.end());
  for (int n : {0, 2, 200}) CHECK(pro({map_from(3, 3, s)}, {mask_from(3, 3, k)}, {0.3, n}) == doctest::Approx(1.0));
}

TEST_CASE("pro of an all-zero prediction is 0") {
  const std::vector<std::uint8_t> k{0, 1, 1, 0, 0, 1, 0, 0, 0};
  for (int n : {0, 200}) CHECK(pro({map_from(3, 3, std::vector<float>(9, 0.0f))}, {mask_from(3, 3, k)}, {0.3, n}) == 0.0);
}

TEST_CASE("pro on an 8x8 toy map with two regions matches the oracle") {
  oracle::ProInstance in;
  in.h = in.w = 8;
  std::vector<std::uint8_t> k(64, 0);
  for (int y = 1; y <= 2; ++y)
    for (int x = 1; x <= 3; ++x) k[y * 8 + x] = 1;  // 6-pixel region
  k[6 * 8 + 6] = k[6 * 8 + 5] = 1;                 // 2-pixel region
  std::vector<float> s(64);
  for (int p = 0; p < 64; ++p) s[p] = static_cast<float>((p * 37) % 11) / 10.0f;
  for (int x = 1; x <= 3; ++x) s[1 * 8 + x] = 0.95f;
  s[6 * 8 + 6] = 0.7f;
  in.maps = {s};
  in.masks = {k};
  for (int n : {0, 7, 200}) {
    const double fast = fast_pro(in, 0.3, n), slow = oracle::pro(in, 0.3, n);
    CHECK(fast == doctest::Approx(slow).epsilon(1e-12));
    CHECK(fast > 0.0);
    CHECK(fast < 1.0);
  }
}

TEST_CASE("pro matches the brute-force oracle on random instances") {
  std::mt19937_64 rng(2026);
  for (int rep = 0; rep < 200; ++rep) {
    const auto in = oracle::random_instance(rng);
    const double limit = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    for (int n : {0, 13}) {
      const double fast = fast_pro(in, limit, n), slow = oracle::pro(in, limit, n);
      REQUIRE(std::abs(fast - slow) <= 1e-9);
    }
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < in.maps.size(); ++i) {
      s.insert(s.end(), in.maps[i].begin(), in.maps[i].end());
      y.insert(y.end(), in.masks[i].begin(), in.masks[i].end());
    }
    REQUIRE(std::abs(auroc(s, y) - oracle::auroc(s, y)) <= 1e-9);
  }
}

TEST_CASE("pro is invariant under monotone transforms with exact thresholds") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 30; ++rep) {
    auto in = oracle::random_instance(rng);
    const double before = fast_pro(in, 0.3, 0);
    for (auto& m : in.maps)
      for (auto& v : m) v = std::exp(3.0f * v);
    CHECK(fast_pro(in, 0.3, 0) == doctest::Approx(before).epsilon(1e-12));
  }
}

TEST_CASE("pro rejects bad input") {
  const auto m = map_from(2, 2, {0.1f, 0.2f, 0.3f, 0.4f});
  CHECK_THROWS_AS(pro({m}, {mask_from(2, 2, {0, 0, 0, 0})}, {}), Error);
  CHECK_THROWS_AS(pro({m}, {mask_from(2, 2, {0, 2, 0, 0})}, {}), Error);
  CHECK_THROWS_AS(pro({m}, {mask_from(2, 2, {0, 1, 0, 0})}, {0.0, 200}), Error);
  CHECK_THROWS_AS(pro({m}, {mask_from(2, 2, {0, 1, 0, 0})}, {1.5, 200}), Error);
  CHECK_THROWS_AS(pro({m}, {}, {}), Error);
}

TEST_CASE("pro curve is monotone and anchored at the origin") {
  std::mt19937_64 rng(9);
  const auto in = oracle::random_instance(rng);
  std::vector<const std::vector<float>*> maps;
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < in.maps.size(); ++i) masks.push_back(mask_from(in.h, in.w, in.masks[i]));
  std::vector<const Mask*> mp;
  for (std::size_t i = 0; i < in.maps.size(); ++i) {
    maps.push_back(&in.maps[i]);
    mp.push_back(&masks[i]);
  }
  const auto r = pro_curve(maps, mp, {0.3, 0});
  CHECK(r.curve.x.front() == 0.0);
  CHECK(r.curve.y.front() == 0.0);
  for (std::size_t i = 1; i < r.curve.x.size(); ++i) {
    CHECK(r.curve.x[i] >= r.curve.x[i - 1]);
    CHECK(r.curve.y[i] >= r.curve.y[i - 1]);
  }
  CHECK(r.value >= 0.0);
  CHECK(r.value <= 1.0);
}

TEST_CASE("evaluate: perfect maps score 1, constant maps score 0.5") {
  testing::TempDir dir;
  const auto index = testing::tiny_dataset(dir.path() / "data");

  const auto perfect = evaluate(index, [&](const ImageRecord& rec) {
    for (std::size_t i = 0; i < index.records.size(); ++i)
      if (index.records[i].key == rec.key) {
        const Mask m = load_record_mask(index, i);
        AnomalyMap a = map_from(m.height, m.width, std::vector<float>(m.data.begin(), m.data.end()));
        a.image_score = rec.anomalous() ? 1.0f : 0.0f;
        return a;
      }
    throw std::runtime_error("unknown record");
  });
  CHECK(perfect.roc_i == 1.0);
  CHECK(perfect.roc_p == 1.0);
  CHECK(perfect.pro == doctest::Approx(1.0));
  CHECK(perfect.per_category.size() == index.categories.size());

  const auto flat = evaluate(index, [&](const ImageRecord&) {
    AnomalyMap a = map_from(index.resolution.height, index.resolution.width,
                            std::vector<float>(index.resolution.pixels(), 0.5f));
    a.image_score = 0.5f;
    return a;
  });
  CHECK(flat.roc_i == 0.5);
  CHECK(flat.roc_p == 0.5);
  CHECK(flat.pro == 0.0);

  double mean = 0;
  for (const auto& [_, c] : perfect.per_category) mean += c.roc_p / static_cast<double>(perfect.per_category.size());
  CHECK(perfect.roc_p == doctest::Approx(mean));
}

TEST_CASE("evaluate names the record whose map is missing") {
  testing::TempDir dir;
  const auto index = testing::tiny_dataset(dir.path() / "data");
  try {
    evaluate(index, dir.path() / "no-maps");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_artifact);
    CHECK(std::string(e.what()).find("anomaly map not found for ") != std::string::npos);
  }
}

TEST_CASE("report and curves serialise deterministically") {
  EvalReport r;
  r.roc_i = 0.1;
  r.roc_p = 2.0 / 3.0;
  r.pro = 0.5;
  CategoryMetrics c;
  c.roc_i = 0.1;
  c.roc_p = 2.0 / 3.0;
  c.pro = 0.5;
  c.roc_p_curve = {{0, 0.5, 1}, {0, 0.75, 1}};
  r.per_category["a"] = c;
  const auto text = format_report(r);
  CHECK(text.find("roc_p = 0.66666666666666663\n") != std::string::npos);
  CHECK(text.find("a.pro = 0.5\n") != std::string::npos);
  CHECK(format_report(r) == text);
  const auto csv = format_curves_csv(r);
  CHECK(csv.rfind("category,curve,fpr,value\n", 0) == 0);
  CHECK(csv.find("a,roc_p,0.5,0.75\n") != std::string::npos);
}
