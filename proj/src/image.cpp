// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

#include "vlmdiff/error.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;

std::size_t Mask::count_nonzero() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

std::uint8_t to_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Image load_image(const fs::path& path, Resolution target) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw io_error("cannot read image " + path.string());
  if (bgr.rows != target.height || bgr.cols != target.width) {
    cv::Mat resized;
    cv::resize(bgr, resized, cv::Size(target.width, target.height), 0, 0, cv::INTER_AREA);
    bgr = resized;
  }
  Image img(target.height, target.width, 3);
  for (int y = 0; y < img.height; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width; ++x) {
      img.at(y, x, 0) = row[x][2] / 255.0f;
      img.at(y, x, 1) = row[x][1] / 255.0f;
      img.at(y, x, 2) = row[x][0] / 255.0f;
    }
  }
  return img;
}

Mask load_mask(const fs::path& path, Resolution target) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw io_error("cannot read mask " + path.string());
  if (gray.rows != target.height || gray.cols != target.width) {
    cv::Mat resized;
    cv::resize(gray, resized, cv::Size(target.width, target.height), 0, 0, cv::INTER_NEAREST);
    gray = resized;
  }
  Mask m(target.height, target.width);
  for (int y = 0; y < m.height; ++y) {
    const auto* row = gray.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.width; ++x) m.at(y, x) = row[x] != 0 ? 1 : 0;
  }
  return m;
}

namespace {

void write_mat(const fs::path& path, const cv::Mat& mat) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw io_error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw io_error("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw io_error("cannot write " + path.string());
}

}  // namespace

void save_rgb8_png(const fs::path& path, int height, int width, std::span<const std::uint8_t> rgb) {
  cv::Mat bgr(height, width, CV_8UC3);
  for (int y = 0; y < height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < width; ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
      row[x] = cv::Vec3b(rgb[i + 2], rgb[i + 1], rgb[i]);
    }
  }
  write_mat(path, bgr);
}

void save_image_png(const fs::path& path, const Image& image) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = image.channels == 1 ? image.at(y, x, 0) : image.at(y, x, c);
        rgb[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] = to_u8(v);
      }
    }
  }
  save_rgb8_png(path, image.height, image.width, rgb);
}

void save_gray8_png(const fs::path& path, int height, int width, std::span<const std::uint8_t> gray) {
  cv::Mat m(height, width, CV_8UC1);
  std::copy(gray.begin(), gray.end(), m.ptr<std::uint8_t>(0));
  write_mat(path, m);
}

void save_mask_png(const fs::path& path, const Mask& mask) {
  std::vector<std::uint8_t> gray(mask.data.size());
  std::transform(mask.data.begin(), mask.data.end(), gray.begin(),
                 [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
  save_gray8_png(path, mask.height, mask.width, gray);
}

}  // namespace vlmdiff
