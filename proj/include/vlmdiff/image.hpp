// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace vlmdiff {

struct Resolution {
  int height = 256;
  int width = 256;

  bool operator==(const Resolution&) const = default;
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
};

/// Interleaved H x W x C image with float samples, RGB order, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {}

  Resolution resolution() const { return {height, width}; }
  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

/// Binary H x W mask; nonzero means anomalous.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count_nonzero() const;
};

/// Loads a PNG/JPEG as RGB in [0,1], resized to `target` (area interpolation) when needed.
Image load_image(const std::filesystem::path& path, Resolution target);

/// Loads an 8-bit mask (nonzero -> 1), nearest-neighbour resized to `target`.
Mask load_mask(const std::filesystem::path& path, Resolution target);

/// Writes interleaved RGB8 pixels as PNG.
void save_rgb8_png(const std::filesystem::path& path, int height, int width,
                   std::span<const std::uint8_t> rgb);

/// Writes an image as 8-bit RGB PNG (values clamped to [0,1] and rounded).
void save_image_png(const std::filesystem::path& path, const Image& image);

/// Writes single-channel 8-bit PNG.
void save_gray8_png(const std::filesystem::path& path, int height, int width,
                    std::span<const std::uint8_t> gray);

void save_mask_png(const std::filesystem::path& path, const Mask& mask);

std::uint8_t to_u8(float v);

}  // namespace vlmdiff
