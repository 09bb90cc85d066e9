// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlmdiff/image.hpp"

namespace vlmdiff {

enum class Split { train, test };
enum class Label { normal, anomalous };

struct ImageRecord {
  std::filesystem::path path;
  std::string key;  // path relative to the dataset root, '/'-separated
  std::string category;
  Split split = Split::train;
  Label label = Label::normal;
  std::string defect = "good";
  std::optional<std::filesystem::path> mask_path;

  std::string stem() const { return path.stem().string(); }
  bool anomalous() const { return label == Label::anomalous; }
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<ImageRecord> records;
  std::vector<std::string> categories;  // sorted, unique
  Resolution resolution;

  std::vector<std::size_t> ids(Split split) const;
  std::vector<std::size_t> ids(Split split, const std::string& category) const;
};

/// Indexes `<category>/train/good/*`, `<category>/test/<defect>/*` and
/// `<category>/ground_truth/<defect>/<stem>_mask.png`.
DatasetIndex scan_industrial_layout(const std::filesystem::path& root, Resolution resolution);

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_train = 64;
  int n_test_normal = 16;
  int n_test_anomalous = 16;
  Resolution resolution{64, 64};
  std::vector<std::string> categories{"circle", "square"};
  double min_defect_frac = 0.004;
  double max_defect_frac = 0.04;

  void validate() const;
};

enum class DefectKind { none, block, scratch };

std::string to_string(DefectKind kind);

/// One rendered synthetic sample. `rgb` is interleaved 8-bit RGB.
struct SynthSample {
  std::vector<std::uint8_t> rgb;
  Mask mask;  // empty (all zeros) for normal samples
  std::string shape;
  std::string color;
  DefectKind defect = DefectKind::none;
};

/// Pure function of (options.resolution, shape, defect, sample_seed).
SynthSample render_synthetic_sample(const SynthOptions& options, const std::string& shape,
                                    DefectKind defect, std::uint64_t sample_seed);

struct SynthEntry {
  std::string key;  // relative path of the image
  std::string shape;
  std::string color;
  DefectKind defect = DefectKind::none;
  std::uint64_t sample_seed = 0;
};

struct SynthManifest {
  SynthOptions options;
  std::vector<SynthEntry> entries;

  const SynthEntry* find(const std::string& key) const;
};

/// The ordered list of samples a given option set produces.
SynthManifest plan_synthetic_dataset(const SynthOptions& options);

/// Writes the dataset (industrial layout plus a `manifest` file) under `root` and indexes it.
DatasetIndex synthesize_shapes_dataset(const SynthOptions& options, const std::filesystem::path& root);

std::optional<SynthManifest> read_synthetic_manifest(const std::filesystem::path& root);

/// B x H x W x 3 floats in [0,1].
struct Batch {
  int size = 0;
  Resolution resolution;
  std::vector<float> data;
};

Image load_record_image(const DatasetIndex& index, std::size_t id);
Mask load_record_mask(const DatasetIndex& index, std::size_t id);
Batch load_batch(const DatasetIndex& index, std::span<const std::size_t> ids);

}  // namespace vlmdiff
