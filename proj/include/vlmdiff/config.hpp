// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vlmdiff/autoencoder.hpp"
#include "vlmdiff/captioner.hpp"
#include "vlmdiff/dataset.hpp"
#include "vlmdiff/diffusion.hpp"
#include "vlmdiff/metrics.hpp"
#include "vlmdiff/segmentation.hpp"
#include "vlmdiff/text_encoder.hpp"

namespace vlmdiff {

struct DatasetSection {
  std::string source = "synthetic";  // synthetic | folder
  std::filesystem::path root;        // folder: dataset root; synthetic: defaults to <output_dir>/data
  Resolution resolution{64, 64};
  SynthOptions synth;                // synthetic only; resolution follows `resolution`
};

struct SegmentationSection {
  ExtractorConfig extractor;
  SegmentationConfig map;
};

enum class ConditionSource { auto_mode, caption, null };

struct RunConfig {
  DatasetSection dataset;
  CaptionerConfig captioner;
  TextEncoderConfig encoder;
  AutoencoderConfig ae;
  DiffusionConfig diff;
  /// Condition used at inference: auto follows the mode (natural: caption, industrial: null).
  ConditionSource inference_conditioning = ConditionSource::auto_mode;
  SegmentationSection segmentation;
  ProOptions metrics;
  PromptMode mode = PromptMode::industrial;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "run";

  /// Checks every section; throws a user error naming the offending key.
  void validate() const;

  std::filesystem::path dataset_root() const;
  bool caption_at_inference() const;
  /// Prompts used for captioning; test images get a prompt exactly when a caption
  /// conditions inference.
  PromptConfig prompts() const;
};

/// Parses a JSON document (empty = all defaults), applies `key=value` overrides
/// with dotted keys, and validates. Unknown keys are errors. Relative paths are
/// resolved against `base_dir`.
RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides,
                           const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Canonical JSON of the effective configuration (all keys, sorted).
std::string config_json(const RunConfig& config);
/// Canonical JSON of the listed top-level sections ("dataset", "ae", ... plus "mode", "seed").
std::string sections_json(const RunConfig& config, const std::vector<std::string>& sections);
std::string config_hash(const RunConfig& config);
std::string sections_hash(const RunConfig& config, const std::vector<std::string>& sections);

std::string to_string(ConditionSource source);

}  // namespace vlmdiff
