// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace vlmdiff {

/// L x D condition consumed by the denoiser's cross-attention, row-major.
struct ConditionVector {
  int slots = 0;
  int dim = 0;
  std::vector<float> values;
  bool null_flag = false;

  bool operator==(const ConditionVector&) const = default;
};

struct TextEncoderConfig {
  std::string backend = "hash";  // hash | torchscript
  int dim = 32;
  int slots = 16;
  std::size_t max_chars = 512;
  std::string model_path;  // torchscript backend
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;

  /// Pure and thread-safe. The empty string maps to the null embedding.
  virtual ConditionVector encode(std::string_view caption) const = 0;
  virtual std::string id() const = 0;

  ConditionVector null_condition() const { return encode(""); }
  int slots() const { return config_.slots; }
  int dim() const { return config_.dim; }
  const TextEncoderConfig& config() const { return config_; }

 protected:
  explicit TextEncoder(TextEncoderConfig config);
  void check_length(std::string_view caption) const;

  TextEncoderConfig config_;
};

/// Offline encoder: lower-cased alphanumeric tokens are hashed into buckets and
/// each bucket gets a fixed sinusoidal code; token k lands in slot k mod L.
/// The null embedding is all zeros.
class HashTextEncoder : public TextEncoder {
 public:
  explicit HashTextEncoder(TextEncoderConfig config);
  ConditionVector encode(std::string_view caption) const override;
  std::string id() const override;

  static constexpr int kBuckets = 4093;
};

std::vector<std::string> tokenize_caption(std::string_view caption);

/// Builds the configured backend. The torchscript backend loads a module whose
/// forward takes int64 byte ids [1, max_chars] (zero padded) and returns [L, D] or [1, L, D].
std::unique_ptr<TextEncoder> make_text_encoder(const TextEncoderConfig& config);

}  // namespace vlmdiff
