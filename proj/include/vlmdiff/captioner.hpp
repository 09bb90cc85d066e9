// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "vlmdiff/dataset.hpp"
#include "vlmdiff/error.hpp"

namespace vlmdiff {

inline constexpr std::string_view kIndustrialPrompt = "Describe the main object in detail.";
inline constexpr std::string_view kNaturalPrompt = "Describe the visual features of image in detail.";

enum class PromptMode { industrial, natural };

PromptMode parse_prompt_mode(std::string_view s);
std::string to_string(PromptMode mode);

struct PromptConfig {
  PromptMode mode = PromptMode::industrial;
  std::string train_prompt;
  std::optional<std::string> inference_prompt;

  /// Industrial: describe the main object at train time, no text at inference.
  /// Natural: the same scene prompt for both.
  static PromptConfig for_mode(PromptMode mode);
};

struct CaptionRecord {
  std::string image_path;
  std::string prompt;
  std::string caption;
  std::string model_id;
  std::string created_at;  // ISO-8601 UTC

  bool operator==(const CaptionRecord&) const = default;
};

/// Raised when a provider cannot produce a caption; always retryable.
class ProviderError : public Error {
 public:
  ProviderError(std::string image_path, const std::string& reason)
      : Error(ErrorKind::provider, "caption provider failed for " + image_path + ": " + reason),
        image_path_(std::move(image_path)) {}

  const std::string& image_path() const noexcept { return image_path_; }
  bool retryable() const noexcept { return true; }

 private:
  std::string image_path_;
};

/// A vision-language model that turns (image, prompt) into text.
/// Implementations must be callable from several threads at once.
class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  virtual std::string model_id() const = 0;
  virtual std::string describe(const ImageRecord& record, std::string_view prompt) = 0;
};

/// Deterministic offline provider. For synthetic datasets the caption comes from
/// the manifest ("a circle of color red on plain background"); other images are
/// described by their dominant colour.
class StubCaptionProvider : public CaptionProvider {
 public:
  explicit StubCaptionProvider(std::optional<SynthManifest> manifest = std::nullopt,
                               Resolution resolution = {64, 64});
  std::string model_id() const override { return "stub-v1"; }
  std::string describe(const ImageRecord& record, std::string_view prompt) override;

 private:
  std::optional<SynthManifest> manifest_;
  Resolution resolution_;
};

/// POSTs JSON {"model", "prompt", "image_base64", "image_name"} to a single endpoint.
/// Accepts a plain-text body or JSON carrying "caption", "text" or "response".
class HttpCaptionProvider : public CaptionProvider {
 public:
  struct Options {
    std::string url;  // http://host:port/path
    std::string model = "internvl2-8b";
    std::string token;  // sent as "Authorization: Bearer <token>" when non-empty
    std::chrono::seconds timeout{60};
  };

  explicit HttpCaptionProvider(Options options);
  std::string model_id() const override { return options_.model; }
  std::string describe(const ImageRecord& record, std::string_view prompt) override;

 private:
  Options options_;
  std::string scheme_host_port_;
  std::string path_;
};

/// Runs a local command; `{image}` and `{prompt}` in the template are replaced by
/// shell-quoted values and stdout is the caption.
class CommandCaptionProvider : public CaptionProvider {
 public:
  CommandCaptionProvider(std::string command_template, std::string model_id);
  std::string model_id() const override { return model_id_; }
  std::string describe(const ImageRecord& record, std::string_view prompt) override;

 private:
  std::string template_;
  std::string model_id_;
};

/// Append-only JSON-lines cache keyed by (image_path, prompt, model_id).
class CaptionCache {
 public:
  explicit CaptionCache(std::filesystem::path path);

  std::optional<CaptionRecord> find(const std::string& image_path, const std::string& prompt,
                                    const std::string& model_id) const;
  void append(const CaptionRecord& record);
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  using Key = std::tuple<std::string, std::string, std::string>;
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::map<Key, CaptionRecord> records_;
};

std::string serialize_caption_record(const CaptionRecord& record);
CaptionRecord parse_caption_record(std::string_view line);

/// Cuts to at most `max_chars` bytes without splitting a UTF-8 sequence.
std::string truncate_utf8(std::string_view text, std::size_t max_chars);

/// Cache-first lookup; on a miss queries the provider once and persists the result.
CaptionRecord get_caption(const ImageRecord& record, std::string_view prompt, CaptionProvider& provider,
                          CaptionCache& cache, std::size_t max_chars = 512);

struct CaptionStats {
  std::size_t hits = 0;
  std::size_t misses = 0;
  std::vector<std::string> failures;  // dataset keys of records without a caption
};

/// Captions every train record, plus every test record when the mode has an inference prompt.
CaptionStats caption_dataset(const DatasetIndex& index, const PromptConfig& prompts, CaptionProvider& provider,
                             CaptionCache& cache, int concurrency, std::size_t max_chars = 512);

struct CaptionerConfig {
  std::string provider = "stub";  // stub | http | command
  std::string endpoint;
  std::string model = "internvl2-8b";
  std::string token_env = "VLMDIFF_VLM_TOKEN";
  std::string command;
  int timeout_s = 60;
  int concurrency = 4;
  std::size_t max_chars = 512;
};

std::unique_ptr<CaptionProvider> make_caption_provider(const CaptionerConfig& config, const DatasetIndex& index);

}  // namespace vlmdiff
