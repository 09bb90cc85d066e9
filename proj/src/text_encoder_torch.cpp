// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <torch/script.h>

#include <cstring>
#include <filesystem>
#include <mutex>

#include "vlmdiff/error.hpp"
#include "vlmdiff/text_encoder.hpp"

namespace vlmdiff {

namespace {

class TorchScriptTextEncoder : public TextEncoder {
 public:
  explicit TorchScriptTextEncoder(TextEncoderConfig config) : TextEncoder(std::move(config)) {
    const std::filesystem::path path = config_.model_path;
    if (path.empty() || !std::filesystem::is_regular_file(path)) {
      throw user_error("text encoder model not found: '" + config_.model_path + "'");
    }
    try {
      module_ = torch::jit::load(path.string());
    } catch (const c10::Error&) {
      throw user_error("cannot load text encoder model " + path.string());
    }
    module_.eval();
    id_ = "torchscript:" + path.filename().string();
  }

  ConditionVector encode(std::string_view caption) const override {
    check_length(caption);
    ConditionVector c;
    c.slots = config_.slots;
    c.dim = config_.dim;
    c.null_flag = caption.empty();
    auto ids = torch::zeros({1, static_cast<int64_t>(config_.max_chars)}, torch::kInt64);
    auto acc = ids.accessor<int64_t, 2>();
    for (std::size_t i = 0; i < caption.size(); ++i) acc[0][static_cast<int64_t>(i)] = static_cast<unsigned char>(caption[i]);

    torch::Tensor out;
    {
      std::lock_guard lock(mu_);
      torch::NoGradGuard no_grad;
      out = module_.forward({ids}).toTensor();
    }
    if (out.dim() == 3) out = out.squeeze(0);
    if (out.dim() != 2 || out.size(0) != config_.slots || out.size(1) != config_.dim) {
      throw user_error("text encoder output must be [" + std::to_string(config_.slots) + ", " +
                       std::to_string(config_.dim) + "]");
    }
    out = out.to(torch::kFloat32).contiguous();
    c.values.resize(static_cast<std::size_t>(out.numel()));
    std::memcpy(c.values.data(), out.data_ptr<float>(), c.values.size() * sizeof(float));
    return c;
  }

  std::string id() const override { return id_; }

 private:
  mutable torch::jit::script::Module module_;
  mutable std::mutex mu_;
  std::string id_;
};

}  // namespace

std::unique_ptr<TextEncoder> make_text_encoder(const TextEncoderConfig& config) {
  if (config.backend == "hash") return std::make_unique<HashTextEncoder>(config);
  if (config.backend == "torchscript") return std::make_unique<TorchScriptTextEncoder>(config);
  throw user_error("unknown text encoder backend '" + config.backend + "'");
}

}  // namespace vlmdiff
