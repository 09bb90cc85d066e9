// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vlmdiff/dataset.hpp"
#include "vlmdiff/image.hpp"

namespace vlmdiff {

struct AutoencoderConfig {
  int factor = 8;  // spatial downsampling, power of two
  int latent_dim = 4;
  int base_channels = 32;
  std::vector<int> channel_mult;  // one entry per downsampling level; empty -> min(2^i, 4)
  double kl_weight = 1e-6;
  double lr = 4.5e-5;
  int epochs = 50;
  int batch = 32;
  int save_every = 10;  // epochs
  std::string recon_loss = "mse";  // mse | l1
  bool finetuned = true;          // false: train on a generic procedural corpus instead of the dataset
  int generic_images = 128;
  bool adversarial = false;
  double adv_weight = 0.1;
  int adv_start_epoch = 0;

  void validate() const;
  int levels() const;
  std::vector<int> channels() const;
};

/// Latent of one image, [d, h, w] with h = H/f and w = W/f.
struct LatentCode {
  torch::Tensor values;
  Resolution source_resolution;
};

namespace detail {

struct ResnetBlockImpl : torch::nn::Module {
  ResnetBlockImpl(int in_ch, int out_ch);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResnetBlock);

struct VaeEncoderImpl : torch::nn::Module {
  explicit VaeEncoderImpl(const AutoencoderConfig& config);
  /// Returns [B, 2d, h, w]: posterior mean and log-variance stacked on channels.
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(VaeEncoder);

struct VaeDecoderImpl : torch::nn::Module {
  explicit VaeDecoderImpl(const AutoencoderConfig& config);
  /// Output in model space ([-1,1] nominal, unclamped).
  torch::Tensor forward(const torch::Tensor& z);

  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(VaeDecoder);

struct PatchDiscriminatorImpl : torch::nn::Module {
  explicit PatchDiscriminatorImpl(int base_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

}  // namespace detail

struct Posterior {
  torch::Tensor mean;
  torch::Tensor logvar;

  /// KL(N(mean, exp(logvar)) || N(0, I)) summed over latent elements, one value per sample.
  torch::Tensor kl() const;
};

/// KL-regularised convolutional autoencoder. Inference uses the posterior mean,
/// so encode/decode are pure functions of the parameters.
class ImageAutoencoder {
 public:
  explicit ImageAutoencoder(AutoencoderConfig config);

  const AutoencoderConfig& config() const { return config_; }

  Posterior posterior(const torch::Tensor& images) const;   // images [B,3,H,W] in [0,1]
  torch::Tensor encode(const torch::Tensor& images) const;  // [B,d,h,w]
  torch::Tensor decode(const torch::Tensor& latents) const; // [B,3,H,W] in [0,1]
  torch::Tensor decode_raw(const torch::Tensor& latents) const;

  LatentCode encode_image(const Image& image, Resolution expected) const;
  Image decode_latent(const LatentCode& z) const;

  void train(bool on = true);
  std::vector<torch::Tensor> parameters() const;

  void save(const std::filesystem::path& path, const std::string& config_hash, int epoch) const;
  /// Throws when the stored config hash differs from `expected_hash` (unless empty).
  static ImageAutoencoder load(const std::filesystem::path& path, const std::string& expected_hash);

  int epoch() const { return epoch_; }
  void set_epoch(int epoch) { epoch_ = epoch; }
  bool finetuned() const { return config_.finetuned; }

 private:
  AutoencoderConfig config_;
  mutable detail::VaeEncoder encoder_{nullptr};
  mutable detail::VaeDecoder decoder_{nullptr};
  int epoch_ = 0;
};

struct AeLogEntry {
  int epoch = 0;
  double recon = 0;  // mean per-element reconstruction error
  double kl = 0;     // per-sample KL
  double total = 0;
  double adv = 0;
};

struct AeTrainOptions {
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_path;  // empty: no intermediate checkpoints
  std::string config_hash;
  std::function<void(const AeLogEntry&)> on_epoch;
};

/// Trains on `images` ([N,3,H,W] in [0,1]) from random initialisation.
ImageAutoencoder train_autoencoder(const torch::Tensor& images, const AutoencoderConfig& config,
                                   const AeTrainOptions& options, std::vector<AeLogEntry>* log = nullptr);

/// Trains on the index's train split, or on the generic corpus when `config.finetuned` is false.
ImageAutoencoder train_autoencoder(const DatasetIndex& index, const AutoencoderConfig& config,
                                   const AeTrainOptions& options, std::vector<AeLogEntry>* log = nullptr);

/// Procedural images of random primitives on random backgrounds; stands in for a generic
/// pretraining corpus the autoencoder never saw this dataset in.
torch::Tensor generic_corpus(int count, Resolution resolution, std::uint64_t seed);

/// Train-split images as [N,3,H,W].
torch::Tensor load_split_tensor(const DatasetIndex& index, Split split);

double psnr(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace vlmdiff
