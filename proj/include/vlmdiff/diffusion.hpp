// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vlmdiff/autoencoder.hpp"
#include "vlmdiff/text_encoder.hpp"

namespace vlmdiff {

// ---------------------------------------------------------------------------
// Noise schedule and forward process
// ---------------------------------------------------------------------------

/// betas[t], alphas[t] = 1 - betas[t], alpha_bars[t] = prod_{i<=t} alphas[i]; t is 0-based.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  int steps() const { return static_cast<int>(betas.size()); }
};

enum class ScheduleKind { linear };

NoiseSchedule build_schedule(ScheduleKind kind, int T, double beta_start, double beta_end);
/// Schedule from explicit betas (each in (0,1)).
NoiseSchedule schedule_from_betas(std::vector<double> betas);

/// sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps for a single timestep.
torch::Tensor forward_noise(const torch::Tensor& z, int t, const torch::Tensor& eps, const NoiseSchedule& schedule);

/// Batched variant: `t` holds one timestep per leading-dimension entry.
torch::Tensor forward_noise(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& eps,
                            const NoiseSchedule& schedule);

/// eps_theta(z_t, t, cond); t is an int64 tensor [B], cond is [B, L, D].
using NoisePredictor =
    std::function<torch::Tensor(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond)>;

/// Mean squared error between eps and the predictor's estimate at z_t = forward_noise(z, t, eps).
torch::Tensor denoising_loss(const NoisePredictor& predictor, const torch::Tensor& z, const torch::Tensor& t,
                             const torch::Tensor& eps, const torch::Tensor& cond, const NoiseSchedule& schedule);

/// 0-based index of the deepest timestep used for partial noising: ceil(frac * T) - 1.
int start_timestep(double t_start_frac, int T);

/// `steps` timesteps evenly spaced from t_start down to 0 (duplicates removed).
std::vector<int> sampling_timesteps(int t_start, int steps);

/// One deterministic (eta = 0) DDIM update from t to t_prev; t_prev = -1 means the clean latent.
torch::Tensor ddim_step(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& schedule);

/// Runs the reverse process over sampling_timesteps(t_start, steps) and returns the clean latent.
torch::Tensor ddim_reverse(const NoisePredictor& predictor, torch::Tensor z_t, int t_start, int steps,
                           const torch::Tensor& cond, const NoiseSchedule& schedule);

// ---------------------------------------------------------------------------
// Denoiser network
// ---------------------------------------------------------------------------

struct UNetConfig {
  int latent_channels = 4;
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2};
  int num_res_blocks = 1;
  int heads = 4;
  int context_dim = 32;
  bool attention = true;

  void validate() const;
};

namespace detail {

struct TimeResBlockImpl : torch::nn::Module {
  TimeResBlockImpl(int in_ch, int out_ch, int time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(TimeResBlock);

struct AttentionImpl : torch::nn::Module {
  AttentionImpl(int query_dim, int context_dim, int heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  int heads;
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(Attention);

/// Self-attention, cross-attention on the text condition, feed-forward; residual in and out.
struct SpatialTransformerImpl : torch::nn::Module {
  SpatialTransformerImpl(int channels, int context_dim, int heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d proj_in{nullptr}, proj_out{nullptr};
  torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr}, ln3{nullptr};
  Attention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::Linear ff1{nullptr}, ff2{nullptr};
};
TORCH_MODULE(SpatialTransformer);

}  // namespace detail

/// Small attention U-Net predicting the injected noise.
struct DenoiserUNetImpl : torch::nn::Module {
  explicit DenoiserUNetImpl(const UNetConfig& config);
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond);

  UNetConfig config;
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::Linear time1{nullptr}, time2{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::ModuleList down_res, down_attn, downsamplers, up_res, up_attn, upsamplers;
  detail::TimeResBlock mid1{nullptr}, mid2{nullptr};
  detail::SpatialTransformer mid_attn{nullptr};
  std::vector<int> down_kinds;  // per down entry: 0 res(+attn), 1 downsample
};
TORCH_MODULE(DenoiserUNet);

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

struct DiffusionConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int steps = 20;  // reverse sampler steps
  double t_start_frac = 0.5;
  double lr = 1e-5;
  int batch = 12;
  int train_steps = 20000;
  double caption_drop_prob = 0.1;
  bool train_conditioning = true;
  bool scale_latents = true;  // rescale latents to unit standard deviation before diffusion
  double grad_clip = 1.0;
  int save_every = 1000;  // optimizer steps
  UNetConfig unet;

  void validate() const;
};

/// Trained noise predictor together with its schedule and the condition shape it expects.
class LatentDenoiser {
 public:
  LatentDenoiser(const DiffusionConfig& config, int cond_slots, int cond_dim);

  torch::Tensor predict(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond) const;
  NoisePredictor predictor() const;

  const NoiseSchedule& schedule() const { return schedule_; }
  const DiffusionConfig& config() const { return config_; }
  int cond_slots() const { return cond_slots_; }
  int cond_dim() const { return cond_dim_; }
  /// Multiplier applied to autoencoder latents before diffusion (and divided out before decoding).
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double scale);
  DenoiserUNet& net() { return net_; }

  void save(const std::filesystem::path& path, const std::string& config_hash, int step) const;
  static LatentDenoiser load(const std::filesystem::path& path, const std::string& expected_hash);

 private:
  DiffusionConfig config_;
  NoiseSchedule schedule_;
  int cond_slots_;
  int cond_dim_;
  double latent_scale_ = 1.0;
  mutable DenoiserUNet net_{nullptr};
};

struct DiffLogEntry {
  int step = 0;
  double loss = 0;
  int conditioned = 0;  // samples in the batch that carried a caption
};

struct DiffTrainOptions {
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_path;
  std::string config_hash;
  std::function<void(const DiffLogEntry&)> on_step;
  int log_every = 100;
};

/// Minimises E||eps - eps_theta(z_t, t, c)||^2 over `latents` [N,d,h,w] with per-sample
/// conditions `conditions` [N,L,D] and null condition `null_cond` [L,D]. One model for all categories.
LatentDenoiser train_denoiser(const torch::Tensor& latents, const torch::Tensor& conditions,
                              const torch::Tensor& null_cond, const DiffusionConfig& config,
                              const DiffTrainOptions& options, std::vector<DiffLogEntry>* log = nullptr);

/// Mean of the first and last `window` losses of a history.
double smoothed_loss(const std::vector<DiffLogEntry>& log, std::size_t begin, std::size_t window);

/// Partially noises the image latent to ceil(t_start_frac*T)-1, denoises with `steps` DDIM
/// steps and decodes. The noise draw is fixed by `noise_seed`.
Image reconstruct(const Image& image, const ImageAutoencoder& ae, const LatentDenoiser& denoiser,
                  const ConditionVector& condition, double t_start_frac, int steps, std::uint64_t noise_seed);

}  // namespace vlmdiff
