// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>

#include <cmath>
#include <numbers>

#include "vlmdiff/error.hpp"
#include "vlmdiff/tensor_convert.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;
namespace nn = torch::nn;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw user_error("noise schedule needs T >= 1");
  NoiseSchedule s;
  s.betas = std::move(betas);
  s.alphas.reserve(s.betas.size());
  s.alpha_bars.reserve(s.betas.size());
  double running = 1.0;
  for (double b : s.betas) {
    if (!(b > 0.0 && b < 1.0)) throw user_error("every beta must lie in (0,1)");
    const double a = 1.0 - b;
    running *= a;
    s.alphas.push_back(a);
    s.alpha_bars.push_back(running);
  }
  return s;
}

NoiseSchedule build_schedule(ScheduleKind kind, int T, double beta_start, double beta_end) {
  if (T < 1) throw user_error("diff.T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw user_error("noise schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  switch (kind) {
    case ScheduleKind::linear:
      for (int t = 0; t < T; ++t) {
        betas[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
      }
      break;
  }
  return schedule_from_betas(std::move(betas));
}

torch::Tensor forward_noise(const torch::Tensor& z, int t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.steps()) {
    throw user_error("timestep " + std::to_string(t) + " outside [0," + std::to_string(schedule.steps()) + ")");
  }
  if (!z.sizes().equals(eps.sizes())) throw user_error("forward_noise: eps shape differs from z");
  const double ab = schedule.alpha_bars[t];
  return z * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

torch::Tensor forward_noise(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& eps,
                            const NoiseSchedule& schedule) {
  if (!z.sizes().equals(eps.sizes())) throw user_error("forward_noise: eps shape differs from z");
  if (t.dim() != 1 || t.size(0) != z.size(0)) throw user_error("forward_noise: need one timestep per sample");
  if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= schedule.steps()) {
    throw user_error("forward_noise: timestep out of range");
  }
  auto ab = torch::tensor(schedule.alpha_bars, torch::kFloat64).index_select(0, t.to(torch::kLong));
  std::vector<int64_t> shape(static_cast<std::size_t>(z.dim()), 1);
  shape[0] = z.size(0);
  auto sa = ab.sqrt().to(z.scalar_type()).view(shape);
  auto sb = (1.0 - ab).sqrt().to(z.scalar_type()).view(shape);
  return z * sa + eps * sb;
}

torch::Tensor denoising_loss(const NoisePredictor& predictor, const torch::Tensor& z, const torch::Tensor& t,
                             const torch::Tensor& eps, const torch::Tensor& cond, const NoiseSchedule& schedule) {
  auto z_t = forward_noise(z, t, eps, schedule);
  return torch::mse_loss(predictor(z_t, t, cond), eps);
}

int start_timestep(double t_start_frac, int T) {
  if (!(t_start_frac > 0.0 && t_start_frac <= 1.0)) throw user_error("t_start_frac must lie in (0,1]");
  const int t = static_cast<int>(std::ceil(t_start_frac * T - 1e-9)) - 1;
  return std::clamp(t, 0, T - 1);
}

std::vector<int> sampling_timesteps(int t_start, int steps) {
  if (steps < 1) throw user_error("sampler steps must be >= 1");
  if (t_start < 0) throw user_error("t_start must be >= 0");
  std::vector<int> out;
  for (int k = 0; k < steps; ++k) {
    const int t = steps == 1 ? t_start
                             : static_cast<int>(std::lround(static_cast<double>(t_start) * (steps - 1 - k) / (steps - 1)));
    if (out.empty() || out.back() != t) out.push_back(t);
  }
  return out;
}

torch::Tensor ddim_step(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.steps() || t_prev >= t || t_prev < -1) throw user_error("ddim_step: invalid timesteps");
  const double ab = schedule.alpha_bars[t];
  const double ab_prev = t_prev < 0 ? 1.0 : schedule.alpha_bars[t_prev];
  auto z0 = (z_t - eps_hat * std::sqrt(1.0 - ab)) / std::sqrt(ab);
  return z0 * std::sqrt(ab_prev) + eps_hat * std::sqrt(1.0 - ab_prev);
}

torch::Tensor ddim_reverse(const NoisePredictor& predictor, torch::Tensor z_t, int t_start, int steps,
                           const torch::Tensor& cond, const NoiseSchedule& schedule) {
  const auto seq = sampling_timesteps(t_start, steps);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int t = seq[i];
    const int t_prev = i + 1 < seq.size() ? seq[i + 1] : -1;
    auto tt = torch::full({z_t.size(0)}, t, torch::kLong);
    z_t = ddim_step(z_t, predictor(z_t, tt, cond), t, t_prev, schedule);
  }
  return z_t;
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

namespace {

int group_count(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

nn::Conv2d conv3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

template <typename M>
M zero_init(M m) {
  torch::NoGradGuard no_grad;
  for (auto& p : m->parameters()) p.zero_();
  return m;
}

}  // namespace

void UNetConfig::validate() const {
  if (latent_channels < 1 || base_channels < 1 || channel_mult.empty() || num_res_blocks < 1) {
    throw user_error("invalid denoiser U-Net configuration");
  }
  for (int m : channel_mult)
    if (m < 1) throw user_error("diff.channel_mult entries must be >= 1");
  if (heads < 1 || (base_channels % heads) != 0) throw user_error("diff.base_channels must be divisible by diff.heads");
  if (context_dim < 1) throw user_error("condition width must be >= 1");
}

void DiffusionConfig::validate() const {
  if (T < 1) throw user_error("diff.T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw user_error("diff.beta_start/beta_end must satisfy 0 < start <= end < 1");
  }
  if (steps < 1) throw user_error("diff.steps must be >= 1");
  if (!(t_start_frac > 0.0 && t_start_frac <= 1.0)) throw user_error("diff.t_start_frac must lie in (0,1]");
  if (!(lr > 0.0)) throw user_error("diff.lr must be > 0");
  if (batch < 1 || train_steps < 1) throw user_error("diff.batch and diff.train_steps must be >= 1");
  if (!(caption_drop_prob >= 0.0 && caption_drop_prob <= 1.0)) throw user_error("diff.caption_drop_prob must lie in [0,1]");
  unet.validate();
}

namespace detail {

TimeResBlockImpl::TimeResBlockImpl(int in_ch, int out_ch, int time_dim) {
  norm1 = register_module("norm1", nn::GroupNorm(group_count(in_ch), in_ch));
  conv1 = register_module("conv1", conv3(in_ch, out_ch));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out_ch));
  norm2 = register_module("norm2", nn::GroupNorm(group_count(out_ch), out_ch));
  conv2 = register_module("conv2", zero_init(conv3(out_ch, out_ch)));
  if (in_ch != out_ch) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor TimeResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

AttentionImpl::AttentionImpl(int query_dim, int context_dim, int heads_) : heads(heads_) {
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(query_dim, query_dim).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, query_dim).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, query_dim).bias(false)));
  to_out = register_module("to_out", nn::Linear(query_dim, query_dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto B = x.size(0), N = x.size(1), C = x.size(2), M = context.size(1);
  const auto dh = C / heads;
  auto q = to_q(x).view({B, N, heads, dh}).transpose(1, 2);
  auto k = to_k(context).view({B, M, heads, dh}).transpose(1, 2);
  auto v = to_v(context).view({B, M, heads, dh}).transpose(1, 2);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh)), -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({B, N, C});
  return to_out(out);
}

SpatialTransformerImpl::SpatialTransformerImpl(int channels, int context_dim, int heads) {
  norm = register_module("norm", nn::GroupNorm(group_count(channels), channels));
  proj_in = register_module("proj_in", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
  ln1 = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({channels})));
  ln2 = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({channels})));
  ln3 = register_module("ln3", nn::LayerNorm(nn::LayerNormOptions({channels})));
  self_attn = register_module("self_attn", Attention(channels, channels, heads));
  cross_attn = register_module("cross_attn", Attention(channels, context_dim, heads));
  ff1 = register_module("ff1", nn::Linear(channels, 2 * channels));
  ff2 = register_module("ff2", nn::Linear(2 * channels, channels));
  proj_out = register_module("proj_out", zero_init(nn::Conv2d(nn::Conv2dOptions(channels, channels, 1))));
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  auto h = proj_in(norm(x)).flatten(2).transpose(1, 2);  // [B, HW, C]
  auto n1 = ln1(h);
  h = h + self_attn(n1, n1);
  h = h + cross_attn(ln2(h), context);
  h = h + ff2(torch::gelu(ff1(ln3(h))));
  h = h.transpose(1, 2).reshape({B, C, H, W});
  return x + proj_out(h);
}

}  // namespace detail

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({t.size(0), 1})}, 1);
  return emb;
}

DenoiserUNetImpl::DenoiserUNetImpl(const UNetConfig& cfg) : config(cfg) {
  config.validate();
  const int C0 = cfg.base_channels;
  const int time_dim = 4 * C0;
  time1 = register_module("time1", nn::Linear(C0, time_dim));
  time2 = register_module("time2", nn::Linear(time_dim, time_dim));
  conv_in = register_module("conv_in", conv3(cfg.latent_channels, C0));

  down_res = register_module("down_res", nn::ModuleList());
  down_attn = register_module("down_attn", nn::ModuleList());
  downsamplers = register_module("downsamplers", nn::ModuleList());
  up_res = register_module("up_res", nn::ModuleList());
  up_attn = register_module("up_attn", nn::ModuleList());
  upsamplers = register_module("upsamplers", nn::ModuleList());

  const auto levels = static_cast<int>(cfg.channel_mult.size());
  std::vector<int> skips{C0};
  int ch = C0;
  for (int l = 0; l < levels; ++l) {
    const int out = C0 * cfg.channel_mult[l];
    for (int r = 0; r < cfg.num_res_blocks; ++r) {
      down_res->push_back(detail::TimeResBlock(ch, out, time_dim));
      if (cfg.attention) down_attn->push_back(detail::SpatialTransformer(out, cfg.context_dim, cfg.heads));
      ch = out;
      skips.push_back(ch);
    }
    if (l + 1 < levels) {
      downsamplers->push_back(conv3(ch, ch, 2));
      skips.push_back(ch);
    }
  }

  mid1 = register_module("mid1", detail::TimeResBlock(ch, ch, time_dim));
  if (cfg.attention) mid_attn = register_module("mid_attn", detail::SpatialTransformer(ch, cfg.context_dim, cfg.heads));
  mid2 = register_module("mid2", detail::TimeResBlock(ch, ch, time_dim));

  for (int l = levels - 1; l >= 0; --l) {
    const int out = C0 * cfg.channel_mult[l];
    for (int r = 0; r < cfg.num_res_blocks + 1; ++r) {
      const int skip_ch = skips.back();
      skips.pop_back();
      up_res->push_back(detail::TimeResBlock(ch + skip_ch, out, time_dim));
      if (cfg.attention) up_attn->push_back(detail::SpatialTransformer(out, cfg.context_dim, cfg.heads));
      ch = out;
    }
    if (l > 0) upsamplers->push_back(conv3(ch, ch));
  }

  norm_out = register_module("norm_out", nn::GroupNorm(group_count(ch), ch));
  conv_out = register_module("conv_out", zero_init(conv3(ch, cfg.latent_channels)));
}

torch::Tensor DenoiserUNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond) {
  if (cond.dim() != 3 || cond.size(0) != z_t.size(0) || cond.size(2) != config.context_dim) {
    throw user_error("condition must be [B, L, " + std::to_string(config.context_dim) + "]");
  }
  auto temb = time2(torch::silu(time1(timestep_embedding(t, config.base_channels))));
  auto h = conv_in(z_t);
  std::vector<torch::Tensor> skips{h};

  const auto levels = static_cast<int>(config.channel_mult.size());
  std::size_t ri = 0, di = 0;
  for (int l = 0; l < levels; ++l) {
    for (int r = 0; r < config.num_res_blocks; ++r, ++ri) {
      h = down_res[ri]->as<detail::TimeResBlockImpl>()->forward(h, temb);
      if (config.attention) h = down_attn[ri]->as<detail::SpatialTransformerImpl>()->forward(h, cond);
      skips.push_back(h);
    }
    if (l + 1 < levels) {
      h = downsamplers[di++]->as<nn::Conv2dImpl>()->forward(h);
      skips.push_back(h);
    }
  }

  h = mid1->forward(h, temb);
  if (config.attention) h = mid_attn->forward(h, cond);
  h = mid2->forward(h, temb);

  std::size_t ui = 0, si = 0;
  for (int l = levels - 1; l >= 0; --l) {
    for (int r = 0; r < config.num_res_blocks + 1; ++r, ++ui) {
      h = torch::cat({h, skips.back()}, 1);
      skips.pop_back();
      h = up_res[ui]->as<detail::TimeResBlockImpl>()->forward(h, temb);
      if (config.attention) h = up_attn[ui]->as<detail::SpatialTransformerImpl>()->forward(h, cond);
    }
    if (l > 0) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = upsamplers[si++]->as<nn::Conv2dImpl>()->forward(h);
    }
  }
  return conv_out(torch::silu(norm_out(h)));
}

// ---------------------------------------------------------------------------
// LatentDenoiser
// ---------------------------------------------------------------------------

namespace {

json diffusion_to_json(const DiffusionConfig& c) {
  return {{"T", c.T},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"steps", c.steps},
          {"t_start_frac", c.t_start_frac},
          {"latent_channels", c.unet.latent_channels},
          {"base_channels", c.unet.base_channels},
          {"channel_mult", c.unet.channel_mult},
          {"num_res_blocks", c.unet.num_res_blocks},
          {"heads", c.unet.heads},
          {"context_dim", c.unet.context_dim},
          {"attention", c.unet.attention}};
}

DiffusionConfig diffusion_from_json(const json& j) {
  DiffusionConfig c;
  c.T = j.at("T");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  c.steps = j.at("steps");
  c.t_start_frac = j.at("t_start_frac");
  c.unet.latent_channels = j.at("latent_channels");
  c.unet.base_channels = j.at("base_channels");
  c.unet.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.unet.num_res_blocks = j.at("num_res_blocks");
  c.unet.heads = j.at("heads");
  c.unet.context_dim = j.at("context_dim");
  c.unet.attention = j.at("attention");
  return c;
}

}  // namespace

LatentDenoiser::LatentDenoiser(const DiffusionConfig& config, int cond_slots, int cond_dim)
    : config_(config), cond_slots_(cond_slots), cond_dim_(cond_dim) {
  if (config_.unet.context_dim != cond_dim) {
    throw user_error("denoiser context width " + std::to_string(config_.unet.context_dim) +
                     " does not match the text encoder width " + std::to_string(cond_dim));
  }
  config_.validate();
  schedule_ = build_schedule(ScheduleKind::linear, config_.T, config_.beta_start, config_.beta_end);
  net_ = DenoiserUNet(config_.unet);
}

torch::Tensor LatentDenoiser::predict(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond) const {
  if (cond.dim() != 3 || cond.size(1) != cond_slots_ || cond.size(2) != cond_dim_) {
    throw user_error("condition shape does not match the denoiser (expected [B," + std::to_string(cond_slots_) + "," +
                     std::to_string(cond_dim_) + "])");
  }
  return net_->forward(z_t, t, cond);
}

void LatentDenoiser::set_latent_scale(double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw Error(ErrorKind::numeric, "latent scale must be finite and positive");
  latent_scale_ = scale;
}

NoisePredictor LatentDenoiser::predictor() const {
  return [this](const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond) {
    return predict(z_t, t, cond);
  };
}

void LatentDenoiser::save(const fs::path& path, const std::string& config_hash, int step) const {
  torch::serialize::OutputArchive root, net;
  net_->save(net);
  root.write("net", net);
  root.write("kind", c10::IValue(std::string("vlmdiff-denoiser-1")));
  root.write("config_json", c10::IValue(diffusion_to_json(config_).dump()));
  root.write("betas", torch::tensor(schedule_.betas, torch::kFloat64));
  root.write("cond_slots", c10::IValue(static_cast<int64_t>(cond_slots_)));
  root.write("cond_dim", c10::IValue(static_cast<int64_t>(cond_dim_)));
  root.write("config_hash", c10::IValue(config_hash));
  root.write("step", c10::IValue(static_cast<int64_t>(step)));
  root.write("latent_scale", c10::IValue(latent_scale_));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  root.save_to(tmp.string());
  fs::rename(tmp, path);
}

LatentDenoiser LatentDenoiser::load(const fs::path& path, const std::string& expected_hash) {
  if (!fs::is_regular_file(path)) throw Error(ErrorKind::missing_artifact, "denoiser checkpoint not found: " + path.string());
  torch::serialize::InputArchive root;
  try {
    root.load_from(path.string());
  } catch (const c10::Error&) {
    throw io_error("cannot read denoiser checkpoint " + path.string());
  }
  c10::IValue kind, cfg, slots, dim, hash;
  if (!root.try_read("kind", kind) || kind.toStringRef() != "vlmdiff-denoiser-1") {
    throw io_error(path.string() + " is not a denoiser checkpoint");
  }
  root.read("config_json", cfg);
  root.read("cond_slots", slots);
  root.read("cond_dim", dim);
  root.read("config_hash", hash);
  if (!expected_hash.empty() && hash.toStringRef() != expected_hash) {
    throw user_error("denoiser checkpoint " + path.string() + " was trained with a different configuration (hash " +
                     hash.toStringRef() + ", expected " + expected_hash + ")");
  }
  LatentDenoiser d(diffusion_from_json(json::parse(cfg.toStringRef())), static_cast<int>(slots.toInt()),
                   static_cast<int>(dim.toInt()));
  c10::IValue scale;
  if (root.try_read("latent_scale", scale)) d.latent_scale_ = scale.toDouble();
  torch::Tensor betas;
  root.read("betas", betas);
  d.schedule_ = schedule_from_betas(std::vector<double>(betas.data_ptr<double>(), betas.data_ptr<double>() + betas.numel()));
  torch::serialize::InputArchive net;
  root.read("net", net);
  d.net_->load(net);
  d.net_->eval();
  return d;
}

LatentDenoiser train_denoiser(const torch::Tensor& latents, const torch::Tensor& conditions,
                              const torch::Tensor& null_cond, const DiffusionConfig& config,
                              const DiffTrainOptions& options, std::vector<DiffLogEntry>* log) {
  config.validate();
  if (latents.dim() != 4 || latents.size(0) < 1) throw user_error("denoiser training needs at least one latent");
  if (conditions.dim() != 3 || conditions.size(0) != latents.size(0)) {
    throw user_error("need one condition per training latent");
  }
  if (null_cond.dim() != 2 || null_cond.size(0) != conditions.size(1) || null_cond.size(1) != conditions.size(2)) {
    throw user_error("null condition shape differs from the caption conditions");
  }
  torch::manual_seed(options.seed);
  LatentDenoiser model(config, static_cast<int>(conditions.size(1)), static_cast<int>(conditions.size(2)));
  if (config.scale_latents) {
    const double sd = latents.std().item<double>();
    model.set_latent_scale(sd > 1e-8 ? 1.0 / sd : 1.0);
  }
  const torch::Tensor scaled = latents * model.latent_scale();
  model.net()->train();
  torch::optim::AdamW opt(model.net()->parameters(), torch::optim::AdamWOptions(config.lr).weight_decay(0.0));

  const int64_t n = latents.size(0);
  const int64_t B = config.batch;
  const auto& schedule = model.schedule();
  for (int step = 1; step <= config.train_steps; ++step) {
    auto idx = torch::randint(n, {B}, torch::kLong);
    auto z = scaled.index_select(0, idx);
    auto t = torch::randint(schedule.steps(), {B}, torch::kLong);
    auto eps = torch::randn_like(z);
    auto cond = conditions.index_select(0, idx);
    auto keep = torch::rand({B}) >= config.caption_drop_prob;
    if (!config.train_conditioning) keep = torch::zeros({B}, torch::kBool);
    cond = torch::where(keep.view({B, 1, 1}), cond, null_cond.unsqueeze(0).expand_as(cond));

    auto loss = denoising_loss(model.predictor(), z, t, eps, cond, schedule);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw Error(ErrorKind::numeric, "denoiser loss became non-finite at step " + std::to_string(step));
    }
    opt.zero_grad();
    loss.backward();
    if (config.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model.net()->parameters(), config.grad_clip);
    opt.step();

    DiffLogEntry entry{step, value, static_cast<int>(keep.sum().item<int64_t>())};
    if (log) log->push_back(entry);
    if (options.on_step && (step % std::max(options.log_every, 1) == 0 || step == config.train_steps)) {
      options.on_step(entry);
    }
    if (!options.checkpoint_path.empty() && config.save_every > 0 && step % config.save_every == 0) {
      model.save(options.checkpoint_path, options.config_hash, step);
    }
  }
  model.net()->eval();
  if (!options.checkpoint_path.empty()) model.save(options.checkpoint_path, options.config_hash, config.train_steps);
  return model;
}

double smoothed_loss(const std::vector<DiffLogEntry>& log, std::size_t begin, std::size_t window) {
  if (begin >= log.size()) throw user_error("loss window starts past the end of the history");
  const std::size_t end = std::min(log.size(), begin + window);
  double sum = 0;
  for (std::size_t i = begin; i < end; ++i) sum += log[i].loss;
  return sum / static_cast<double>(end - begin);
}

Image reconstruct(const Image& image, const ImageAutoencoder& ae, const LatentDenoiser& denoiser,
                  const ConditionVector& condition, double t_start_frac, int steps, std::uint64_t noise_seed) {
  torch::NoGradGuard no_grad;
  if (condition.slots != denoiser.cond_slots() || condition.dim != denoiser.cond_dim()) {
    throw user_error("condition shape does not match the denoiser checkpoint");
  }
  if (ae.config().latent_dim != denoiser.config().unet.latent_channels) {
    throw user_error("autoencoder latent width does not match the denoiser checkpoint");
  }
  auto z = ae.encode(image_to_tensor(image)) * denoiser.latent_scale();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(noise_seed);
  auto eps = torch::randn(z.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat32));
  const int t_start = start_timestep(t_start_frac, denoiser.schedule().steps());
  auto z_t = forward_noise(z, t_start, eps, denoiser.schedule());
  auto cond = condition_to_tensor(condition).unsqueeze(0);
  auto z0 = ddim_reverse(denoiser.predictor(), z_t, t_start, steps, cond, denoiser.schedule());
  return tensor_to_image(ae.decode(z0 / denoiser.latent_scale()));
}

}  // namespace vlmdiff
