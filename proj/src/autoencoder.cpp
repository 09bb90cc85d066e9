// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/autoencoder.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"
#include "vlmdiff/tensor_convert.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;
namespace nn = torch::nn;
using json = nlohmann::json;

void AutoencoderConfig::validate() const {
  if (factor < 1 || !std::has_single_bit(static_cast<unsigned>(factor))) {
    throw user_error("ae.factor must be a power of two");
  }
  if (latent_dim < 1 || base_channels < 1) throw user_error("ae.latent_dim and ae.base_channels must be >= 1");
  if (!channel_mult.empty() && static_cast<int>(channel_mult.size()) != levels()) {
    throw user_error("ae.channel_mult needs one entry per downsampling level (" + std::to_string(levels()) + ")");
  }
  if (kl_weight < 0) throw user_error("ae.kl_weight must be >= 0");
  if (!(lr > 0)) throw user_error("ae.lr must be > 0");
  if (epochs < 1 || batch < 1) throw user_error("ae.epochs and ae.batch must be >= 1");
  if (recon_loss != "l1" && recon_loss != "mse") throw user_error("ae.recon_loss must be l1 or mse");
  if (!finetuned && generic_images < 1) throw user_error("ae.generic_images must be >= 1");
}

int AutoencoderConfig::levels() const { return std::countr_zero(static_cast<unsigned>(factor)); }

std::vector<int> AutoencoderConfig::channels() const {
  std::vector<int> out;
  for (int i = 0; i < levels(); ++i) {
    const int mult = channel_mult.empty() ? std::min(1 << i, 4) : channel_mult[i];
    out.push_back(base_channels * mult);
  }
  if (out.empty()) out.push_back(base_channels);
  return out;
}

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

json config_to_json(const AutoencoderConfig& c) {
  return {{"factor", c.factor},         {"latent_dim", c.latent_dim}, {"base_channels", c.base_channels},
          {"channel_mult", c.channel_mult}, {"kl_weight", c.kl_weight}, {"finetuned", c.finetuned},
          {"recon_loss", c.recon_loss}};
}

AutoencoderConfig config_from_json(const json& j) {
  AutoencoderConfig c;
  c.factor = j.at("factor");
  c.latent_dim = j.at("latent_dim");
  c.base_channels = j.at("base_channels");
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.kl_weight = j.at("kl_weight");
  c.finetuned = j.at("finetuned");
  c.recon_loss = j.at("recon_loss");
  return c;
}

}  // namespace

namespace detail {

ResnetBlockImpl::ResnetBlockImpl(int in_ch, int out_ch) {
  norm1 = register_module("norm1", nn::GroupNorm(group_count(in_ch), in_ch));
  conv1 = register_module("conv1", conv3(in_ch, out_ch));
  norm2 = register_module("norm2", nn::GroupNorm(group_count(out_ch), out_ch));
  conv2 = register_module("conv2", conv3(out_ch, out_ch));
  if (in_ch != out_ch) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResnetBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1(torch::silu(norm1(x)));
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

VaeEncoderImpl::VaeEncoderImpl(const AutoencoderConfig& config) {
  const auto ch = config.channels();
  body = nn::Sequential();
  body->push_back(conv3(3, ch.front()));
  int prev = ch.front();
  for (int i = 0; i < config.levels(); ++i) {
    body->push_back(ResnetBlock(prev, ch[i]));
    body->push_back(conv3(ch[i], ch[i], 2));
    prev = ch[i];
  }
  body->push_back(ResnetBlock(prev, prev));
  body->push_back(nn::GroupNorm(group_count(prev), prev));
  body->push_back(nn::SiLU());
  body->push_back(conv3(prev, 2 * config.latent_dim));
  register_module("body", body);
}

torch::Tensor VaeEncoderImpl::forward(const torch::Tensor& x) { return body->forward(x); }

VaeDecoderImpl::VaeDecoderImpl(const AutoencoderConfig& config) {
  const auto ch = config.channels();
  body = nn::Sequential();
  int prev = ch.back();
  body->push_back(conv3(config.latent_dim, prev));
  body->push_back(ResnetBlock(prev, prev));
  for (int i = config.levels() - 1; i >= 0; --i) {
    body->push_back(nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    body->push_back(conv3(prev, prev));
    const int next = i > 0 ? ch[i - 1] : ch.front();
    body->push_back(ResnetBlock(prev, next));
    prev = next;
  }
  body->push_back(nn::GroupNorm(group_count(prev), prev));
  body->push_back(nn::SiLU());
  body->push_back(conv3(prev, 3));
  register_module("body", body);
}

torch::Tensor VaeDecoderImpl::forward(const torch::Tensor& z) { return body->forward(z); }

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int c) {
  body = nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, c, 4).stride(2).padding(1)),
                        nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                        nn::Conv2d(nn::Conv2dOptions(c, 2 * c, 4).stride(2).padding(1)),
                        nn::GroupNorm(group_count(2 * c), 2 * c),
                        nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                        nn::Conv2d(nn::Conv2dOptions(2 * c, 1, 3).padding(1)));
  register_module("body", body);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return body->forward(x); }

}  // namespace detail

torch::Tensor Posterior::kl() const {
  return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).flatten(1).sum(1);
}

ImageAutoencoder::ImageAutoencoder(AutoencoderConfig config) : config_(std::move(config)) {
  config_.validate();
  encoder_ = detail::VaeEncoder(config_);
  decoder_ = detail::VaeDecoder(config_);
}

Posterior ImageAutoencoder::posterior(const torch::Tensor& images) const {
  auto moments = encoder_->forward(images * 2.0 - 1.0);
  auto parts = moments.chunk(2, 1);
  return {parts[0], parts[1].clamp(-30.0, 20.0)};
}

torch::Tensor ImageAutoencoder::encode(const torch::Tensor& images) const {
  torch::NoGradGuard no_grad;
  if (images.dim() != 4 || images.size(1) != 3) throw user_error("encode expects [B,3,H,W] images");
  if (images.size(2) % config_.factor != 0 || images.size(3) % config_.factor != 0) {
    throw user_error("image size must be divisible by ae.factor=" + std::to_string(config_.factor));
  }
  return posterior(images).mean;
}

torch::Tensor ImageAutoencoder::decode_raw(const torch::Tensor& latents) const { return decoder_->forward(latents); }

torch::Tensor ImageAutoencoder::decode(const torch::Tensor& latents) const {
  torch::NoGradGuard no_grad;
  if (latents.dim() != 4 || latents.size(1) != config_.latent_dim) {
    throw user_error("decode expects [B," + std::to_string(config_.latent_dim) + ",h,w] latents");
  }
  return ((decode_raw(latents) + 1.0) * 0.5).clamp(0.0, 1.0);
}

LatentCode ImageAutoencoder::encode_image(const Image& image, Resolution expected) const {
  if (image.resolution() != expected) {
    throw user_error("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", expected " + std::to_string(expected.height) + "x" + std::to_string(expected.width));
  }
  return {encode(image_to_tensor(image)).squeeze(0), expected};
}

Image ImageAutoencoder::decode_latent(const LatentCode& z) const {
  const auto& v = z.values;
  if (v.dim() != 3 || v.size(0) != config_.latent_dim ||
      v.size(1) * config_.factor != z.source_resolution.height ||
      v.size(2) * config_.factor != z.source_resolution.width) {
    throw user_error("latent shape does not match the autoencoder configuration");
  }
  return tensor_to_image(decode(v.unsqueeze(0)));
}

void ImageAutoencoder::train(bool on) {
  encoder_->train(on);
  decoder_->train(on);
}

std::vector<torch::Tensor> ImageAutoencoder::parameters() const {
  auto p = encoder_->parameters();
  auto d = decoder_->parameters();
  p.insert(p.end(), d.begin(), d.end());
  return p;
}

void ImageAutoencoder::save(const fs::path& path, const std::string& config_hash, int epoch) const {
  torch::serialize::OutputArchive root, enc, dec;
  encoder_->save(enc);
  decoder_->save(dec);
  root.write("encoder", enc);
  root.write("decoder", dec);
  root.write("kind", c10::IValue(std::string("vlmdiff-autoencoder-1")));
  root.write("config_json", c10::IValue(config_to_json(config_).dump()));
  root.write("config_hash", c10::IValue(config_hash));
  root.write("epoch", c10::IValue(static_cast<int64_t>(epoch)));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  root.save_to(tmp.string());
  fs::rename(tmp, path);
}

ImageAutoencoder ImageAutoencoder::load(const fs::path& path, const std::string& expected_hash) {
  if (!fs::is_regular_file(path)) throw Error(ErrorKind::missing_artifact, "autoencoder checkpoint not found: " + path.string());
  torch::serialize::InputArchive root;
  try {
    root.load_from(path.string());
  } catch (const c10::Error& e) {
    throw io_error("cannot read autoencoder checkpoint " + path.string());
  }
  c10::IValue kind, cfg, hash, epoch;
  if (!root.try_read("kind", kind) || kind.toStringRef() != "vlmdiff-autoencoder-1") {
    throw io_error(path.string() + " is not an autoencoder checkpoint");
  }
  root.read("config_json", cfg);
  root.read("config_hash", hash);
  root.read("epoch", epoch);
  if (!expected_hash.empty() && hash.toStringRef() != expected_hash) {
    throw user_error("autoencoder checkpoint " + path.string() + " was trained with a different configuration (hash " +
                     hash.toStringRef() + ", expected " + expected_hash + ")");
  }
  ImageAutoencoder ae(config_from_json(json::parse(cfg.toStringRef())));
  torch::serialize::InputArchive enc, dec;
  root.read("encoder", enc);
  root.read("decoder", dec);
  ae.encoder_->load(enc);
  ae.decoder_->load(dec);
  ae.epoch_ = static_cast<int>(epoch.toInt());
  ae.train(false);
  return ae;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

std::vector<int64_t> shuffled(int64_t n, std::mt19937_64& rng) {
  std::vector<int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

}  // namespace

ImageAutoencoder train_autoencoder(const torch::Tensor& images, const AutoencoderConfig& config,
                                   const AeTrainOptions& options, std::vector<AeLogEntry>* log) {
  config.validate();
  if (images.dim() != 4 || images.size(0) < 1 || images.size(1) != 3) {
    throw user_error("autoencoder training needs at least one [3,H,W] image");
  }
  torch::manual_seed(options.seed);
  std::mt19937_64 order_rng(splitmix64(options.seed));

  ImageAutoencoder ae(config);
  ae.train(true);
  torch::optim::Adam opt(ae.parameters(), torch::optim::AdamOptions(config.lr).betas({0.5, 0.9}));

  detail::PatchDiscriminator disc{nullptr};
  std::unique_ptr<torch::optim::Adam> disc_opt;
  if (config.adversarial) {
    disc = detail::PatchDiscriminator(config.base_channels);
    disc_opt = std::make_unique<torch::optim::Adam>(disc->parameters(),
                                                    torch::optim::AdamOptions(config.lr).betas({0.5, 0.9}));
  }

  const int64_t n = images.size(0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    AeLogEntry entry;
    entry.epoch = epoch;
    int batches = 0;
    const auto order = shuffled(n, order_rng);
    for (int64_t start = 0; start < n; start += config.batch) {
      const int64_t stop = std::min<int64_t>(n, start + config.batch);
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + stop), torch::kLong);
      auto x = images.index_select(0, idx);
      const auto b = static_cast<double>(x.size(0));

      Posterior post = ae.posterior(x);
      auto z = post.mean + torch::exp(0.5 * post.logvar) * torch::randn_like(post.mean);
      auto recon = ae.decode_raw(z);
      auto target = x * 2.0 - 1.0;
      auto diff = recon - target;
      auto rec_sum = config.recon_loss == "l1" ? diff.abs().sum() / b : diff.pow(2).sum() / b;
      auto kl = post.kl().mean();
      auto loss = rec_sum + config.kl_weight * kl;

      const bool adv_on = config.adversarial && epoch > config.adv_start_epoch;
      torch::Tensor g_adv;
      if (adv_on) {
        g_adv = -disc->forward(recon).mean();
        loss = loss + config.adv_weight * g_adv;
      }
      if (!std::isfinite(loss.item<double>())) {
        throw Error(ErrorKind::numeric, "autoencoder loss became non-finite at epoch " + std::to_string(epoch));
      }
      opt.zero_grad();
      loss.backward();
      opt.step();

      if (adv_on) {
        auto d_real = disc->forward(target);
        auto d_fake = disc->forward(recon.detach());
        auto d_loss = 0.5 * (torch::relu(1.0 - d_real).mean() + torch::relu(1.0 + d_fake).mean());
        disc_opt->zero_grad();
        d_loss.backward();
        disc_opt->step();
        entry.adv += g_adv.item<double>();
      }

      // Reported in image space ([0,1]) so the number reads as a pixel error.
      entry.recon += config.recon_loss == "l1" ? diff.abs().mean().item<double>() * 0.5 : diff.pow(2).mean().item<double>() * 0.25;
      entry.kl += kl.item<double>();
      entry.total += loss.item<double>();
      ++batches;
    }
    entry.recon /= batches;
    entry.kl /= batches;
    entry.total /= batches;
    entry.adv /= batches;
    if (log) log->push_back(entry);
    if (options.on_epoch) options.on_epoch(entry);
    if (!options.checkpoint_path.empty() && config.save_every > 0 && epoch % config.save_every == 0) {
      ae.save(options.checkpoint_path, options.config_hash, epoch);
    }
    ae.set_epoch(epoch);
  }
  ae.train(false);
  if (!options.checkpoint_path.empty()) ae.save(options.checkpoint_path, options.config_hash, config.epochs);
  return ae;
}

torch::Tensor load_split_tensor(const DatasetIndex& index, Split split) {
  const auto ids = index.ids(split);
  if (ids.empty()) throw user_error("dataset has no records in the requested split");
  return batch_to_tensor(load_batch(index, ids));
}

ImageAutoencoder train_autoencoder(const DatasetIndex& index, const AutoencoderConfig& config,
                                   const AeTrainOptions& options, std::vector<AeLogEntry>* log) {
  torch::Tensor images = config.finetuned
                             ? load_split_tensor(index, Split::train)
                             : generic_corpus(config.generic_images, index.resolution, derive_seed(options.seed, "generic"));
  return train_autoencoder(images, config, options, log);
}

torch::Tensor generic_corpus(int count, Resolution res, std::uint64_t seed) {
  if (count < 1) throw user_error("generic corpus needs at least one image");
  const int H = res.height, W = res.width;
  auto out = torch::empty({count, 3, H, W}, torch::kFloat32);
  auto acc = out.accessor<float, 4>();
  for (int n = 0; n < count; ++n) {
    std::mt19937_64 rng(derive_seed(seed, "generic/" + std::to_string(n)));
    auto u = [&](double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53); };
    double bg0[3], bg1[3];
    for (int c = 0; c < 3; ++c) {
      bg0[c] = u(0.1, 0.95);
      bg1[c] = std::clamp(bg0[c] + u(-0.3, 0.3), 0.0, 1.0);
    }
    const bool vertical = u(0, 1) < 0.5;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double t = vertical ? static_cast<double>(y) / H : static_cast<double>(x) / W;
        for (int c = 0; c < 3; ++c) acc[n][c][y][x] = static_cast<float>(bg0[c] + (bg1[c] - bg0[c]) * t);
      }
    const int prims = 1 + static_cast<int>(u(0, 4));
    for (int p = 0; p < prims; ++p) {
      const double col[3] = {u(0, 1), u(0, 1), u(0, 1)};
      const double cx = u(0, W), cy = u(0, H);
      const double rx = u(0.05, 0.35) * W, ry = u(0.05, 0.35) * H;
      const int kind = static_cast<int>(u(0, 3));
      const double ang = u(0, 3.14159265358979), thick = u(1.0, 4.0);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          bool in = false;
          if (kind == 0) in = (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1.0;
          else if (kind == 1) in = std::abs(dx) <= rx && std::abs(dy) <= ry;
          else {
            const double along = dx * std::cos(ang) + dy * std::sin(ang);
            const double across = -dx * std::sin(ang) + dy * std::cos(ang);
            in = std::abs(along) <= rx && std::abs(across) <= thick / 2;
          }
          if (in)
            for (int c = 0; c < 3; ++c) acc[n][c][y][x] = static_cast<float>(col[c]);
        }
    }
  }
  // Same 8-bit quantisation real images go through.
  return (out * 255.0).round() / 255.0;
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  const double mse = (a - b).pow(2).mean().item<double>();
  if (mse <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace vlmdiff
