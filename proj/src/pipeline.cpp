// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"
#include "vlmdiff/tensor_convert.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;
using json = nlohmann::json;

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> kStages{Stage::synth,      Stage::caption, Stage::train_ae, Stage::train_diff,
                                          Stage::infer,      Stage::eval,    Stage::report};
  return kStages;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::synth: return "synth";
    case Stage::caption: return "caption";
    case Stage::train_ae: return "train_ae";
    case Stage::train_diff: return "train_diff";
    case Stage::infer: return "infer";
    case Stage::eval: return "eval";
    case Stage::report: return "report";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : all_stages())
    if (to_string(s) == name) return s;
  throw user_error("unknown stage '" + std::string(name) +
                   "' (expected synth, caption, train_ae, train_diff, infer, eval or report)");
}

std::uint64_t stage_seed(std::uint64_t root, Stage stage) { return derive_seed(root, "stage/" + to_string(stage)); }

namespace {

struct Artifact {
  std::string what;  // human name, e.g. "autoencoder checkpoint"
  fs::path path;
  Stage producer;
  bool hash_content = true;  // false: only existence matters; a digest is recorded separately
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require(const Artifact& a) {
  if (!fs::exists(a.path)) {
    throw Error(ErrorKind::missing_artifact,
                a.what + " not found; run " + to_string(a.producer) + " (missing " + a.path.string() + ")");
  }
}

json hashes(const std::vector<Artifact>& artifacts) {
  json out = json::object();
  for (const auto& a : artifacts) {
    if (!a.hash_content) continue;
    out[a.path.filename().string()] = fs::exists(a.path) ? artifact_hash(a.path) : "";
  }
  return out;
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw io_error("cannot append to " + path.string());
  out << line << "\n";
}

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

DatasetIndex open_dataset(const RunConfig& cfg) {
  const fs::path root = cfg.dataset_root();
  if (!fs::is_directory(root)) {
    if (cfg.dataset.source == "synthetic") {
      throw Error(ErrorKind::missing_artifact, "dataset not found; run synth (missing " + root.string() + ")");
    }
    throw user_error("dataset root not found: " + root.string());
  }
  return scan_industrial_layout(root, cfg.dataset.resolution);
}

std::vector<std::uint8_t> to_rgb8(const Image& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_u8(img.data[i]);
  return out;
}

}  // namespace

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)), paths_{config_.output_dir} {
  config_.validate();
}

void Pipeline::message(const std::string& text) const {
  if (on_message) on_message(text);
}

std::string Pipeline::stage_hash(Stage stage) const {
  json cfg = json::parse(config_json(config_));
  // Keys that only matter at inference time must not invalidate training.
  json diff_train = cfg["diff"];
  for (const char* k : {"inference_conditioning", "steps", "t_start_frac"}) diff_train.erase(k);
  json captioning = {{"dataset", cfg["dataset"]}, {"captioner", cfg["captioner"]}, {"mode", cfg["mode"]},
                     {"caption_at_inference", config_.caption_at_inference()}};

  json parts = json::object();
  parts["stage"] = to_string(stage);
  switch (stage) {
    case Stage::synth:
      parts["dataset"] = cfg["dataset"];
      parts["seed"] = cfg["seed"];
      break;
    case Stage::caption:
      parts["captioning"] = captioning;
      break;
    case Stage::train_ae:
      parts["dataset"] = cfg["dataset"];
      parts["ae"] = cfg["ae"];
      parts["seed"] = cfg["seed"];
      break;
    case Stage::train_diff:
      parts["captioning"] = captioning;
      parts["captioning"].erase("caption_at_inference");
      parts["encoder"] = cfg["encoder"];
      parts["ae"] = cfg["ae"];
      parts["diff"] = diff_train;
      parts["seed"] = cfg["seed"];
      break;
    case Stage::infer:
      parts["captioning"] = captioning;
      parts["encoder"] = cfg["encoder"];
      parts["ae"] = cfg["ae"];
      parts["diff"] = cfg["diff"];
      parts["segmentation"] = cfg["segmentation"];
      parts["seed"] = cfg["seed"];
      break;
    case Stage::eval:
    case Stage::report:
      parts["dataset"] = cfg["dataset"];
      parts["metrics"] = cfg["metrics"];
      break;
  }
  return sha1_hex(parts.dump());
}

std::vector<StageResult> Pipeline::run_all() {
  std::vector<StageResult> out;
  for (Stage s : all_stages()) out.push_back(run(s));
  return out;
}

StageResult Pipeline::run(Stage stage) {
  use_deterministic_cpu();
  const fs::path data = config_.dataset_root();
  const Artifact dataset{"dataset", data, Stage::synth};
  const Artifact captions{"captions", paths_.captions(), Stage::caption};
  const Artifact ae{"autoencoder checkpoint", paths_.ae(), Stage::train_ae};
  const Artifact denoiser{"denoiser checkpoint", paths_.denoiser(), Stage::train_diff};
  const Artifact maps{"anomaly maps", paths_.maps(), Stage::infer};
  const Artifact report{"evaluation report", paths_.eval_dir(), Stage::eval};

  std::vector<Artifact> inputs, outputs;
  switch (stage) {
    case Stage::synth:
      outputs = {dataset};
      break;
    case Stage::caption:
      inputs = {dataset};
      outputs = {captions};
      break;
    case Stage::train_ae:
      inputs = {dataset};
      outputs = {ae, {"autoencoder log", paths_.ae_log(), Stage::train_ae}};
      break;
    case Stage::train_diff:
      inputs = {dataset, ae};
      if (config_.diff.train_conditioning) inputs.push_back({"captions", paths_.captions(), Stage::caption, false});
      outputs = {denoiser, {"denoiser log", paths_.diff_log(), Stage::train_diff}};
      break;
    case Stage::infer:
      inputs = {dataset, ae, denoiser};
      if (config_.caption_at_inference()) inputs.push_back({"captions", paths_.captions(), Stage::caption, false});
      outputs = {{"inference outputs", paths_.infer_dir(), Stage::infer}};
      break;
    case Stage::eval:
      inputs = {dataset, maps};
      outputs = {report};
      break;
    case Stage::report:
      inputs = {dataset, report, {"inference outputs", paths_.infer_dir(), Stage::infer}};
      outputs = {{"report", paths_.report_dir(), Stage::report}};
      break;
  }
  for (const auto& a : inputs) require(a);

  fs::create_directories(paths_.root);
  fs::create_directories(paths_.stamps());
  const std::string hash = stage_hash(stage);
  json in_hashes = hashes(inputs);
  // The caption cache is shared and grows; stages depend only on the captions they read.
  if (stage == Stage::train_diff && config_.diff.train_conditioning) {
    in_hashes["train_captions"] = caption_digest(Split::train, config_.prompts().train_prompt);
  }
  if (stage == Stage::infer && config_.caption_at_inference()) {
    in_hashes["test_captions"] = caption_digest(Split::test, *config_.prompts().inference_prompt);
  }
  const fs::path stamp_path = paths_.stamps() / (to_string(stage) + ".json");

  const auto log = [&](const StageResult& r, const json& out_hashes, double seconds) {
    json line = {{"time", utc_now()},
                 {"stage", to_string(stage)},
                 {"status", r.up_to_date ? "up-to-date" : "done"},
                 {"config_hash", config_hash(config_)},
                 {"stage_hash", hash},
                 {"seed", config_.seed},
                 {"stage_seed", stage_seed(config_.seed, stage)},
                 {"inputs", in_hashes},
                 {"outputs", out_hashes},
                 {"seconds", seconds},
                 {"summary", r.summary}};
    append_line(paths_.run_log(), line.dump());
  };

  if (fs::exists(stamp_path)) {
    try {
      const json stamp = json::parse(read_file(stamp_path));
      if (stamp.at("stage_hash") == hash && stamp.at("inputs") == in_hashes && stamp.at("outputs") == hashes(outputs)) {
        StageResult r{stage, true, stamp.value("summary", std::string())};
        log(r, stamp.at("outputs"), 0.0);
        message(to_string(stage) + ": up to date");
        return r;
      }
    } catch (const json::exception&) {
      // unreadable stamp: redo the stage
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  StageResult r;
  switch (stage) {
    case Stage::synth: r = run_synth(); break;
    case Stage::caption: r = run_caption(); break;
    case Stage::train_ae: r = run_train_ae(); break;
    case Stage::train_diff: r = run_train_diff(); break;
    case Stage::infer: r = run_infer(); break;
    case Stage::eval: r = run_eval(); break;
    case Stage::report: r = run_report(); break;
  }
  r.stage = stage;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const json out_hashes = hashes(outputs);
  json stamp = {{"stage_hash", hash}, {"inputs", in_hashes}, {"outputs", out_hashes}, {"summary", r.summary}};
  write_file_atomic(stamp_path, stamp.dump(2));
  log(r, out_hashes, seconds);
  message(to_string(stage) + ": " + r.summary);
  return r;
}

// ---------------------------------------------------------------------------

std::string Pipeline::caption_digest(Split split, const std::string& prompt) const {
  const auto index = open_dataset(config_);
  const CaptionCache cache(paths_.captions());
  const std::string model_id = make_caption_provider(config_.captioner, index)->model_id();
  std::string listing;
  for (auto id : index.ids(split)) {
    const auto& rec = index.records[id];
    const auto hit = cache.find(rec.key, prompt, model_id);
    if (!hit) throw Error(ErrorKind::missing_artifact, "caption for " + rec.key + " not found; run caption");
    listing += rec.key + "\t" + hit->caption + "\n";
  }
  return sha1_hex(listing);
}

StageResult Pipeline::run_synth() {
  if (config_.dataset.source == "folder") {
    const auto index = open_dataset(config_);
    return {Stage::synth, false, "folder dataset with " + std::to_string(index.records.size()) + " images"};
  }
  SynthOptions opts = config_.dataset.synth;
  opts.resolution = config_.dataset.resolution;
  opts.seed = stage_seed(config_.seed, Stage::synth);
  const fs::path root = config_.dataset_root();
  if (fs::exists(root)) fs::remove_all(root);
  const auto index = synthesize_shapes_dataset(opts, root);
  return {Stage::synth, false,
          "synthesized " + std::to_string(index.records.size()) + " images in " +
              std::to_string(index.categories.size()) + " categories"};
}

StageResult Pipeline::run_caption() {
  const auto index = open_dataset(config_);
  auto provider = make_caption_provider(config_.captioner, index);
  CaptionCache cache(paths_.captions());
  const auto stats = caption_dataset(index, config_.prompts(), *provider, cache, config_.captioner.concurrency,
                                     config_.captioner.max_chars);
  if (!stats.failures.empty()) {
    throw Error(ErrorKind::provider, std::to_string(stats.failures.size()) + " images could not be captioned (first: " +
                                         stats.failures.front() + "); rerun caption to retry");
  }
  return {Stage::caption, false,
          std::to_string(stats.hits) + " cached, " + std::to_string(stats.misses) + " new captions"};
}

StageResult Pipeline::run_train_ae() {
  const auto index = open_dataset(config_);
  AeTrainOptions opts;
  opts.seed = stage_seed(config_.seed, Stage::train_ae);
  opts.config_hash = stage_hash(Stage::train_ae);
  fs::path partial = paths_.ae();
  partial += ".partial";
  opts.checkpoint_path = partial;
  opts.on_epoch = [&](const AeLogEntry& e) {
    if (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == config_.ae.epochs) {
      message("train_ae: epoch " + std::to_string(e.epoch) + " recon " + csv_number(e.recon));
    }
  };
  std::vector<AeLogEntry> log;
  const auto model = train_autoencoder(index, config_.ae, opts, &log);
  fs::rename(partial, paths_.ae());

  std::string csv = "epoch,recon,kl,total,adv\n";
  for (const auto& e : log) {
    csv += std::to_string(e.epoch) + "," + csv_number(e.recon) + "," + csv_number(e.kl) + "," + csv_number(e.total) +
           "," + csv_number(e.adv) + "\n";
  }
  write_file_atomic(paths_.ae_log(), csv);

  const auto images = load_split_tensor(index, Split::train);
  const double p = psnr(model.decode(model.encode(images)), images);
  return {Stage::train_ae, false,
          std::string(config_.ae.finetuned ? "finetuned" : "generic") + " autoencoder, train PSNR " + csv_number(p) +
              " dB"};
}

namespace {

ConditionVector caption_condition(const TextEncoder& encoder, const CaptionCache& cache, const ImageRecord& rec,
                                  const std::string& prompt, const std::string& model_id) {
  auto hit = cache.find(rec.key, prompt, model_id);
  if (!hit) {
    throw Error(ErrorKind::missing_artifact, "caption for " + rec.key + " not found; run caption");
  }
  return encoder.encode(hit->caption);
}

}  // namespace

StageResult Pipeline::run_train_diff() {
  const auto index = open_dataset(config_);
  const auto ae = ImageAutoencoder::load(paths_.ae(), stage_hash(Stage::train_ae));
  const auto encoder = make_text_encoder(config_.encoder);

  const auto train_ids = index.ids(Split::train);
  const auto images = load_split_tensor(index, Split::train);
  torch::Tensor latents;
  {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < images.size(0); i += 16) {
      parts.push_back(ae.encode(images.slice(0, i, std::min<int64_t>(i + 16, images.size(0)))));
    }
    latents = torch::cat(parts);
  }

  std::vector<ConditionVector> conds;
  const ConditionVector null_cond = encoder->null_condition();
  if (config_.diff.train_conditioning) {
    const CaptionCache cache(paths_.captions());
    const auto provider = make_caption_provider(config_.captioner, index);
    const std::string prompt = config_.prompts().train_prompt;
    for (auto id : train_ids) conds.push_back(caption_condition(*encoder, cache, index.records[id], prompt, provider->model_id()));
  } else {
    conds.assign(train_ids.size(), null_cond);
  }

  DiffTrainOptions opts;
  opts.seed = stage_seed(config_.seed, Stage::train_diff);
  opts.config_hash = stage_hash(Stage::train_diff);
  fs::path partial = paths_.denoiser();
  partial += ".partial";
  opts.checkpoint_path = partial;
  opts.log_every = std::max(1, config_.diff.train_steps / 20);
  opts.on_step = [&](const DiffLogEntry& e) {
    message("train_diff: step " + std::to_string(e.step) + " loss " + csv_number(e.loss));
  };
  std::vector<DiffLogEntry> log;
  train_denoiser(latents, stack_conditions(conds), condition_to_tensor(null_cond), config_.diff, opts, &log);
  fs::rename(partial, paths_.denoiser());

  std::string csv = "step,loss,conditioned\n";
  for (const auto& e : log) csv += std::to_string(e.step) + "," + csv_number(e.loss) + "," + std::to_string(e.conditioned) + "\n";
  write_file_atomic(paths_.diff_log(), csv);

  const std::size_t w = std::min<std::size_t>(50, log.size());
  return {Stage::train_diff, false,
          std::string(config_.diff.train_conditioning ? "conditioned" : "unconditioned") + " denoiser, loss " +
              csv_number(smoothed_loss(log, 0, w)) + " -> " + csv_number(smoothed_loss(log, log.size() - w, w))};
}

StageResult Pipeline::run_infer() {
  const auto index = open_dataset(config_);
  const auto ae = ImageAutoencoder::load(paths_.ae(), stage_hash(Stage::train_ae));
  const auto denoiser = LatentDenoiser::load(paths_.denoiser(), stage_hash(Stage::train_diff));
  const auto encoder = make_text_encoder(config_.encoder);
  const auto extractor = make_feature_extractor(config_.segmentation.extractor);
  const bool use_caption = config_.caption_at_inference();

  // Maps already written under the same stage hash are kept; anything else starts over.
  const std::string hash = stage_hash(Stage::infer);
  const fs::path marker = paths_.infer_dir() / "stage_hash";
  if (fs::exists(paths_.infer_dir()) && (!fs::exists(marker) || read_file(marker) != hash)) {
    fs::remove_all(paths_.infer_dir());
  }
  fs::create_directories(paths_.infer_dir());
  write_file_atomic(marker, hash);

  std::optional<CaptionCache> cache;
  std::string model_id, prompt;
  if (use_caption) {
    cache.emplace(paths_.captions());
    model_id = make_caption_provider(config_.captioner, index)->model_id();
    prompt = *config_.prompts().inference_prompt;
  }
  const ConditionVector null_cond = encoder->null_condition();
  const std::uint64_t seed = stage_seed(config_.seed, Stage::infer);

  std::string conditions = "image\tsource\n";
  std::size_t done = 0, reused = 0;
  for (auto id : index.ids(Split::test)) {
    const ImageRecord& rec = index.records[id];
    const std::string source = use_caption ? "caption" : "null";
    conditions += rec.key + "\t" + source + "\n";
    append_line(paths_.run_log(),
                json{{"time", utc_now()}, {"stage", "infer"}, {"event", "condition"}, {"image", rec.key}, {"source", source}}
                    .dump());

    const fs::path map_bin = anomaly_map_path(paths_.maps(), rec);
    if (fs::exists(map_bin)) {
      ++reused;
      continue;
    }
    const Image image = load_record_image(index, id);
    const ConditionVector cond = use_caption ? caption_condition(*encoder, *cache, rec, prompt, model_id) : null_cond;
    const Image rec_img =
        reconstruct(image, ae, denoiser, cond, config_.diff.t_start_frac, config_.diff.steps, derive_seed(seed, rec.key));
    AnomalyMap map = anomaly_map(extractor->extract(image), extractor->extract(rec_img), config_.dataset.resolution,
                                 config_.segmentation.map);
    map.input_id = rec.key;
    map.reconstruction_id = rec.key + "#recon";

    save_image_png(paths_.recon() / rec.category / rec.defect / (rec.stem() + "_recon.png"), rec_img);
    write_anomaly_png(paths_.maps() / rec.category / rec.defect / (rec.stem() + "_amap.png"), map);
    write_anomaly_map(map_bin, map);  // last: its presence marks the image as finished
    ++done;
  }
  write_file_atomic(paths_.conditions(), conditions);
  return {Stage::infer, false,
          std::to_string(done) + " maps written, " + std::to_string(reused) + " reused; inference condition " +
              (use_caption ? "caption" : "null")};
}

StageResult Pipeline::run_eval() {
  const auto index = open_dataset(config_);
  const auto report = evaluate(index, paths_.maps(), config_.metrics);
  fs::create_directories(paths_.eval_dir());
  write_file_atomic(paths_.report_txt(), format_report(report));
  write_file_atomic(paths_.curves_csv(), format_curves_csv(report));

  std::string scores = "image,label,image_score\n";
  for (auto id : index.ids(Split::test)) {
    const auto& rec = index.records[id];
    const auto map = read_anomaly_map(anomaly_map_path(paths_.maps(), rec));
    scores += rec.key + "," + (rec.anomalous() ? "1" : "0") + "," + csv_number(map.image_score) + "\n";
  }
  write_file_atomic(paths_.eval_dir() / "image_scores.csv", scores);
  return {Stage::eval, false,
          "roc_i " + csv_number(report.roc_i) + ", roc_p " + csv_number(report.roc_p) + ", pro " + csv_number(report.pro)};
}

StageResult Pipeline::run_report() {
  const auto index = open_dataset(config_);
  if (!fs::exists(paths_.report_txt())) {
    throw Error(ErrorKind::missing_artifact, "evaluation report not found; run eval (missing " +
                                                 paths_.report_txt().string() + ")");
  }
  const fs::path out = paths_.report_dir();
  if (fs::exists(out)) fs::remove_all(out);
  fs::create_directories(out);
  fs::copy_file(paths_.report_txt(), out / "report.txt");
  fs::copy_file(paths_.curves_csv(), out / "curves.csv");

  // input | reconstruction | anomaly map | mask, 2 px white gutters.
  const int H = config_.dataset.resolution.height, W = config_.dataset.resolution.width, gap = 2;
  const int sheet_w = 4 * W + 3 * gap;
  std::size_t sheets = 0;
  for (auto id : index.ids(Split::test)) {
    const auto& rec = index.records[id];
    const fs::path recon_path = paths_.recon() / rec.category / rec.defect / (rec.stem() + "_recon.png");
    const fs::path map_path = anomaly_map_path(paths_.maps(), rec);
    if (!fs::exists(recon_path) || !fs::exists(map_path)) {
      throw Error(ErrorKind::missing_artifact, "inference outputs for " + rec.key + " not found; run infer");
    }
    const auto input = to_rgb8(load_record_image(index, id));
    const auto recon = to_rgb8(load_image(recon_path, config_.dataset.resolution));
    const auto map = read_anomaly_map(map_path);
    const auto mask = load_record_mask(index, id);
    const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
    const float range = *hi - *lo;

    std::vector<std::uint8_t> sheet(static_cast<std::size_t>(H) * sheet_w * 3, 255);
    auto put = [&](int panel, int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
      const auto o = (static_cast<std::size_t>(y) * sheet_w + panel * (W + gap) + x) * 3;
      sheet[o] = r;
      sheet[o + 1] = g;
      sheet[o + 2] = b;
    };
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const auto p = (static_cast<std::size_t>(y) * W + x);
        put(0, y, x, input[p * 3], input[p * 3 + 1], input[p * 3 + 2]);
        put(1, y, x, recon[p * 3], recon[p * 3 + 1], recon[p * 3 + 2]);
        const auto v = range > 0 ? to_u8((map.scores[p] - *lo) / range) : std::uint8_t{0};
        put(2, y, x, v, v, v);
        const std::uint8_t m = mask.data[p] ? 255 : 0;
        put(3, y, x, m, m, m);
      }
    }
    save_rgb8_png(out / "sheets" / rec.category / rec.defect / (rec.stem() + ".png"), H, sheet_w, sheet);
    ++sheets;
  }
  return {Stage::report, false, std::to_string(sheets) + " contact sheets"};
}

}  // namespace vlmdiff
