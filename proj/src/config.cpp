// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/config.hpp"

#include <json.hpp>

#include <bit>

#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(ConditionSource source) {
  switch (source) {
    case ConditionSource::auto_mode: return "auto";
    case ConditionSource::caption: return "caption";
    case ConditionSource::null: return "null";
  }
  return "auto";
}

namespace {

// Value conversions shared by reader and writer.

template <class T>
void get_value(const json& j, T& out) {
  out = j.get<T>();
}
void get_value(const json& j, fs::path& out) { out = j.get<std::string>(); }
void get_value(const json& j, Resolution& out) {
  if (j.is_number_integer()) {
    out.height = out.width = j.get<int>();
  } else {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 2) throw user_error("resolution must be an integer or [height, width]");
    out.height = v[0];
    out.width = v[1];
  }
}
void get_value(const json& j, UpsampleMode& out) {
  const auto s = j.get<std::string>();
  if (s == "features") out = UpsampleMode::features;
  else if (s == "scores") out = UpsampleMode::scores;
  else throw user_error("expected features or scores, got '" + s + "'");
}
void get_value(const json& j, PromptMode& out) { out = parse_prompt_mode(j.get<std::string>()); }
void get_value(const json& j, ConditionSource& out) {
  const auto s = j.get<std::string>();
  if (s == "auto") out = ConditionSource::auto_mode;
  else if (s == "caption") out = ConditionSource::caption;
  else if (s == "null") out = ConditionSource::null;
  else throw user_error("expected auto, caption or null, got '" + s + "'");
}

template <class T>
json put_value(const T& v) {
  return json(v);
}
json put_value(const fs::path& v) { return v.generic_string(); }
json put_value(const Resolution& v) { return json::array({v.height, v.width}); }
json put_value(const UpsampleMode& v) { return v == UpsampleMode::features ? "features" : "scores"; }
json put_value(const PromptMode& v) { return to_string(v); }
json put_value(const ConditionSource& v) { return to_string(v); }

struct Reader {
  const json* node;
  std::string prefix;

  template <class T>
  void operator()(const char* key, T& value) {
    auto it = node->find(key);
    if (it == node->end()) return;
    try {
      get_value(*it, value);
    } catch (const json::exception&) {
      throw user_error("config key '" + prefix + key + "' has the wrong type");
    } catch (const Error& e) {
      throw user_error("config key '" + prefix + key + "': " + e.what());
    }
  }

  template <class F>
  void sub(const char* key, F&& visit_child) {
    static const json kEmpty = json::object();
    auto it = node->find(key);
    const json* child = it == node->end() ? &kEmpty : &*it;
    if (!child->is_object()) throw user_error("config key '" + prefix + key + "' must be an object");
    Reader r{child, prefix + key + "."};
    visit_child(r);
  }
};

struct Writer {
  json* node;

  template <class T>
  void operator()(const char* key, const T& value) {
    (*node)[key] = put_value(value);
  }

  template <class F>
  void sub(const char* key, F&& visit_child) {
    json& child = (*node)[key] = json::object();
    Writer w{&child};
    visit_child(w);
  }
};

// One field list per section; `c` may be const (writer) or not (reader).

template <class V, class C>
void visit_synth(V& v, C& c) {
  v("n_train", c.n_train);
  v("n_test_normal", c.n_test_normal);
  v("n_test_anomalous", c.n_test_anomalous);
  v("categories", c.categories);
  v("min_defect_frac", c.min_defect_frac);
  v("max_defect_frac", c.max_defect_frac);
}

template <class V, class C>
void visit_dataset(V& v, C& c) {
  v("source", c.source);
  v("root", c.root);
  v("resolution", c.resolution);
  v.sub("synth", [&](auto& s) { visit_synth(s, c.synth); });
}

template <class V, class C>
void visit_captioner(V& v, C& c) {
  v("provider", c.provider);
  v("endpoint", c.endpoint);
  v("model", c.model);
  v("token_env", c.token_env);
  v("command", c.command);
  v("timeout_s", c.timeout_s);
  v("concurrency", c.concurrency);
  v("max_chars", c.max_chars);
}

template <class V, class C>
void visit_encoder(V& v, C& c) {
  v("backend", c.backend);
  v("dim", c.dim);
  v("slots", c.slots);
  v("model_path", c.model_path);
}

template <class V, class C>
void visit_ae(V& v, C& c) {
  v("factor", c.factor);
  v("latent_dim", c.latent_dim);
  v("base_channels", c.base_channels);
  v("channel_mult", c.channel_mult);
  v("kl_weight", c.kl_weight);
  v("lr", c.lr);
  v("epochs", c.epochs);
  v("batch", c.batch);
  v("save_every", c.save_every);
  v("recon_loss", c.recon_loss);
  v("finetuned", c.finetuned);
  v("generic_images", c.generic_images);
  v("adversarial", c.adversarial);
  v("adv_weight", c.adv_weight);
  v("adv_start_epoch", c.adv_start_epoch);
}

template <class V, class C>
void visit_unet(V& v, C& c) {
  v("base_channels", c.base_channels);
  v("channel_mult", c.channel_mult);
  v("num_res_blocks", c.num_res_blocks);
  v("heads", c.heads);
  v("attention", c.attention);
}

template <class V, class C>
void visit_run(V& v, C& c) {
  v("mode", c.mode);
  v("seed", c.seed);
  v("output_dir", c.output_dir);
  v.sub("dataset", [&](auto& s) { visit_dataset(s, c.dataset); });
  v.sub("captioner", [&](auto& s) { visit_captioner(s, c.captioner); });
  v.sub("encoder", [&](auto& s) { visit_encoder(s, c.encoder); });
  v.sub("ae", [&](auto& s) { visit_ae(s, c.ae); });
  v.sub("diff", [&](auto& s) {
    s("T", c.diff.T);
    s("beta_start", c.diff.beta_start);
    s("beta_end", c.diff.beta_end);
    s("steps", c.diff.steps);
    s("t_start_frac", c.diff.t_start_frac);
    s("lr", c.diff.lr);
    s("batch", c.diff.batch);
    s("train_steps", c.diff.train_steps);
    s("caption_drop_prob", c.diff.caption_drop_prob);
    s("train_conditioning", c.diff.train_conditioning);
    s("scale_latents", c.diff.scale_latents);
    s("inference_conditioning", c.inference_conditioning);
    s("grad_clip", c.diff.grad_clip);
    s("save_every", c.diff.save_every);
    s.sub("unet", [&](auto& u) { visit_unet(u, c.diff.unet); });
  });
  v.sub("segmentation", [&](auto& s) {
    s.sub("extractor", [&](auto& e) {
      e("backend", c.segmentation.extractor.backend);
      e("patch", c.segmentation.extractor.patch);
      e("channels", c.segmentation.extractor.channels);
      e("seed", c.segmentation.extractor.seed);
      e("model_path", c.segmentation.extractor.model_path);
      e("input_size", c.segmentation.extractor.input_size);
    });
    s("upsample", c.segmentation.map.upsample);
    s("sigma", c.segmentation.map.sigma);
    s("image_score", c.segmentation.map.image_score);
    s("topk", c.segmentation.map.topk);
  });
  v.sub("metrics", [&](auto& s) {
    s("fpr_limit", c.metrics.fpr_limit);
    s("n_thresholds", c.metrics.n_thresholds);
  });
}

json to_json(const RunConfig& c) {
  json j = json::object();
  Writer w{&j};
  visit_run(w, c);
  return j;
}

void check_known_keys(const json& given, const json& schema, const std::string& prefix) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    auto s = schema.find(it.key());
    if (s == schema.end()) throw user_error("unknown config key '" + prefix + it.key() + "'");
    if (s->is_object()) {
      if (!it->is_object()) throw user_error("config key '" + prefix + it.key() + "' must be an object");
      check_known_keys(*it, *s, prefix + it.key() + ".");
    }
  }
}

/// Sets a dotted key. Values parse as JSON, except that string-typed keys take the raw text.
void apply_override(json& doc, const json& schema, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw user_error("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare strings need no quotes
  }
  json* node = &doc;
  const json* expected = &schema;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw user_error("malformed override key '" + key + "'");
    if (!node->is_object()) throw user_error("override key '" + key + "' descends into a non-object");
    expected = expected && expected->is_object() && expected->contains(part) ? &(*expected)[part] : nullptr;
    if (dot == std::string::npos) {
      (*node)[part] = expected && expected->is_string() ? json(raw) : value;
      break;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal();
}

}  // namespace

fs::path RunConfig::dataset_root() const {
  if (!dataset.root.empty()) return dataset.root;
  return output_dir / "data";
}

bool RunConfig::caption_at_inference() const {
  switch (inference_conditioning) {
    case ConditionSource::caption: return true;
    case ConditionSource::null: return false;
    case ConditionSource::auto_mode: break;
  }
  return mode == PromptMode::natural;
}

PromptConfig RunConfig::prompts() const {
  PromptConfig p = PromptConfig::for_mode(mode);
  if (!caption_at_inference()) p.inference_prompt.reset();
  else if (!p.inference_prompt) p.inference_prompt = p.train_prompt;
  return p;
}

void RunConfig::validate() const {
  if (dataset.source != "synthetic" && dataset.source != "folder") {
    throw user_error("dataset.source must be synthetic or folder");
  }
  if (dataset.source == "folder" && dataset.root.empty()) throw user_error("dataset.root is required for folder datasets");
  if (dataset.resolution.height < 1 || dataset.resolution.width < 1) throw user_error("dataset.resolution must be positive");
  if (dataset.source == "synthetic") {
    SynthOptions s = dataset.synth;
    s.resolution = dataset.resolution;
    s.validate();
  }

  if (captioner.provider != "stub" && captioner.provider != "http" && captioner.provider != "command") {
    throw user_error("captioner.provider must be stub, http or command");
  }
  if (captioner.provider == "http" && captioner.endpoint.empty()) throw user_error("captioner.endpoint is required for http");
  if (captioner.provider == "command" && captioner.command.empty()) {
    throw user_error("captioner.command is required for the command provider");
  }
  if (captioner.concurrency < 1 || captioner.timeout_s < 1 || captioner.max_chars < 1) {
    throw user_error("captioner.concurrency, timeout_s and max_chars must be >= 1");
  }

  if (encoder.backend != "hash" && encoder.backend != "torchscript") throw user_error("encoder.backend must be hash or torchscript");
  if (encoder.backend == "torchscript" && encoder.model_path.empty()) throw user_error("encoder.model_path is required");
  if (encoder.dim < 1 || encoder.slots < 1) throw user_error("encoder.dim and encoder.slots must be >= 1");

  ae.validate();
  diff.validate();
  if (diff.unet.latent_channels != ae.latent_dim) throw user_error("denoiser latent channels must equal ae.latent_dim");
  if (diff.unet.context_dim != encoder.dim) throw user_error("denoiser context width must equal encoder.dim");
  if (dataset.resolution.height % ae.factor != 0 || dataset.resolution.width % ae.factor != 0) {
    throw user_error("dataset.resolution must be divisible by ae.factor");
  }
  const int down = 1 << (static_cast<int>(diff.unet.channel_mult.size()) - 1);
  if ((dataset.resolution.height / ae.factor) % down != 0 || (dataset.resolution.width / ae.factor) % down != 0) {
    throw user_error("latent size must be divisible by 2^(len(diff.unet.channel_mult)-1)");
  }

  const auto& ex = segmentation.extractor;
  if (ex.backend == "conv_stub") {
    if (ex.patch < 1 || ex.channels < 1) throw user_error("segmentation.extractor.patch and channels must be >= 1");
    if (dataset.resolution.height % ex.patch != 0 || dataset.resolution.width % ex.patch != 0) {
      throw user_error("dataset.resolution must be divisible by segmentation.extractor.patch");
    }
  } else if (ex.backend == "dino" || ex.backend == "resnet" || ex.backend == "torchscript") {
    if (ex.model_path.empty()) throw user_error("segmentation.extractor.model_path is required for " + ex.backend);
  } else {
    throw user_error("unknown segmentation.extractor.backend '" + ex.backend + "'");
  }
  if (segmentation.map.sigma < 0) throw user_error("segmentation.sigma must be >= 0");
  if (segmentation.map.image_score != "max" && segmentation.map.image_score != "topk_mean") {
    throw user_error("segmentation.image_score must be max or topk_mean");
  }
  if (segmentation.map.topk < 1) throw user_error("segmentation.topk must be >= 1");

  if (!(metrics.fpr_limit > 0 && metrics.fpr_limit <= 1)) throw user_error("metrics.fpr_limit must lie in (0,1]");
  if (metrics.n_thresholds < 0) throw user_error("metrics.n_thresholds must be >= 0");
  if (output_dir.empty()) throw user_error("output_dir must be set");
}

RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides,
                           const fs::path& base_dir) {
  json doc = json::object();
  if (!json_text.empty()) {
    try {
      doc = json::parse(json_text, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw user_error(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (!doc.is_object()) throw user_error("config must be a JSON object");
  RunConfig cfg;
  const json schema = to_json(cfg);
  for (const auto& o : overrides) apply_override(doc, schema, o);
  check_known_keys(doc, schema, "");
  Reader r{&doc, ""};
  visit_run(r, cfg);

  cfg.diff.unet.latent_channels = cfg.ae.latent_dim;
  cfg.diff.unet.context_dim = cfg.encoder.dim;
  cfg.encoder.max_chars = cfg.captioner.max_chars;
  cfg.dataset.synth.resolution = cfg.dataset.resolution;
  cfg.output_dir = resolve(cfg.output_dir, base_dir);
  cfg.dataset.root = resolve(cfg.dataset.root, base_dir);
  if (!cfg.encoder.model_path.empty()) cfg.encoder.model_path = resolve(cfg.encoder.model_path, base_dir).string();
  if (!cfg.segmentation.extractor.model_path.empty()) {
    cfg.segmentation.extractor.model_path = resolve(cfg.segmentation.extractor.model_path, base_dir).string();
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  if (!fs::is_regular_file(path)) throw user_error("config file not found: " + path.string());
  return parse_run_config(read_file(path), overrides, fs::absolute(path).parent_path());
}

std::string config_json(const RunConfig& config) { return to_json(config).dump(); }

std::string sections_json(const RunConfig& config, const std::vector<std::string>& sections) {
  const json all = to_json(config);
  json out = json::object();
  for (const auto& s : sections) {
    auto it = all.find(s);
    if (it == all.end()) throw Error(ErrorKind::internal, "no config section '" + s + "'");
    out[s] = *it;
  }
  return out.dump();
}

std::string config_hash(const RunConfig& config) { return sha1_hex(config_json(config)); }

std::string sections_hash(const RunConfig& config, const std::vector<std::string>& sections) {
  return sha1_hex(sections_json(config, sections));
}

}  // namespace vlmdiff
