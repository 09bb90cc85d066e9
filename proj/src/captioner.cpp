// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/captioner.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <thread>

#include "vlmdiff/hash.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;
using json = nlohmann::json;

PromptMode parse_prompt_mode(std::string_view s) {
  if (s == "industrial") return PromptMode::industrial;
  if (s == "natural") return PromptMode::natural;
  throw user_error("unknown mode '" + std::string(s) + "' (expected industrial or natural)");
}

std::string to_string(PromptMode mode) { return mode == PromptMode::industrial ? "industrial" : "natural"; }

PromptConfig PromptConfig::for_mode(PromptMode mode) {
  PromptConfig p;
  p.mode = mode;
  if (mode == PromptMode::industrial) {
    p.train_prompt = std::string(kIndustrialPrompt);
  } else {
    p.train_prompt = std::string(kNaturalPrompt);
    p.inference_prompt = std::string(kNaturalPrompt);
  }
  return p;
}

namespace {

std::string trim(std::string_view s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  auto b = std::find_if_not(s.begin(), s.end(), is_space);
  auto e = std::find_if_not(s.rbegin(), std::string_view::reverse_iterator(b), is_space).base();
  return std::string(b, e);
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string base64(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string shell_quote(std::string_view s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out.push_back(c);
  }
  out.push_back('\'');
  return out;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

}  // namespace

std::string truncate_utf8(std::string_view text, std::size_t max_chars) {
  if (text.size() <= max_chars) return std::string(text);
  std::size_t cut = max_chars;
  // Back off continuation bytes so the cut lands on a code point boundary.
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return std::string(text.substr(0, cut));
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

StubCaptionProvider::StubCaptionProvider(std::optional<SynthManifest> manifest, Resolution resolution)
    : manifest_(std::move(manifest)), resolution_(resolution) {}

std::string StubCaptionProvider::describe(const ImageRecord& record, std::string_view /*prompt*/) {
  if (manifest_) {
    if (const SynthEntry* e = manifest_->find(record.key)) {
      return "a " + e->shape + " of color " + e->color + " on plain background";
    }
  }
  struct Named {
    const char* name;
    float r, g, b;
  };
  static constexpr std::array kNames{
      Named{"red", 0.85f, 0.2f, 0.2f},  Named{"green", 0.2f, 0.7f, 0.25f}, Named{"blue", 0.2f, 0.3f, 0.85f},
      Named{"yellow", 0.9f, 0.85f, 0.2f}, Named{"orange", 0.95f, 0.55f, 0.1f}, Named{"purple", 0.6f, 0.25f, 0.7f},
      Named{"cyan", 0.15f, 0.75f, 0.8f}, Named{"white", 0.95f, 0.95f, 0.95f}, Named{"black", 0.05f, 0.05f, 0.05f},
      Named{"gray", 0.5f, 0.5f, 0.5f}};
  Image img;
  try {
    img = load_image(record.path, resolution_);
  } catch (const Error& e) {
    throw ProviderError(record.key, e.what());
  }
  double mean[3] = {0, 0, 0};
  int n = 0;
  for (int y = img.height / 4; y < 3 * img.height / 4; ++y) {
    for (int x = img.width / 4; x < 3 * img.width / 4; ++x, ++n) {
      for (int c = 0; c < 3; ++c) mean[c] += img.at(y, x, c);
    }
  }
  for (double& m : mean) m /= std::max(n, 1);
  const Named* best = &kNames[0];
  double best_d = 1e9;
  for (const auto& c : kNames) {
    const double d = (mean[0] - c.r) * (mean[0] - c.r) + (mean[1] - c.g) * (mean[1] - c.g) +
                     (mean[2] - c.b) * (mean[2] - c.b);
    if (d < best_d) best_d = d, best = &c;
  }
  return std::string("an object of color ") + best->name + " on plain background";
}

HttpCaptionProvider::HttpCaptionProvider(Options options) : options_(std::move(options)) {
  const auto& url = options_.url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw user_error("caption endpoint must be an http(s) URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
}

std::string HttpCaptionProvider::describe(const ImageRecord& record, std::string_view prompt) {
  std::string bytes;
  try {
    bytes = read_file(record.path);
  } catch (const Error& e) {
    throw ProviderError(record.key, e.what());
  }
  json body = {{"model", options_.model},
               {"prompt", std::string(prompt)},
               {"image_name", record.path.filename().string()},
               {"image_base64", base64(bytes)}};

  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  client.set_write_timeout(options_.timeout);
  httplib::Headers headers;
  if (!options_.token.empty()) headers.emplace("Authorization", "Bearer " + options_.token);

  auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw ProviderError(record.key, "request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw ProviderError(record.key, "HTTP status " + std::to_string(res->status));

  const std::string content_type = res->get_header_value("Content-Type");
  if (content_type.find("json") != std::string::npos) {
    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) throw ProviderError(record.key, "malformed JSON reply");
    for (const char* key : {"caption", "text", "response"}) {
      if (reply.contains(key) && reply[key].is_string()) return reply[key].get<std::string>();
    }
    throw ProviderError(record.key, "JSON reply has no caption/text/response field");
  }
  return res->body;
}

CommandCaptionProvider::CommandCaptionProvider(std::string command_template, std::string model_id)
    : template_(std::move(command_template)), model_id_(std::move(model_id)) {
  if (template_.find("{image}") == std::string::npos) {
    throw user_error("caption command template must contain {image}");
  }
}

std::string CommandCaptionProvider::describe(const ImageRecord& record, std::string_view prompt) {
  std::string cmd = template_;
  replace_all(cmd, "{image}", shell_quote(record.path.string()));
  replace_all(cmd, "{prompt}", shell_quote(prompt));
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) throw ProviderError(record.key, "cannot start caption command");
  std::string out;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  if (status != 0) throw ProviderError(record.key, "caption command exited with status " + std::to_string(status));
  return out;
}

std::unique_ptr<CaptionProvider> make_caption_provider(const CaptionerConfig& config, const DatasetIndex& index) {
  if (config.provider == "stub") {
    return std::make_unique<StubCaptionProvider>(read_synthetic_manifest(index.root), index.resolution);
  }
  if (config.provider == "http") {
    if (config.endpoint.empty()) throw user_error("captioner.endpoint is required for the http provider");
    HttpCaptionProvider::Options o;
    o.url = config.endpoint;
    o.model = config.model;
    o.timeout = std::chrono::seconds(config.timeout_s);
    if (const char* token = std::getenv(config.token_env.c_str())) o.token = token;
    return std::make_unique<HttpCaptionProvider>(std::move(o));
  }
  if (config.provider == "command") {
    return std::make_unique<CommandCaptionProvider>(config.command, config.model);
  }
  throw user_error("unknown caption provider '" + config.provider + "' (expected stub, http or command)");
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

std::string serialize_caption_record(const CaptionRecord& r) {
  json j = {{"image_path", r.image_path},
            {"prompt", r.prompt},
            {"caption", r.caption},
            {"model_id", r.model_id},
            {"created_at", r.created_at}};
  return j.dump();
}

CaptionRecord parse_caption_record(std::string_view line) {
  json j = json::parse(line);
  CaptionRecord r;
  r.image_path = j.at("image_path").get<std::string>();
  r.prompt = j.at("prompt").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.model_id = j.at("model_id").get<std::string>();
  r.created_at = j.at("created_at").get<std::string>();
  return r;
}

CaptionCache::CaptionCache(fs::path path) : path_(std::move(path)) {
  if (!fs::exists(path_)) return;
  std::ifstream in(path_);
  if (!in) throw io_error("cannot read caption cache " + path_.string());
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      CaptionRecord r = parse_caption_record(line);
      if (trim(r.caption).empty()) continue;
      Key key{r.image_path, r.prompt, r.model_id};
      records_.insert_or_assign(std::move(key), std::move(r));
    } catch (const json::exception&) {
      // A torn final line from an interrupted append; the record is simply re-fetched.
    }
  }
}

std::optional<CaptionRecord> CaptionCache::find(const std::string& image_path, const std::string& prompt,
                                                const std::string& model_id) const {
  std::lock_guard lock(mutex_);
  auto it = records_.find(Key{image_path, prompt, model_id});
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

void CaptionCache::append(const CaptionRecord& record) {
  std::lock_guard lock(mutex_);
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  {
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw io_error("cannot append to caption cache " + path_.string());
    out << serialize_caption_record(record) << '\n';
    out.flush();
    if (!out) throw io_error("write failed for caption cache " + path_.string());
  }
  records_.insert_or_assign(Key{record.image_path, record.prompt, record.model_id}, record);
}

std::size_t CaptionCache::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

// ---------------------------------------------------------------------------
// Lookup
// ---------------------------------------------------------------------------

namespace {

struct Lookup {
  CaptionRecord record;
  bool hit = false;
};

Lookup lookup_caption(const ImageRecord& record, std::string_view prompt, CaptionProvider& provider,
                      CaptionCache& cache, std::size_t max_chars) {
  const std::string model = provider.model_id();
  if (auto cached = cache.find(record.key, std::string(prompt), model)) return {std::move(*cached), true};

  std::string text;
  try {
    text = provider.describe(record, prompt);
  } catch (const ProviderError&) {
    throw;
  } catch (const std::exception& e) {
    throw ProviderError(record.key, e.what());
  }
  text = trim(text);
  if (text.empty()) throw ProviderError(record.key, "empty caption");

  CaptionRecord r;
  r.image_path = record.key;
  r.prompt = std::string(prompt);
  r.caption = truncate_utf8(text, max_chars);
  r.model_id = model;
  r.created_at = utc_timestamp();
  cache.append(r);
  return {std::move(r), false};
}

}  // namespace

CaptionRecord get_caption(const ImageRecord& record, std::string_view prompt, CaptionProvider& provider,
                          CaptionCache& cache, std::size_t max_chars) {
  return lookup_caption(record, prompt, provider, cache, max_chars).record;
}

CaptionStats caption_dataset(const DatasetIndex& index, const PromptConfig& prompts, CaptionProvider& provider,
                             CaptionCache& cache, int concurrency, std::size_t max_chars) {
  if (concurrency < 1) throw user_error("caption concurrency must be >= 1");

  struct Job {
    std::size_t id;
    std::string prompt;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < index.records.size(); ++i) {
    const auto& r = index.records[i];
    if (r.split == Split::train) jobs.push_back({i, prompts.train_prompt});
    else if (prompts.inference_prompt) jobs.push_back({i, *prompts.inference_prompt});
  }

  std::atomic<std::size_t> next{0}, hits{0}, misses{0};
  std::mutex failures_mutex;
  std::vector<std::pair<std::size_t, std::string>> failures;

  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const auto& rec = index.records[jobs[j].id];
      try {
        const Lookup l = lookup_caption(rec, jobs[j].prompt, provider, cache, max_chars);
        ++(l.hit ? hits : misses);
      } catch (const ProviderError&) {
        ++misses;
        std::lock_guard lock(failures_mutex);
        failures.emplace_back(j, rec.key);
      }
    }
  };

  const auto n_threads = static_cast<std::size_t>(std::min<std::size_t>(concurrency, std::max<std::size_t>(jobs.size(), 1)));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  std::sort(failures.begin(), failures.end());
  CaptionStats stats;
  stats.hits = hits;
  stats.misses = misses;
  for (auto& [_, key] : failures) stats.failures.push_back(std::move(key));
  return stats;
}

}  // namespace vlmdiff
