// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "common/doctest_torch.hpp"

#include <fstream>

#include "common/testing.hpp"
#include "vlmdiff/config.hpp"
#include "vlmdiff/error.hpp"

using namespace vlmdiff;

namespace {

std::string error_text(const std::string& json, const std::vector<std::string>& overrides = {}) {
  try {
    parse_run_config(json, overrides);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::user);
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults") {
  const auto c = parse_run_config("", {});
  CHECK(c.mode == PromptMode::industrial);
  CHECK(c.seed == 0);
  CHECK(c.diff.lr == 1e-5);
  CHECK(c.diff.batch == 12);
  CHECK(c.diff.T == 1000);
  CHECK(c.diff.t_start_frac == 0.5);
  CHECK(c.diff.caption_drop_prob == 0.1);
  CHECK(c.ae.kl_weight == 1e-6);
  CHECK(c.ae.finetuned);
  CHECK(c.metrics.fpr_limit == 0.3);
  CHECK(c.segmentation.map.sigma == 4.0);
  CHECK(c.segmentation.map.image_score == "max");
  CHECK(c.segmentation.map.upsample == UpsampleMode::features);
  CHECK(c.captioner.provider == "stub");
  CHECK(c.encoder.backend == "hash");
  CHECK(c.inference_conditioning == ConditionSource::auto_mode);
  CHECK(c.dataset_root() == std::filesystem::path("run") / "data");
}

TEST_CASE("document values and overrides") {
  const auto c = parse_run_config(R"({"seed": 5, "mode": "natural", "dataset": {"resolution": [64, 128]},
                                      "diff": {"T": 200, "unet": {"channel_mult": [1, 2]}}})",
                                  {"diff.T=300", "captioner.model=my-vlm", "ae.finetuned=false", "diff.unet.heads=2",
                                   "diff.inference_conditioning=caption"});
  CHECK(c.seed == 5);
  CHECK(c.mode == PromptMode::natural);
  CHECK(c.dataset.resolution == Resolution{64, 128});
  CHECK(c.diff.T == 300);
  CHECK(c.diff.unet.channel_mult == std::vector<int>{1, 2});
  CHECK(c.diff.unet.heads == 2);
  CHECK(c.captioner.model == "my-vlm");
  CHECK(!c.ae.finetuned);
  CHECK(c.inference_conditioning == ConditionSource::caption);
  CHECK(parse_run_config(R"({"dataset": {"resolution": 96}})", {}).dataset.resolution == Resolution{96, 96});
}

TEST_CASE("derived fields follow their sources") {
  const auto c = parse_run_config(R"({"ae": {"latent_dim": 3}, "encoder": {"dim": 24}, "captioner": {"max_chars": 100}})", {});
  CHECK(c.diff.unet.latent_channels == 3);
  CHECK(c.diff.unet.context_dim == 24);
  CHECK(c.encoder.max_chars == 100);
}

TEST_CASE("unknown keys and bad values are rejected with the key named") {
  CHECK(error_text(R"({"ae": {"bogus": 1}})").find("ae.bogus") != std::string::npos);
  CHECK(error_text(R"({"diffusion": {}})").find("diffusion") != std::string::npos);
  CHECK(error_text("", {"diff.nope=1"}).find("diff.nope") != std::string::npos);
  CHECK(error_text(R"({"diff": {"T": "many"}})").find("diff.T") != std::string::npos);
  CHECK(error_text(R"({"diff": {"lr": -1}})").find("diff.lr") != std::string::npos);
  CHECK(error_text(R"({"dataset": {"resolution": 60}})").find("ae.factor") != std::string::npos);
  CHECK(error_text(R"({"mode": "poetry"})") != "");
  CHECK(error_text("", {"noequals"}).find("key=value") != std::string::npos);
  CHECK(error_text("{not json") != "");
  CHECK(error_text(R"({"captioner": {"provider": "http"}})").find("endpoint") != std::string::npos);
}

TEST_CASE("canonical JSON round trips and hashes are stable") {
  const auto c = parse_run_config(R"({"seed": 3, "diff": {"T": 200}})", {});
  const auto text = config_json(c);
  const auto back = parse_run_config(text, {});
  CHECK(config_json(back) == text);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(parse_run_config(R"({"seed": 4, "diff": {"T": 200}})", {})) != config_hash(c));

  const auto d = parse_run_config(R"({"seed": 3, "diff": {"T": 200, "steps": 7}})", {});
  CHECK(sections_hash(d, {"ae"}) == sections_hash(c, {"ae"}));
  CHECK(sections_hash(d, {"diff"}) != sections_hash(c, {"diff"}));
  CHECK(sections_json(c, {"ae"}).find("\"kl_weight\"") != std::string::npos);
}

TEST_CASE("conditioning source and prompts") {
  auto c = parse_run_config("", {});
  CHECK(!c.caption_at_inference());
  CHECK(!c.prompts().inference_prompt);
  c = parse_run_config(R"({"mode": "natural"})", {});
  CHECK(c.caption_at_inference());
  CHECK(c.prompts().inference_prompt);
  c = parse_run_config("", {"diff.inference_conditioning=caption"});
  CHECK(c.caption_at_inference());
  REQUIRE(c.prompts().inference_prompt);
  CHECK(*c.prompts().inference_prompt == c.prompts().train_prompt);
  c = parse_run_config(R"({"mode": "natural"})", {"diff.inference_conditioning=null"});
  CHECK(!c.caption_at_inference());
  CHECK(!c.prompts().inference_prompt);
  CHECK(to_string(ConditionSource::caption) == "caption");
}

TEST_CASE("file loading resolves paths against the config directory") {
  testing::TempDir dir;
  std::filesystem::create_directories(dir.path() / "cfg");
  std::ofstream(dir.path() / "cfg" / "run.json") << R"({"output_dir": "out", "dataset": {"source": "folder", "root": "../data"}})";
  const auto c = load_run_config(dir.path() / "cfg" / "run.json", {});
  CHECK(c.output_dir.lexically_normal() == (dir.path() / "cfg" / "out").lexically_normal());
  CHECK(c.dataset_root().lexically_normal() == (dir.path() / "data").lexically_normal());
  CHECK_THROWS_AS(load_run_config(dir.path() / "none.json", {}), Error);
}
