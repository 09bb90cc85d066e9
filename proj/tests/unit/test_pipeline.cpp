// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "common/doctest_torch.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

#include "common/testing.hpp"
#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"
#include "vlmdiff/pipeline.hpp"

using namespace vlmdiff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const fs::path& out, const std::vector<std::string>& extra = {}) {
  std::vector<std::string> overrides{"output_dir=" + out.string()};
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  return parse_run_config(R"({
    "dataset": {"resolution": 32, "synth": {"n_train": 4, "n_test_normal": 2, "n_test_anomalous": 2}},
    "encoder": {"dim": 8, "slots": 4},
    "ae": {"factor": 4, "base_channels": 8, "epochs": 1, "batch": 4, "lr": 1e-3, "save_every": 0},
    "diff": {"T": 20, "steps": 3, "lr": 1e-3, "batch": 4, "train_steps": 3, "save_every": 0,
             "unet": {"base_channels": 8, "channel_mult": [1, 2], "heads": 2}},
    "segmentation": {"extractor": {"patch": 4, "channels": 8}}
  })",
                          overrides);
}

std::vector<json> log_lines(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) out.push_back(json::parse(line));
  return out;
}

std::vector<json> stage_lines(const fs::path& path) {
  std::vector<json> out;
  for (auto& j : log_lines(path))
    if (!j.contains("event")) out.push_back(j);
  return out;
}

}  // namespace

TEST_CASE("stage names") {
  for (auto s : all_stages()) CHECK(parse_stage(to_string(s)) == s);
  CHECK(all_stages().size() == 7);
  CHECK(to_string(all_stages().front()) == "synth");
  CHECK(to_string(all_stages().back()) == "report");
  CHECK_THROWS_AS(parse_stage("train"), Error);
}

TEST_CASE("stage seeds are split from the root seed") {
  CHECK(stage_seed(0, Stage::infer) == stage_seed(0, Stage::infer));
  CHECK(stage_seed(0, Stage::infer) != stage_seed(0, Stage::train_diff));
  CHECK(stage_seed(0, Stage::infer) != stage_seed(1, Stage::infer));
}

TEST_CASE("running a stage before its producer names the missing step") {
  testing::TempDir dir;
  Pipeline p(tiny_run(dir.path()));
  for (auto [stage, producer] : {std::pair{Stage::caption, "synth"}, std::pair{Stage::eval, "synth"}}) {
    try {
      p.run(stage);
      FAIL("expected a missing artifact");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::missing_artifact);
      CHECK(std::string(e.what()).find(std::string("run ") + producer) != std::string::npos);
    }
  }
  p.run(Stage::synth);
  try {
    p.run(Stage::eval);
    FAIL("expected a missing artifact");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_artifact);
    CHECK(std::string(e.what()).find("run infer") != std::string::npos);
  }
  try {
    p.run(Stage::train_diff);
    FAIL("expected a missing artifact");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("run train_ae") != std::string::npos);
  }
}

TEST_CASE("full run, idempotent rerun and selective invalidation") {
  testing::TempDir dir;
  const auto out = dir.path() / "run";
  Pipeline p(tiny_run(out));
  std::vector<std::string> messages;
  p.on_message = [&](const std::string& m) { messages.push_back(m); };
  const auto first = p.run_all();
  REQUIRE(first.size() == 7);
  for (const auto& r : first) CHECK(!r.up_to_date);
  CHECK(!messages.empty());

  const auto& paths = p.paths();
  for (const auto& f : {paths.ae(), paths.denoiser(), paths.report_txt(), paths.curves_csv(), paths.conditions(),
                        paths.captions(), paths.ae_log(), paths.diff_log(), paths.report_dir() / "report.txt"}) {
    CHECK_MESSAGE(fs::exists(f), f.string());
  }
  const auto report = read_file(paths.report_txt());
  CHECK(report.find("roc_i = ") != std::string::npos);
  CHECK(report.find("circle.pro = ") != std::string::npos);

  auto lines = stage_lines(paths.run_log());
  REQUIRE(lines.size() == 7);
  for (const auto& j : lines) {
    for (const char* key : {"time", "stage", "status", "config_hash", "stage_hash", "seed", "stage_seed", "inputs",
                            "outputs", "seconds", "summary"})
      CHECK_MESSAGE(j.contains(key), key);
    CHECK(j["status"] == "done");
  }

  // Nothing changed: every stage is skipped.
  Pipeline again(tiny_run(out));
  for (const auto& r : again.run_all()) CHECK_MESSAGE(r.up_to_date, to_string(r.stage));
  lines = stage_lines(paths.run_log());
  REQUIRE(lines.size() == 14);
  for (std::size_t i = 7; i < 14; ++i) CHECK(lines[i]["status"] == "up-to-date");
  CHECK(read_file(paths.report_txt()) == report);

  // Sampler settings only invalidate inference and what follows.
  Pipeline steps(tiny_run(out, {"diff.steps=2"}));
  std::map<std::string, bool> fresh;
  for (const auto& r : steps.run_all()) fresh[to_string(r.stage)] = r.up_to_date;
  CHECK(fresh["synth"]);
  CHECK(fresh["train_ae"]);
  CHECK(fresh["train_diff"]);
  CHECK(!fresh["infer"]);
  CHECK(!fresh["eval"]);

  // A deleted output is regenerated.
  fs::remove(paths.denoiser());
  Pipeline repair(tiny_run(out, {"diff.steps=2"}));
  const auto r = repair.run(Stage::train_diff);
  CHECK(!r.up_to_date);
  CHECK(fs::exists(paths.denoiser()));
}

TEST_CASE("identical configurations give identical reports") {
  testing::TempDir a, b;
  Pipeline pa(tiny_run(a.path()));
  Pipeline pb(tiny_run(b.path()));
  pa.run_all();
  pb.run_all();
  CHECK(read_file(pa.paths().report_txt()) == read_file(pb.paths().report_txt()));
  CHECK(read_file(pa.paths().ae()) == read_file(pb.paths().ae()));
  CHECK(config_hash(pa.config()) != config_hash(pb.config()));  // output_dir differs
}

TEST_CASE("natural mode conditions inference on captions") {
  testing::TempDir dir;
  Pipeline ind(tiny_run(dir.path() / "ind"));
  ind.run_all();
  Pipeline nat(tiny_run(dir.path() / "nat", {"mode=natural"}));
  nat.run_all();

  const auto count = [](const fs::path& tsv, const std::string& source) {
    std::istringstream in(read_file(tsv));
    std::string line;
    int n = 0;
    while (std::getline(in, line))
      if (line.size() > source.size() && line.substr(line.size() - source.size() - 1) == "\t" + source) ++n;
    return n;
  };
  CHECK(count(ind.paths().conditions(), "null") == 4);
  CHECK(count(ind.paths().conditions(), "caption") == 0);
  CHECK(count(nat.paths().conditions(), "caption") == 4);

  int events = 0;
  for (const auto& j : log_lines(nat.paths().run_log()))
    if (j.value("event", "") == "condition") {
      ++events;
      CHECK(j["source"] == "caption");
    }
  CHECK(events == 4);

  // Industrial captions cover only the train split; natural captions also cover test images.
  CHECK(read_file(nat.paths().captions()).size() > read_file(ind.paths().captions()).size());
}

TEST_CASE("forcing caption conditioning in industrial mode captions test images") {
  testing::TempDir dir;
  const auto out = dir.path() / "run";
  Pipeline base(tiny_run(out));
  base.run_all();
  Pipeline forced(tiny_run(out, {"diff.inference_conditioning=caption"}));
  std::map<std::string, bool> fresh;
  for (const auto& r : forced.run_all()) fresh[to_string(r.stage)] = r.up_to_date;
  CHECK(!fresh["caption"]);
  CHECK(fresh["train_ae"]);
  CHECK(fresh["train_diff"]);
  CHECK(!fresh["infer"]);
  const auto tsv = read_file(forced.paths().conditions());
  CHECK(tsv.find("\tcaption\n") != std::string::npos);
  CHECK(tsv.find("\tnull\n") == std::string::npos);
}
