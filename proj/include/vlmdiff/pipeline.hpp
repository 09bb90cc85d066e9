// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vlmdiff/config.hpp"

namespace vlmdiff {

enum class Stage { synth, caption, train_ae, train_diff, infer, eval, report };

Stage parse_stage(std::string_view name);
std::string to_string(Stage stage);
const std::vector<Stage>& all_stages();

struct StageResult {
  Stage stage = Stage::synth;
  bool up_to_date = false;  // outputs already matched the config and inputs; nothing was redone
  std::string summary;
};

/// Output locations under `output_dir`.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path run_log() const { return root / "run.log"; }
  std::filesystem::path stamps() const { return root / "stages"; }
  std::filesystem::path captions() const { return root / "captions.jsonl"; }
  std::filesystem::path ae() const { return root / "ae.pt"; }
  std::filesystem::path ae_log() const { return root / "ae_log.csv"; }
  std::filesystem::path denoiser() const { return root / "denoiser.pt"; }
  std::filesystem::path diff_log() const { return root / "diff_log.csv"; }
  std::filesystem::path infer_dir() const { return root / "infer"; }
  std::filesystem::path maps() const { return root / "infer" / "maps"; }
  std::filesystem::path recon() const { return root / "infer" / "recon"; }
  std::filesystem::path conditions() const { return root / "infer" / "conditions.tsv"; }
  std::filesystem::path eval_dir() const { return root / "eval"; }
  std::filesystem::path report_txt() const { return root / "eval" / "report.txt"; }
  std::filesystem::path curves_csv() const { return root / "eval" / "curves.csv"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

/// Runs stages over one configuration. Each stage checks its prerequisites,
/// skips work whose recorded config and input hashes still match, and appends
/// a JSON line to run.log.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config);

  StageResult run(Stage stage);
  std::vector<StageResult> run_all();

  const RunConfig& config() const { return config_; }
  const RunPaths& paths() const { return paths_; }

  /// Hash that identifies the configuration a stage's outputs depend on.
  std::string stage_hash(Stage stage) const;

  /// Progress messages (one line each); defaults to nothing.
  std::function<void(const std::string&)> on_message;

 private:
  StageResult run_synth();
  StageResult run_caption();
  StageResult run_train_ae();
  StageResult run_train_diff();
  StageResult run_infer();
  StageResult run_eval();
  StageResult run_report();

  void message(const std::string& text) const;
  std::string caption_digest(Split split, const std::string& prompt) const;

  RunConfig config_;
  RunPaths paths_;
};

/// Stage seed split from the root seed.
std::uint64_t stage_seed(std::uint64_t root, Stage stage);

}  // namespace vlmdiff
