// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

// vlmdiff <subcommand> --config <path> [--set key=value]...

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "vlmdiff/vlmdiff.h"

namespace {

int exit_code(vlmdiff_status st) {
  switch (st) {
    case VLMDIFF_OK: return 0;
    case VLMDIFF_ERR_USER:
    case VLMDIFF_ERR_IO:
    case VLMDIFF_ERR_MISSING_ARTIFACT:
    case VLMDIFF_ERR_PROVIDER: return 1;
    case VLMDIFF_ERR_NUMERIC:
    case VLMDIFF_ERR_INTERNAL: return 2;
  }
  return 2;
}

int fail(vlmdiff_status st) {
  std::fprintf(stderr, "vlmdiff: %s: %s\n", vlmdiff_status_name(st), vlmdiff_last_error());
  return exit_code(st);
}

void print_line(const char* line, void*) {
  std::fprintf(stderr, "%s\n", line);
  std::fflush(stderr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Caption-conditioned latent diffusion anomaly detection"};
  app.set_version_flag("--version", std::string(vlmdiff_version()));
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "generate the synthetic shapes dataset"},
      {"caption", "caption dataset images with the configured provider"},
      {"train_ae", "train the image autoencoder"},
      {"train_diff", "train the latent denoiser"},
      {"infer", "reconstruct test images and write anomaly maps"},
      {"eval", "compute ROC_I, ROC_P and PRO"},
      {"report", "print the evaluation report and write contact sheets"},
      {"all", "run every stage in order"},
      {"show-config", "print the effective configuration as JSON"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config,-c", config_path, "JSON configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "override a config key, e.g. --set diff.lr=1e-4")->allow_extra_args(false);
    sub->add_flag("--quiet,-q", quiet, "suppress progress messages");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  std::vector<const char*> ov;
  for (const auto& o : overrides) ov.push_back(o.c_str());
  vlmdiff_run* run = nullptr;
  vlmdiff_status st = vlmdiff_run_open(config_path.c_str(), ov.data(), ov.size(), &run);
  if (st != VLMDIFF_OK) return fail(st);
  if (!quiet) vlmdiff_run_set_message_callback(run, print_line, nullptr);

  auto fetch = [&](auto fn) -> std::string {
    size_t needed = 0;
    if ((st = fn(run, nullptr, 0, &needed)) != VLMDIFF_OK) return {};
    std::string s(needed + 1, '\0');
    if ((st = fn(run, s.data(), s.size(), &needed)) != VLMDIFF_OK) return {};
    s.resize(needed);
    return s;
  };

  if (command == "show-config") {
    const std::string text = fetch(vlmdiff_run_config_json);
    if (st == VLMDIFF_OK) std::printf("%s\n", text.c_str());
  } else {
    st = vlmdiff_run_stage(run, command.c_str());
    if (st == VLMDIFF_OK && (command == "report" || command == "all")) {
      const std::string text = fetch(vlmdiff_run_report_text);
      if (st == VLMDIFF_OK) std::printf("%s", text.c_str());
    }
  }
  const int rc = st == VLMDIFF_OK ? 0 : fail(st);
  vlmdiff_run_close(run);
  return rc;
}
