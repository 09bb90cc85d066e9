// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "vlmdiff/dataset.hpp"

namespace testing {

/// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vlmdiff-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline vlmdiff::SynthOptions tiny_options(int side = 32) {
  vlmdiff::SynthOptions o;
  o.seed = 3;
  o.n_train = 4;
  o.n_test_normal = 2;
  o.n_test_anomalous = 3;
  o.resolution = {side, side};
  return o;
}

/// Two categories, a handful of images each.
inline vlmdiff::DatasetIndex tiny_dataset(const std::filesystem::path& root, int side = 32) {
  return vlmdiff::synthesize_shapes_dataset(tiny_options(side), root);
}

}  // namespace testing
