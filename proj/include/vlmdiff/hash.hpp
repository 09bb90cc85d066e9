// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace vlmdiff {

std::uint64_t fnv1a64(std::string_view bytes);

/// SplitMix64 finalizer; used to derive independent seeds from a root seed.
std::uint64_t splitmix64(std::uint64_t x);

/// Seed for a named stage or item, derived from the root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

/// Hex SHA-1 of `data`.
std::string sha1_hex(std::string_view data);

/// Git blob object id of `content` ("blob <size>\0" prefix, SHA-1).
std::string git_blob_hash(std::string_view content);

/// Git blob id of a file; for directories, a hash over sorted (relative path, blob id) pairs.
std::string artifact_hash(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace vlmdiff
