// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/text_encoder.hpp"

#include <cctype>
#include <cmath>

#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"

namespace vlmdiff {

TextEncoder::TextEncoder(TextEncoderConfig config) : config_(std::move(config)) {
  if (config_.dim < 1 || config_.slots < 1) throw user_error("encoder.dim and encoder.slots must be >= 1");
  if (config_.max_chars < 1) throw user_error("encoder.max_chars must be >= 1");
}

void TextEncoder::check_length(std::string_view caption) const {
  if (caption.size() > config_.max_chars) {
    throw user_error("caption of " + std::to_string(caption.size()) + " bytes exceeds encoder.max_chars=" +
                     std::to_string(config_.max_chars) + "; truncate captions before encoding");
  }
}

std::vector<std::string> tokenize_caption(std::string_view caption) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

HashTextEncoder::HashTextEncoder(TextEncoderConfig config) : TextEncoder(std::move(config)) {}

std::string HashTextEncoder::id() const {
  return "hash-L" + std::to_string(config_.slots) + "-D" + std::to_string(config_.dim);
}

ConditionVector HashTextEncoder::encode(std::string_view caption) const {
  check_length(caption);
  ConditionVector out;
  out.slots = config_.slots;
  out.dim = config_.dim;
  out.values.assign(static_cast<std::size_t>(out.slots) * out.dim, 0.0f);

  const auto tokens = tokenize_caption(caption);
  out.null_flag = tokens.empty();
  const int D = config_.dim;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const double bucket = static_cast<double>(fnv1a64(tokens[k]) % kBuckets) + 1.0;
    float* row = out.values.data() + (k % static_cast<std::size_t>(config_.slots)) * D;
    for (int j = 0; j < D; ++j) {
      const double freq = std::pow(10000.0, -2.0 * (j / 2) / D);
      const double angle = bucket * freq;
      row[j] += static_cast<float>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return out;
}

}  // namespace vlmdiff
