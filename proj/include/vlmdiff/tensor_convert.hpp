// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <span>
#include <vector>

#include "vlmdiff/dataset.hpp"
#include "vlmdiff/image.hpp"
#include "vlmdiff/text_encoder.hpp"

namespace vlmdiff {

/// [1, 3, H, W] float tensor in [0,1].
torch::Tensor image_to_tensor(const Image& image);
/// [B, 3, H, W] float tensor in [0,1].
torch::Tensor batch_to_tensor(const Batch& batch);
/// Inverse of image_to_tensor for a single [3,H,W] or [1,3,H,W] tensor; clamps to [0,1].
Image tensor_to_image(const torch::Tensor& tensor);

/// [L, D] tensor.
torch::Tensor condition_to_tensor(const ConditionVector& c);
/// [B, L, D] stacked conditions.
torch::Tensor stack_conditions(std::span<const ConditionVector> conditions);

/// Forces single-threaded intra-op execution so results are bitwise reproducible.
void use_deterministic_cpu();

}  // namespace vlmdiff
