// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/tensor_convert.hpp"

#include <cstring>

#include "vlmdiff/error.hpp"

namespace vlmdiff {

torch::Tensor image_to_tensor(const Image& image) {
  if (image.channels != 3) throw user_error("expected a 3-channel image");
  auto hwc = torch::from_blob(const_cast<float*>(image.data.data()), {image.height, image.width, 3},
                              torch::kFloat32);
  return hwc.permute({2, 0, 1}).unsqueeze(0).contiguous();
}

torch::Tensor batch_to_tensor(const Batch& batch) {
  auto bhwc = torch::from_blob(const_cast<float*>(batch.data.data()),
                               {batch.size, batch.resolution.height, batch.resolution.width, 3}, torch::kFloat32);
  return bhwc.permute({0, 3, 1, 2}).contiguous();
}

Image tensor_to_image(const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kFloat32);
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw user_error("tensor_to_image expects a single image");
    t = t.squeeze(0);
  }
  if (t.dim() != 3 || t.size(0) != 3) throw user_error("tensor_to_image expects [3,H,W]");
  t = t.clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
  Image img(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), 3);
  std::memcpy(img.data.data(), t.data_ptr<float>(), img.data.size() * sizeof(float));
  return img;
}

torch::Tensor condition_to_tensor(const ConditionVector& c) {
  return torch::from_blob(const_cast<float*>(c.values.data()), {c.slots, c.dim}, torch::kFloat32).clone();
}

torch::Tensor stack_conditions(std::span<const ConditionVector> conditions) {
  std::vector<torch::Tensor> parts;
  parts.reserve(conditions.size());
  for (const auto& c : conditions) parts.push_back(condition_to_tensor(c));
  return torch::stack(parts);
}

void use_deterministic_cpu() {
  at::set_num_threads(1);
}

}  // namespace vlmdiff
