// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

// doctest after torch: torch's logging macros share doctest's short names.

#pragma once

#include <torch/torch.h>

#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE

#include <doctest.h>
