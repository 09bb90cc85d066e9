// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "common/doctest_torch.hpp"
