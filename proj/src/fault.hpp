// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deliberate defects that `verify` can switch on to show its suites detect
// them. Never enabled outside a verification run.

#pragma once

namespace mora::detail {

enum class Fault : int { None = 0, SharingDecompressSign = 1 };

Fault active_fault();
void set_active_fault(Fault f);

}  // namespace mora::detail
