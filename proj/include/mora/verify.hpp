// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Randomized property suites over the adapter algebra, the autodiff tape and
// merge-and-reinit. Each suite reports the worst error it measured so
// callers can apply their own tolerance; `passed()` uses the suite default.

#pragma once

#include "mora/training.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mora {

struct SuiteResult {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst = 0;      // largest error seen, in the suite's own metric
  double tolerance = 0;  // bound `worst` was checked against
  std::string counterexample;  // first failing case; empty when none failed

  bool passed() const { return failures == 0; }
};

inline const std::array<OperatorKind, 5> kAllOperators{
    OperatorKind::truncation(), OperatorKind::sharing(GroupScheme::Strided),
    OperatorKind::sharing(GroupScheme::Contiguous), OperatorKind::decouple(), OperatorKind::rotation()};

/// |adapter_delta(x) - expand_delta_w * x| / (1 + |expand_delta_w * x|), per
/// coordinate, for every operator over shapes (16,16), (64,48), (33,17).
SuiteResult verify_losslessness(std::uint64_t seed, std::size_t trials = 1000, double tolerance = 1e-9);

/// <compress x, g> = <x, adjoint_compress g> and likewise for decompress.
SuiteResult verify_adjoints(std::uint64_t seed, std::size_t trials = 200, double tolerance = 1e-10);

/// r_hat^2 <= (d + k) r < (r_hat + 1)^2 on random triples, plus the
/// published spot values. `worst` counts violations.
SuiteResult verify_parity(std::uint64_t seed, std::size_t triples = 200);

/// Sharing groups that receive at least one of n coordinates. Contiguous
/// blocks of ceil(n / r_hat) can leave trailing groups empty (n = 25,
/// r_hat = 6 fills five).
std::size_t occupied_groups(std::size_t n, std::size_t r_hat, GroupScheme scheme);

/// LoRA rank <= r, truncation/sharing rank <= r_hat, chunked operators
/// rank <= min(d, k, chunks r_hat), and random full-rank M under sharing
/// gives rank min(occupied row groups, occupied column groups), which is
/// r_hat whenever every group is occupied. `worst` counts violations.
SuiteResult verify_rank_ceilings(std::uint64_t seed, std::size_t trials = 100);

struct GradientOptions {
  ModelConfig model{17, 32, 2, 2, 64};
  std::size_t r = 4;
  double step = 1e-6;
  bool float_analytic = false;  // analytic pass in 32-bit, differences in 64-bit
  /// Compare whole tensors, ||g - fd|| / max(||fd||, floor), instead of
  /// entries, |g - fd| / max(|fd|, floor).
  bool per_tensor = false;
  double tolerance = 1e-4;
  double floor = 1e-4;
};

/// Every trainable parameter of the model, with each MoRA operator and with
/// LoRA attached, against central differences of the 64-bit loss on a
/// two-sequence batch.
SuiteResult verify_gradients(std::uint64_t seed, const GradientOptions& opt = {});

/// Max relative deviation of logits before and after folding adapters into
/// the weights, over `inputs` random token sequences, for every adapter kind.
template <typename T>
SuiteResult verify_merge(std::uint64_t seed, std::size_t inputs, double tolerance);

struct RemoraGrowth {
  std::size_t trials = 0;
  std::size_t grew_with_flip = 0;       // rank(dW1 + dW2) > r_hat
  std::size_t capped_without_flip = 0;  // rank(dW1 + dW2) <= r_hat
};

/// Two sharing cycles at d = k = 32, r_hat = 4: once flipping the grouping
/// scheme between cycles and once keeping it.
RemoraGrowth remora_growth(std::uint64_t seed, std::size_t trials = 100);
SuiteResult verify_remora(std::uint64_t seed, std::size_t trials = 100);

struct VerifyOptions {
  std::uint64_t seed = 42;
  /// Flips one output sign in sharing decompress for the duration of the run.
  bool inject_sharing_fault = false;
};

std::vector<SuiteResult> verify_all(const VerifyOptions& opt);

/// One line per suite followed by a summary line; identical for identical
/// results.
std::string format_verify_report(const std::vector<SuiteResult>& results);

}  // namespace mora
