// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Singular-value counts of learned weight updates and trainable-parameter
// accounting.

#pragma once

#include "mora/tasks.hpp"

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

namespace mora {

struct SpectrumEntry {
  std::size_t layer = 0;
  LinearFamily family = LinearFamily::Q;
  std::size_t count = 0;
  double top_singular_value = 0;
  std::size_t rows = 0, cols = 0;
  std::string error;  // non-empty when the SVD failed for this layer
};

struct SpectrumReport {
  double threshold = 0.1;
  std::string adapter;  // "mora", "lora", "mixed" or "none"
  std::size_t r = 0;
  std::vector<SpectrumEntry> entries;  // ordered by layer, then family

  /// Mean count per family over layers whose SVD succeeded.
  std::array<double, kFamilies> average_counts() const;
};

/// Merged increments plus the live adapter for one linear layer, in 64-bit.
template <typename T>
Matrix<double> cumulative_delta(const TinyLM<T>& model, std::size_t layer, LinearFamily family);

/// Singular-value count of one layer's update; SVD failures are recorded in
/// the entry rather than thrown.
SpectrumEntry spectrum_entry(std::size_t layer, LinearFamily family, const Matrix<double>& delta, double threshold);

template <typename T>
SpectrumReport spectrum_report(const TinyLM<T>& model, double threshold = 0.1);

/// `layer_family,layer_index,count,top_singular_value`
void write_spectrum_csv(std::ostream& os, const SpectrumReport& report);

struct ParamRow {
  std::size_t layer = 0;
  LinearFamily family = LinearFamily::Q;
  std::string kind;  // "mora", "lora" or "none"
  std::size_t d = 0, k = 0, r = 0, r_hat = 0;
  std::size_t trainable = 0;
  std::size_t budget = 0;  // (d + k) r
  double utilization = 0;  // trainable / budget
};

template <typename T>
std::vector<ParamRow> param_report(const TinyLM<T>& model);

void write_param_csv(std::ostream& os, const std::vector<ParamRow>& rows);

}  // namespace mora
