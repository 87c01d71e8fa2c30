// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: experiment config (flat key=value text), adapter
// checkpoints and weight files (little-endian binary).

#pragma once

#include "mora/analysis.hpp"
#include "mora/training.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mora {

struct ExperimentConfig {
  // task.*
  std::size_t pairs = 500;
  std::size_t key_len = 8;
  std::size_t val_len = 8;
  std::uint64_t task_seed = 0;  // dataset seed offset, added to `seed`
  // model.*
  ModelConfig model;
  std::size_t pretrain_steps = 500;
  // adapter.*
  AdapterKind kind = AdapterKind::Mora;
  OperatorKind op = OperatorKind::rotation();
  std::size_t r = 8;
  double alpha = 0;
  double init_std = 0;
  // train.*
  std::vector<double> lrs{3e-3};
  std::size_t steps = 2000;
  std::size_t batch = 64;
  std::size_t merge_every = 0;
  ScheduleShape schedule = ScheduleShape::Constant;
  std::size_t warmup = 0;
  std::size_t restart_warmup = 50;
  double weight_decay = 0;
  std::size_t eval_every = 25;
  double target_accuracy = 0.99;
  bool stop_at_target = false;
  // top level
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";

  /// Throws Error(InvalidArgument) naming the key and line on any problem.
  static ExperimentConfig parse(std::string_view text);
  /// Every key with its resolved value; parse(to_text()) reproduces *this.
  std::string to_text() const;

  TrainConfig train_config(double lr) const;
  KvDataset dataset() const;
  std::uint64_t dataset_seed() const { return seed + task_seed; }
  std::uint64_t base_seed() const { return seed + 1000; }
};

ExperimentConfig load_config(const std::string& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

std::string read_file(const std::string& path);
/// Writes to a temporary sibling and renames it into place.
void write_file(const std::string& path, std::string_view bytes);

// Adapter checkpoint: "MORA", u16 version, u32 record count, then one record
// per adapted linear layer (layer-major, families q k v o up down gate).
// MoRA record: u8 operator tag (0..4), u32 d, k, r, r_hat, r_hat^2 f32 of M.
// LoRA record: u8 tag 5, u32 d, k, r, f32 alpha, r*k f32 of A, d*r f32 of B.
// Empty slot: u8 tag 255, u32 d, k.
// Every record ends with u8 has_merged and, when set, d*k f32 of the
// increments already merged into the base weight.
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kLoraTag = 5;
inline constexpr std::uint8_t kEmptyTag = 255;

struct AdapterRecord {
  std::size_t layer = 0;
  LinearFamily family = LinearFamily::Q;
  std::size_t d = 0, k = 0;
  TinyLM<float>::Adapter adapter;
  Matrix<float> merged_delta;
};

std::string encode_checkpoint(const TinyLM<float>& model);
std::vector<AdapterRecord> decode_checkpoint(std::string_view bytes);
/// Installs adapters and merged increments into `model`; shape mismatches are
/// collected into one error listing every offending layer.
void apply_checkpoint(TinyLM<float>& model, const std::vector<AdapterRecord>& records);
SpectrumReport spectrum_report(const std::vector<AdapterRecord>& records, double threshold);

// Weights file: "MORW", u16 version, u64 digest of the checkpoint consumed by
// export (0 for a plain base), u32 vocab, dim, layers, heads, ffn_dim, then
// u32 tensor count and per tensor: u16 name length, name, u32 rows, u32 cols,
// rows*cols f32.
inline constexpr std::uint16_t kWeightsVersion = 1;

struct WeightsFile {
  std::uint64_t consumed_digest = 0;
  TinyLM<float> model{ModelConfig{}};
};

std::string encode_weights(const TinyLM<float>& model, std::uint64_t consumed_digest);
WeightsFile decode_weights(std::string_view bytes);

/// max |a - b| / max |b| over all entries.
double max_relative_deviation(const Matrix<float>& a, const Matrix<float>& b);

}  // namespace mora
