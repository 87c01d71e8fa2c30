// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// The memorization task (random hex key -> random hex value pairs) and the
// tiny decoder-only language model that hosts adapters.

#pragma once

#include "mora/adapters.hpp"
#include "mora/tape.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace mora {

// Vocabulary: 16 hex digits, then separator, begin and pad.
inline constexpr int kHexSymbols = 16;
inline constexpr int kSepToken = 16;
inline constexpr int kBosToken = 17;
inline constexpr int kPadToken = 18;
inline constexpr int kVocabSize = 19;

struct KvPair {
  std::vector<int> key;
  std::vector<int> value;
};

struct KvDataset {
  std::vector<KvPair> pairs;
  std::size_t key_len = 0;
  std::size_t val_len = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return pairs.size(); }
  /// key, separator, value: key_len + 1 + val_len tokens.
  std::size_t sequence_length() const { return key_len + 1 + val_len; }
};

/// Deterministic in (n, seed, key_len, val_len). Keys are unique; values are
/// drawn independently of keys.
KvDataset generate_kv_pairs(std::size_t n, std::uint64_t seed, std::size_t key_len, std::size_t val_len);

/// One pair per line, `key<TAB>value`, lowercase hex.
void write_dataset(std::ostream& os, const KvDataset& data);
KvDataset read_dataset(std::istream& is);

/// Next-token training batch over the given pair indices: inputs drop the
/// final token, targets mark only positions whose next token is a value token.
struct TokenBatch {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::size_t batch = 0;
  std::size_t seq = 0;
};
TokenBatch make_batch(const KvDataset& data, std::span<const std::size_t> indices);

enum class LinearFamily : std::uint8_t { Q, K, V, O, Up, Down, Gate };
inline constexpr std::size_t kFamilies = 7;
inline constexpr std::array<LinearFamily, kFamilies> kAllFamilies{LinearFamily::Q,    LinearFamily::K,
                                                                  LinearFamily::V,    LinearFamily::O,
                                                                  LinearFamily::Up,   LinearFamily::Down,
                                                                  LinearFamily::Gate};
const char* family_name(LinearFamily f);

struct ModelConfig {
  std::size_t vocab = kVocabSize;
  std::size_t dim = 128;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;

  /// (d, k) of a linear family's weight: output x input.
  std::pair<std::size_t, std::size_t> shape(LinearFamily f) const;
};

/// Which parameters receive gradients.
enum class Tuning { Frozen, Adapters, Full };

template <typename T>
class TinyLM {
 public:
  using Adapter = std::variant<std::monostate, MoraAdapter<T>, LoraAdapter<T>>;

  struct Layer {
    Matrix<T> attn_norm;
    Matrix<T> ffn_norm;
    std::array<Matrix<T>, kFamilies> weight;  // indexed by LinearFamily
  };

  /// Attached adapter plus the sum of every increment already merged into
  /// the base weight by merge-and-reinit cycles.
  struct Slot {
    Adapter adapter;
    Matrix<T> merged_delta;
  };

  explicit TinyLM(ModelConfig cfg);
  static TinyLM random(const ModelConfig& cfg, std::mt19937_64& rng);

  const ModelConfig& config() const { return cfg_; }

  Matrix<T> embed;       // vocab x dim
  Matrix<T> output;      // vocab x dim
  Matrix<T> final_norm;  // 1 x dim
  std::vector<Layer> layers;
  std::vector<std::array<Slot, kFamilies>> slots;

  Matrix<T>& weight(std::size_t layer, LinearFamily f) { return layers[layer].weight[static_cast<std::size_t>(f)]; }
  const Matrix<T>& weight(std::size_t layer, LinearFamily f) const {
    return layers[layer].weight[static_cast<std::size_t>(f)];
  }
  Slot& slot(std::size_t layer, LinearFamily f) { return slots[layer][static_cast<std::size_t>(f)]; }
  const Slot& slot(std::size_t layer, LinearFamily f) const { return slots[layer][static_cast<std::size_t>(f)]; }

  void attach_mora(std::size_t r, OperatorKind op);
  void attach_lora(std::size_t r, double alpha, std::mt19937_64& rng, double init_std = 0);
  void detach_adapters();
  bool has_adapters() const;

  std::size_t merge_cycles = 0;
  /// Set once adapters have been folded into exported weights; further
  /// merges are refused.
  bool exported = false;

  /// Every parameter matrix in a fixed order, with whether it belongs to an
  /// adapter.
  struct ParamRef {
    std::string name;
    Matrix<T>* value;
    bool adapter;
  };
  std::vector<ParamRef> parameters();
  std::vector<ParamRef> trainable(Tuning tuning);

  /// Logits node (batch*seq x vocab) for row-major token ids. `grads`, when
  /// given, maps each trainable parameter (by position in trainable(tuning))
  /// to its gradient sink.
  typename Tape<T>::Id forward(Tape<T>& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                               Tuning tuning = Tuning::Frozen, std::vector<Matrix<T>>* grads = nullptr);

  Matrix<T> logits(std::span<const int> tokens, std::size_t batch, std::size_t seq);

  /// Same logits as forward(), computed `block` positions at a time against
  /// cached keys and values.
  Matrix<T> incremental_logits(std::span<const int> tokens, std::size_t batch, std::size_t seq,
                               std::size_t block) const;

  /// Consumes `prompt` (batch rows of prompt_len tokens), then appends
  /// `steps` tokens, each the argmax over ids [0, choices) given everything
  /// before it. Returns batch x steps ids.
  std::vector<int> greedy_continue(std::span<const int> prompt, std::size_t batch, std::size_t prompt_len,
                                   std::size_t steps, int choices) const;

  template <typename U>
  TinyLM<U> cast() const;

 private:
  struct KvCache;
  Matrix<T> run_block(KvCache& cache, std::span<const int> tokens, std::size_t n) const;

  ModelConfig cfg_;
};

/// Scores next tokens for a batch of sequences: returns batch*seq x vocab logits.
using NextTokenScorer = std::function<Matrix<float>(std::span<const int> tokens, std::size_t batch, std::size_t seq)>;

/// Greedy decoding of each value conditioned on its key, restricted to the
/// 16 hex symbols. Returns matched value tokens / total value tokens.
double evaluate_char_accuracy(const NextTokenScorer& scorer, const KvDataset& data, std::size_t chunk = 128);
double evaluate_char_accuracy(const TinyLM<float>& model, const KvDataset& data, std::size_t chunk = 128);

}  // namespace mora
