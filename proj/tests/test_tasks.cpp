// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "oracles.hpp"

#include "mora/tasks.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

using mora::KvDataset;
using mora::LinearFamily;
using mora::Matrix;
using mora::ModelConfig;
using mora::OperatorKind;
using mora::TinyLM;
using mora::Tuning;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 24;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, mora::kVocabSize - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("kv pairs: deterministic, unique keys, seed dependent") {
  const KvDataset a = mora::generate_kv_pairs(500, 7, 8, 8);
  const KvDataset b = mora::generate_kv_pairs(500, 7, 8, 8);
  REQUIRE(a.size() == 500);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.pairs[i].key == b.pairs[i].key);
    CHECK(a.pairs[i].value == b.pairs[i].value);
  }
  std::set<std::vector<int>> keys;
  for (const auto& p : a.pairs) keys.insert(p.key);
  CHECK(keys.size() == a.size());

  const KvDataset c = mora::generate_kv_pairs(20, 8, 8, 8);
  std::size_t same = 0;
  for (std::size_t i = 0; i < 20; ++i) same += a.pairs[i].key == c.pairs[i].key && a.pairs[i].value == c.pairs[i].value;
  CHECK(same == 0);
}

TEST_CASE("kv pairs: every token is a hex symbol") {
  const KvDataset a = mora::generate_kv_pairs(50, 1, 4, 6);
  for (const auto& p : a.pairs) {
    CHECK(p.key.size() == 4);
    CHECK(p.value.size() == 6);
    for (int t : p.key) CHECK((t >= 0 && t < mora::kHexSymbols));
    for (int t : p.value) CHECK((t >= 0 && t < mora::kHexSymbols));
  }
}

TEST_CASE("kv pairs: too many pairs for the key space is rejected") {
  CHECK_THROWS_AS(mora::generate_kv_pairs(17, 1, 1, 2), mora::Error);
  CHECK(mora::generate_kv_pairs(16, 1, 1, 2).size() == 16);
}

TEST_CASE("kv pairs: text round trip") {
  const KvDataset a = mora::generate_kv_pairs(30, 3, 8, 8);
  std::stringstream ss;
  mora::write_dataset(ss, a);
  const std::string first = ss.str().substr(0, ss.str().find('\n'));
  CHECK(first.size() == 17);
  CHECK(first[8] == '\t');
  const KvDataset b = mora::read_dataset(ss);
  REQUIRE(b.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b.pairs[i].value == a.pairs[i].value);

  std::stringstream bad("12g4\tabcd\n");
  CHECK_THROWS_AS(mora::read_dataset(bad), mora::Error);
}

TEST_CASE("make_batch: inputs and value-only targets") {
  KvDataset d;
  d.key_len = 2;
  d.val_len = 3;
  d.pairs.push_back({{1, 2}, {3, 4, 5}});
  const std::vector<std::size_t> idx{0};
  const auto b = mora::make_batch(d, idx);
  CHECK(b.seq == 5);
  CHECK(b.inputs == std::vector<int>{1, 2, mora::kSepToken, 3, 4});
  CHECK(b.targets == std::vector<int>{-1, -1, 3, 4, 5});
}

TEST_CASE("tiny model: all-zero weights give uniform logits") {
  TinyLM<double> m(small_config());
  std::mt19937_64 rng(1);
  const auto tokens = random_tokens(10, rng);
  const Matrix<double> l = m.logits(tokens, 2, 5);
  CHECK(l.rows() == 10);
  CHECK(l.cols() == mora::kVocabSize);
  CHECK(mora::max_abs(l) == 0.0);
}

TEST_CASE("tiny model: causal") {
  std::mt19937_64 rng(2);
  auto m = TinyLM<double>::random(small_config(), rng);
  auto tokens = random_tokens(6, rng);
  const Matrix<double> before = m.logits(tokens, 1, 6);
  tokens[5] = (tokens[5] + 1) % mora::kVocabSize;
  const Matrix<double> after = m.logits(tokens, 1, 6);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < after.cols(); ++j) CHECK(after(i, j) == before(i, j));
  double moved = 0;
  for (std::size_t j = 0; j < after.cols(); ++j) moved = std::max(moved, std::abs(after(5, j) - before(5, j)));
  CHECK(moved > 0);
}

TEST_CASE("tiny model: freshly attached adapters leave logits unchanged") {
  std::mt19937_64 rng(3);
  auto base = TinyLM<float>::random(small_config(), rng);
  const auto tokens = random_tokens(16, rng);
  const Matrix<float> ref = base.logits(tokens, 2, 8);
  for (OperatorKind op : {OperatorKind::truncation(), OperatorKind::sharing(mora::GroupScheme::Contiguous),
                          OperatorKind::decouple(), OperatorKind::rotation()}) {
    auto m = base;
    m.attach_mora(4, op);
    CHECK(m.has_adapters());
    CHECK(m.logits(tokens, 2, 8) == ref);
  }
  auto l = base;
  l.attach_lora(4, 8.0, rng);
  CHECK(l.logits(tokens, 2, 8) == ref);
}

TEST_CASE("tiny model: out-of-range tokens are rejected") {
  std::mt19937_64 rng(4);
  auto m = TinyLM<float>::random(small_config(), rng);
  const std::vector<int> tokens{1, 2, mora::kVocabSize};
  CHECK_THROWS_AS(m.logits(tokens, 1, 3), mora::Error);
  const std::vector<int> neg{1, -1, 2};
  CHECK_THROWS_AS(m.logits(neg, 1, 3), mora::Error);
  CHECK_THROWS_AS(m.logits(neg, 2, 3), mora::ShapeError);
}

TEST_CASE("tiny model: parameter lists by tuning mode") {
  std::mt19937_64 rng(5);
  auto m = TinyLM<float>::random(small_config(), rng);
  const std::size_t base = m.parameters().size();
  CHECK(base == 1 + 2 * (2 + 7) + 2);
  CHECK(m.trainable(Tuning::Frozen).empty());
  CHECK(m.trainable(Tuning::Adapters).empty());
  CHECK(m.trainable(Tuning::Full).size() == base);
  m.attach_mora(4, OperatorKind::decouple());
  CHECK(m.trainable(Tuning::Adapters).size() == 14);
  m.detach_adapters();
  m.attach_lora(4, 8.0, rng);
  CHECK(m.trainable(Tuning::Adapters).size() == 28);
}

TEST_CASE("tiny model: adapter gradients agree with finite differences") {
  std::mt19937_64 rng(6);
  auto m = TinyLM<double>::random(small_config(), rng);
  m.attach_mora(4, OperatorKind::rotation());
  for (auto& p : m.trainable(Tuning::Adapters)) *p.value = oracle::random_matrix<double>(p.value->rows(), p.value->cols(), rng, 0.1);
  const auto data = mora::generate_kv_pairs(3, 1, 3, 3);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto batch = mora::make_batch(data, idx);
  auto loss_of = [&](std::vector<Matrix<double>>* grads) {
    mora::Tape<double> tape;
    const auto logits = m.forward(tape, batch.inputs, batch.batch, batch.seq, Tuning::Adapters, grads);
    const auto loss = tape.cross_entropy(logits, batch.targets);
    if (grads) tape.backward(loss);
    return tape.value(loss)(0, 0);
  };
  std::vector<Matrix<double>> grads;
  loss_of(&grads);
  auto params = m.trainable(Tuning::Adapters);
  REQUIRE(grads.size() == params.size());
  for (std::size_t i : {std::size_t{0}, std::size_t{5}, std::size_t{13}}) {
    const auto fd = oracle::finite_difference(*params[i].value, [&] { return loss_of(nullptr); }, 1e-6);
    for (std::size_t j = 0; j < fd.size(); ++j) CHECK(grads[i].data()[j] == doctest::Approx(fd.data()[j]).epsilon(1e-5));
  }
}

TEST_CASE("char accuracy: oracle scorer is perfect") {
  const KvDataset data = mora::generate_kv_pairs(200, 11, 8, 8);
  std::map<std::vector<int>, std::vector<int>> table;
  for (const auto& p : data.pairs) table[p.key] = p.value;

  // Reads the key from each row and predicts the next value symbol, using
  // only tokens up to the predicted position.
  mora::NextTokenScorer oracle_scorer = [&](std::span<const int> tokens, std::size_t batch, std::size_t seq) {
    Matrix<float> out(batch * seq, mora::kVocabSize);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::vector<int> key(tokens.begin() + b * seq, tokens.begin() + b * seq + 8);
      const auto& val = table.at(key);
      for (std::size_t t = 8; t < seq; ++t) out(b * seq + t, val[t - 8]) = 1.0f;
    }
    return out;
  };
  CHECK(mora::evaluate_char_accuracy(oracle_scorer, data) == 1.0);
}

TEST_CASE("char accuracy: random model is near chance and order does not matter") {
  const KvDataset data = mora::generate_kv_pairs(400, 21, 8, 8);
  std::mt19937_64 rng(22);
  auto model = TinyLM<float>::random(small_config(), rng);
  const double acc = mora::evaluate_char_accuracy(model, data);
  CHECK(std::abs(acc - 1.0 / 16) < 0.03);

  KvDataset shuffled = data;
  std::shuffle(shuffled.pairs.begin(), shuffled.pairs.end(), rng);
  CHECK(mora::evaluate_char_accuracy(model, shuffled) == acc);
}

TEST_CASE("char accuracy: prediction errors feed back into later positions") {
  // Predicts the previous input token. With teacher forcing this would score
  // the fraction of values with repeated symbols; greedy decoding instead
  // feeds the first guess forward.
  KvDataset d;
  d.key_len = 1;
  d.val_len = 3;
  d.pairs.push_back({{5}, {7, 7, 7}});
  mora::NextTokenScorer echo = [](std::span<const int> tokens, std::size_t batch, std::size_t seq) {
    Matrix<float> out(batch * seq, mora::kVocabSize);
    for (std::size_t i = 0; i < batch * seq; ++i) {
      const int t = tokens[i] < mora::kHexSymbols ? tokens[i] : 7;
      out(i, static_cast<std::size_t>(t)) = 1.0f;
    }
    return out;
  };
  // position after SEP predicts 7, then echoes 7, 7.
  CHECK(mora::evaluate_char_accuracy(echo, d) == 1.0);
  d.pairs[0].value = {7, 3, 3};
  // Teacher forcing would score 2/3 (7 and the echoed 3); greedy scores 1/3.
  CHECK(mora::evaluate_char_accuracy(echo, d) == doctest::Approx(1.0 / 3));
}

TEST_CASE("cached decoding matches the full forward pass") {
  std::mt19937_64 rng(31);
  auto m = TinyLM<double>::random(small_config(), rng);
  m.attach_lora(2, 4.0, rng);
  for (auto& p : m.trainable(Tuning::Adapters)) *p.value = oracle::random_matrix<double>(p.value->rows(), p.value->cols(), rng, 0.3);
  const auto tokens = random_tokens(3 * 10, rng);
  const Matrix<double> full = m.logits(tokens, 3, 10);
  for (std::size_t block : {std::size_t{1}, std::size_t{3}, std::size_t{10}}) {
    CAPTURE(block);
    const Matrix<double> inc = m.incremental_logits(tokens, 3, 10, block);
    for (std::size_t i = 0; i < full.size(); ++i) CHECK(inc.data()[i] == doctest::Approx(full.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("char accuracy: cached greedy decoding agrees with rescoring") {
  std::mt19937_64 rng(32);
  auto model = TinyLM<float>::random(small_config(), rng);
  model.attach_mora(4, OperatorKind::rotation());
  for (auto& p : model.trainable(Tuning::Adapters)) *p.value = oracle::random_matrix<float>(p.value->rows(), p.value->cols(), rng, 0.3);
  const KvDataset data = mora::generate_kv_pairs(150, 33, 8, 8);
  mora::NextTokenScorer rescoring = [&](std::span<const int> tokens, std::size_t batch, std::size_t seq) {
    return model.logits(tokens, batch, seq);
  };
  const double a = mora::evaluate_char_accuracy(rescoring, data);
  const double b = mora::evaluate_char_accuracy(model, data);
  // Rounding differences may flip an occasional near-tie.
  CHECK(std::abs(a - b) <= 3.0 / (150 * 8));
}
