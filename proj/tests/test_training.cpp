// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "oracles.hpp"

#include "mora/training.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

using mora::AdamW;
using mora::AdapterKind;
using mora::LinearFamily;
using mora::Matrix;
using mora::ModelConfig;
using mora::OperatorKind;
using mora::Schedule;
using mora::ScheduleShape;
using mora::TinyLM;
using mora::TrainConfig;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 24;
  return c;
}

double max_rel(const Matrix<float>& a, const Matrix<float>& b) {
  double scale = 0, diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(static_cast<double>(b.data()[i])));
    diff = std::max(diff, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return diff / std::max(scale, 1e-30);
}

std::vector<int> tokens_for(std::size_t n) {
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<int>((i * 7 + 3) % mora::kVocabSize);
  return t;
}

}  // namespace

TEST_CASE("adamw: zero gradient without decay leaves parameters unchanged") {
  std::mt19937_64 rng(1);
  Matrix<double> p = oracle::random_matrix<double>(3, 3, rng);
  const Matrix<double> before = p;
  AdamW<double> opt;
  std::vector<Matrix<double>*> ps{&p};
  for (int i = 0; i < 5; ++i) opt.step(ps, {Matrix<double>(3, 3)}, {true}, 0.1);
  CHECK(p == before);
}

TEST_CASE("adamw: constant gradient moves against its sign by about lr per step") {
  Matrix<double> p(1, 1, 0.0);
  AdamW<double> opt;
  std::vector<Matrix<double>*> ps{&p};
  const double lr = 0.01;
  double prev = 0;
  for (int i = 0; i < 200; ++i) {
    opt.step(ps, {Matrix<double>(1, 1, 2.5)}, {false}, lr);
    const double moved = prev - p(0, 0);
    CHECK(moved > 0);
    CHECK(moved == doctest::Approx(lr).epsilon(1e-3));
    prev = p(0, 0);
  }
}

TEST_CASE("adamw: trajectory on a quadratic matches a reference update") {
  // f(p) = 0.5 * sum(c .* p^2), gradient c .* p.
  const double lr = 0.05, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const std::vector<double> c{1.0, 3.0, 0.5, 10.0};
  Matrix<double> p(2, 2, std::vector<double>{1.0, -2.0, 0.5, 0.25});
  std::vector<double> ref(p.data(), p.data() + 4), m(4, 0.0), v(4, 0.0);
  AdamW<double> opt({b1, b2, eps, wd});
  std::vector<Matrix<double>*> ps{&p};
  for (int t = 1; t <= 10; ++t) {
    Matrix<double> g(2, 2);
    for (std::size_t i = 0; i < 4; ++i) g.data()[i] = c[i] * p.data()[i];
    opt.step(ps, {g}, {true}, lr);
    for (std::size_t i = 0; i < 4; ++i) {
      const double gi = c[i] * ref[i];
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      ref[i] = ref[i] * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
    }
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("adamw: reset clears moments and step counters") {
  Matrix<double> a(1, 2, 1.0), b(1, 2, 1.0);
  AdamW<double> opt;
  std::vector<Matrix<double>*> ps{&a, &b};
  opt.step(ps, {Matrix<double>(1, 2, 1.0), Matrix<double>(1, 2, 1.0)}, {false, false}, 0.1);
  opt.step(ps, {Matrix<double>(1, 2, 1.0), Matrix<double>(1, 2, 1.0)}, {false, false}, 0.1);
  CHECK(opt.steps(0) == 2);
  opt.reset(0);
  CHECK(opt.steps(0) == 0);
  CHECK(opt.steps(1) == 2);
  CHECK(mora::max_abs(opt.first_moment(0)) == 0.0);
  CHECK(mora::max_abs(opt.second_moment(0)) == 0.0);
  opt.reset();
  CHECK(opt.steps(1) == 0);
}

TEST_CASE("adamw: weight decay applies only to flagged parameters") {
  Matrix<double> a(1, 1, 1.0), b(1, 1, 1.0);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.5});
  std::vector<Matrix<double>*> ps{&a, &b};
  opt.step(ps, {Matrix<double>(1, 1), Matrix<double>(1, 1)}, {true, false}, 0.1);
  CHECK(a(0, 0) == doctest::Approx(0.95));
  CHECK(b(0, 0) == 1.0);
}

TEST_CASE("adamw: non-finite gradient is rejected") {
  Matrix<float> a(1, 1, 1.0f);
  AdamW<float> opt;
  std::vector<Matrix<float>*> ps{&a};
  CHECK_THROWS_AS(opt.step(ps, {Matrix<float>(1, 1, std::nanf(""))}, {false}, 0.1), mora::NumericError);
}

TEST_CASE("schedule: warmup, cosine floor and jagged restarts") {
  Schedule s;
  s.shape = ScheduleShape::Cosine;
  s.base_lr = 1.0;
  s.total = 4000;
  s.warmup = 100;
  s.restart_warmup = 50;
  s.restarts = {2000};
  CHECK(s.lr_at(0) == 0.0);
  CHECK(s.lr_at(50) == doctest::Approx(0.5 * 0.5 * (1 + std::cos(std::numbers::pi * 50 / 4000))));
  CHECK(s.lr_at(4000) == doctest::Approx(0.0).epsilon(1e-12));

  Schedule plain = s;
  plain.restarts.clear();
  CHECK(s.lr_at(2000) == 0.0);
  CHECK(s.lr_at(2025) == doctest::Approx(0.5 * plain.lr_at(2025)));
  for (std::size_t t = 0; t < 50; ++t) CHECK(s.lr_at(2000 + t) == doctest::Approx(t / 50.0 * plain.lr_at(2000 + t)));
  CHECK(s.lr_at(2050) == plain.lr_at(2050));

  // Continuous away from restart marks: no jump larger than the slope bound.
  for (std::size_t t = 101; t < 4000; ++t) {
    CHECK(s.lr_at(t) >= 0.0);
    if (t == 2000) continue;
    CHECK(std::abs(s.lr_at(t) - s.lr_at(t - 1)) <= 1.0 / 50 + 1e-12);
  }
}

TEST_CASE("schedule: constant and linear shapes") {
  Schedule s;
  s.base_lr = 2.0;
  s.total = 10;
  CHECK(s.lr_at(7) == 2.0);
  s.shape = ScheduleShape::Linear;
  CHECK(s.lr_at(5) == doctest::Approx(1.0));
  CHECK(mora::parse_schedule("cosine") == ScheduleShape::Cosine);
  CHECK_THROWS_AS(mora::parse_schedule("step"), mora::Error);
}

TEST_CASE("train config: merge marks follow the cadence") {
  TrainConfig c;
  c.steps = 2000;
  c.merge_every = 500;
  CHECK(c.make_schedule().restarts == std::vector<std::size_t>{500, 1000, 1500});
  c.kind = AdapterKind::Full;
  CHECK_THROWS_AS(c.validate(), mora::Error);
  c.kind = AdapterKind::Mora;
  c.batch = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("train.batch"), mora::Error);
}

TEST_CASE("merge_and_reinit preserves the function and resets adapters") {
  std::mt19937_64 rng(2);
  const auto tokens = tokens_for(24);
  SUBCASE("ReMoRA flips the sharing scheme") {
    auto m = TinyLM<float>::random(small_config(), rng);
    m.attach_mora(4, OperatorKind::sharing(mora::GroupScheme::Strided));
    for (auto& p : m.trainable(mora::Tuning::Adapters))
      *p.value = oracle::random_matrix<float>(p.value->rows(), p.value->cols(), rng, 0.2);
    const Matrix<float> before = m.logits(tokens, 2, 12);
    const Matrix<float> expected_delta = mora::expand_delta_w(std::get<mora::MoraAdapter<float>>(m.slot(1, LinearFamily::Up).adapter));
    mora::merge_and_reinit(m, mora::MergeMode::ReMoRA, rng, 0.5);
    CHECK(max_rel(m.logits(tokens, 2, 12), before) < 1e-5);
    const auto& a = std::get<mora::MoraAdapter<float>>(m.slot(1, LinearFamily::Up).adapter);
    CHECK(mora::max_abs(a.M()) == 0.0f);
    CHECK(a.op().scheme == mora::GroupScheme::Contiguous);
    CHECK(m.slot(1, LinearFamily::Up).merged_delta == expected_delta);
    CHECK(m.merge_cycles == 1);
    CHECK_THROWS_AS(mora::merge_and_reinit(m, mora::MergeMode::ReLoRA, rng, 0.5), mora::Error);
  }
  SUBCASE("ReLoRA resamples A and zeroes B") {
    auto m = TinyLM<float>::random(small_config(), rng);
    m.attach_lora(4, 8.0, rng, 0.5);
    for (auto& p : m.trainable(mora::Tuning::Adapters))
      *p.value = oracle::random_matrix<float>(p.value->rows(), p.value->cols(), rng, 0.2);
    const Matrix<float> before = m.logits(tokens, 2, 12);
    const Matrix<float> old_a = std::get<mora::LoraAdapter<float>>(m.slot(0, LinearFamily::Q).adapter).A();
    mora::merge_and_reinit(m, mora::MergeMode::ReLoRA, rng, 0.5);
    CHECK(max_rel(m.logits(tokens, 2, 12), before) < 1e-5);
    const auto& a = std::get<mora::LoraAdapter<float>>(m.slot(0, LinearFamily::Q).adapter);
    CHECK(mora::max_abs(a.B()) == 0.0f);
    CHECK_FALSE(a.A() == old_a);
  }
  SUBCASE("exported models refuse further merges") {
    auto m = TinyLM<float>::random(small_config(), rng);
    m.attach_mora(4, OperatorKind::decouple());
    mora::merge_for_export(m);
    CHECK(m.exported);
    CHECK_FALSE(m.has_adapters());
    CHECK_THROWS_AS(mora::merge_and_reinit(m, mora::MergeMode::ReMoRA, rng, 0.5), mora::Error);
    CHECK_THROWS_AS(mora::merge_for_export(m), mora::Error);
  }
}

TEST_CASE("remora: flipping the scheme grows the rank of the cumulative update") {
  std::mt19937_64 rng(3);
  std::size_t grew = 0, stayed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    mora::MoraAdapter<double> a(32, 32, 1, 4, OperatorKind::sharing(mora::GroupScheme::Strided));
    a.set_M(oracle::random_matrix<double>(4, 4, rng));
    Matrix<double> flip = mora::expand_delta_w(a), same = flip;
    const Matrix<double> m2 = oracle::random_matrix<double>(4, 4, rng);
    mora::MoraAdapter<double> b = a;
    b.set_M(m2);
    mora::axpy(1.0, mora::expand_delta_w(b), same);
    b.set_op(OperatorKind::sharing(mora::GroupScheme::Contiguous));
    mora::axpy(1.0, mora::expand_delta_w(b), flip);
    grew += mora::numerical_rank(flip, 1e-8) > 4;
    stayed += mora::numerical_rank(same, 1e-8) <= 4;
  }
  CHECK(grew == 20);
  CHECK(stayed == 20);
}

TEST_CASE("train: deterministic, freezes the base, records merges") {
  std::mt19937_64 rng(4);
  const auto base = TinyLM<float>::random(small_config(), rng);
  const auto data = mora::generate_kv_pairs(12, 5, 4, 4);
  TrainConfig cfg;
  cfg.kind = AdapterKind::Mora;
  cfg.r = 2;
  cfg.op = OperatorKind::sharing();
  cfg.steps = 20;
  cfg.batch = 4;
  cfg.eval_every = 10;
  cfg.seed = 9;

  auto run = [&](const TrainConfig& c, TinyLM<float>& m) {
    std::mt19937_64 r(c.seed);
    mora::attach_adapters(m, c, r);
    return mora::train(c, m, data);
  };
  auto m1 = base, m2 = base;
  const auto r1 = run(cfg, m1);
  const auto r2 = run(cfg, m2);
  std::ostringstream a, b;
  mora::write_metrics_csv(a, r1.rows);
  mora::write_metrics_csv(b, r2.rows);
  CHECK(a.str() == b.str());
  CHECK(a.str().rfind("step,lr,train_loss,eval_accuracy,merge_flag\n", 0) == 0);
  CHECK(r1.rows.size() == 20);
  CHECK(r1.rows[9].eval_accuracy.has_value());
  CHECK_FALSE(r1.rows[8].eval_accuracy.has_value());
  for (std::size_t l = 0; l < 2; ++l)
    for (LinearFamily f : mora::kAllFamilies) CHECK(m1.weight(l, f) == base.weight(l, f));
  CHECK(m1.embed == base.embed);
  CHECK(r1.rows.back().train_loss < r1.rows.front().train_loss);

  cfg.merge_every = 5;
  auto m3 = base;
  const auto r3 = run(cfg, m3);
  std::size_t merges = 0;
  for (const auto& row : r3.rows) {
    if (row.merge) {
      ++merges;
      CHECK(row.lr == 0.0);
    }
  }
  CHECK(merges == 3);
  CHECK(m3.merge_cycles == 3);
}

TEST_CASE("train: zero learning rate keeps the loss constant") {
  std::mt19937_64 rng(6);
  auto m = TinyLM<float>::random(small_config(), rng);
  const auto data = mora::generate_kv_pairs(1, 5, 4, 4);
  TrainConfig cfg;
  cfg.kind = AdapterKind::Lora;
  cfg.r = 2;
  cfg.lr = 0;
  cfg.steps = 5;
  cfg.batch = 1;
  cfg.eval_every = 0;
  mora::attach_adapters(m, cfg, rng);
  const auto res = mora::train(cfg, m, data);
  for (const auto& row : res.rows) CHECK(row.train_loss == res.rows.front().train_loss);
}

TEST_CASE("train: zero steps produce no rows and leave adapters at their initial values") {
  std::mt19937_64 rng(7);
  auto m = TinyLM<float>::random(small_config(), rng);
  const auto data = mora::generate_kv_pairs(4, 5, 4, 4);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.r = 2;
  mora::attach_adapters(m, cfg, rng);
  const auto res = mora::train(cfg, m, data);
  CHECK(res.rows.empty());
  for (auto& p : m.trainable(mora::Tuning::Adapters)) CHECK(mora::max_abs(*p.value) == 0.0f);
}

TEST_CASE("train: full tuning memorizes a ten-pair dataset") {
  std::mt19937_64 rng(8);
  auto m = TinyLM<float>::random(small_config(), rng);
  const auto data = mora::generate_kv_pairs(10, 5, 4, 4);
  TrainConfig cfg;
  cfg.kind = AdapterKind::Full;
  cfg.lr = 1e-2;
  cfg.steps = 400;
  cfg.batch = 10;
  cfg.eval_every = 20;
  cfg.target_accuracy = 1.0;
  cfg.stop_at_target = true;
  const auto res = mora::train(cfg, m, data);
  REQUIRE(res.steps_to_target.has_value());
  CHECK(mora::evaluate_char_accuracy(m, data) == 1.0);
}

TEST_CASE("parameter parity: MoRA and LoRA budgets differ by at most 2 r_hat + 1") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> dim(8, 300);
  for (int i = 0; i < 200; ++i) {
    const std::size_t d = dim(rng), k = dim(rng);
    std::uniform_int_distribution<std::size_t> rank(1, std::min(d, k));
    const std::size_t r = rank(rng);
    const std::size_t rh = mora::rhat_for(d, k, r);
    const std::size_t lora = (d + k) * r;
    CHECK(lora - rh * rh <= 2 * rh + 1);
  }
}
