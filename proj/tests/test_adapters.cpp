// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "oracles.hpp"

#include "mora/adapters.hpp"

#include <array>
#include <cmath>

using mora::GroupScheme;
using mora::Matrix;
using mora::MoraAdapter;
using mora::OperatorKind;

namespace {

const std::array<OperatorKind, 5> kAllOperators{OperatorKind::truncation(), OperatorKind::sharing(GroupScheme::Strided),
                                                OperatorKind::sharing(GroupScheme::Contiguous),
                                                OperatorKind::decouple(), OperatorKind::rotation()};

Matrix<double> row_of(std::vector<double> v) {
  const std::size_t n = v.size();
  return Matrix<double>(1, n, std::move(v));
}

std::vector<double> as_vector(const Matrix<double>& m) { return {m.data(), m.data() + m.size()}; }

MoraAdapter<double> random_adapter(std::size_t d, std::size_t k, std::size_t r, OperatorKind op, std::mt19937_64& rng) {
  MoraAdapter<double> a(d, k, r, op);
  a.set_M(oracle::random_matrix<double>(a.r_hat(), a.r_hat(), rng));
  return a;
}

// Group sums following the reshape-and-sum description: pad x to a multiple
// of r_hat, view it as (k'/r_hat, r_hat) and sum rows (type 0) or as
// (r_hat, k'/r_hat) and sum columns (type 1).
std::vector<double> group_sum_oracle(const std::vector<double>& x, std::size_t r_hat, int type) {
  std::vector<double> padded = x;
  while (padded.size() % r_hat) padded.push_back(0);
  const std::size_t w = padded.size() / r_hat;
  std::vector<double> y(r_hat, 0);
  for (std::size_t a = 0; a < (type == 0 ? w : r_hat); ++a)
    for (std::size_t b = 0; b < (type == 0 ? r_hat : w); ++b) {
      if (type == 0)
        y[b] += padded[a * r_hat + b];
      else
        y[a] += padded[a * w + b];
    }
  return y;
}

// repeat (type 0) or repeat-interleave (type 1) by ceil(d / r_hat), then truncate.
std::vector<double> replicate_oracle(const std::vector<double>& y, std::size_t d, int type) {
  const std::size_t times = (d + y.size() - 1) / y.size();
  std::vector<double> out;
  if (type == 0) {
    for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), y.begin(), y.end());
  } else {
    for (double v : y)
      for (std::size_t t = 0; t < times; ++t) out.push_back(v);
  }
  out.resize(d);
  return out;
}

}  // namespace

TEST_CASE("rhat_for: parameter parity values") {
  CHECK(mora::rhat_for(4096, 4096, 8) == 256);
  CHECK(mora::rhat_for(4096, 4096, 128) == 1024);
  CHECK(mora::rhat_for(2, 2, 1) == 2);
  CHECK(mora::rhat_for(128, 128, 8) == 45);
  CHECK(mora::rhat_for(128, 128, 8, OperatorKind::rotation()) == 44);
  CHECK_THROWS_AS(mora::rhat_for(16, 4, 5), mora::Error);
}

TEST_CASE("rhat_for: floor square root bracket holds for random triples") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 5000);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = dim(rng), k = dim(rng);
    const std::size_t r = std::uniform_int_distribution<std::size_t>(1, std::min(d, k))(rng);
    const std::size_t rh = mora::rhat_for(d, k, r);
    CHECK(rh * rh <= (d + k) * r);
    CHECK((rh + 1) * (rh + 1) > (d + k) * r);
    const std::size_t rot = mora::rhat_for(d, k, r, OperatorKind::rotation());
    CHECK(rot % 2 == 0);
    CHECK(rot + 1 >= rh);
  }
}

TEST_CASE("operator tags round-trip") {
  for (const auto& op : kAllOperators) {
    CHECK(OperatorKind::from_tag(op.tag()) == op);
    CHECK(OperatorKind::parse(op.name()) == op);
  }
  CHECK_THROWS_AS(OperatorKind::from_tag(9), mora::Error);
}

TEST_CASE("compress: worked examples") {
  const auto x = row_of({1, 2, 3, 4});
  CHECK(as_vector(mora::compress(x, OperatorKind::truncation(), 2)) == std::vector<double>{1, 2});
  CHECK(as_vector(mora::compress(x, OperatorKind::sharing(GroupScheme::Strided), 2)) == std::vector<double>{4, 6});
  CHECK(as_vector(mora::compress(x, OperatorKind::sharing(GroupScheme::Contiguous), 2)) == std::vector<double>{3, 7});
  CHECK(as_vector(mora::compress(x, OperatorKind::decouple(), 2)) == std::vector<double>{1, 2, 3, 4});

  // Chunk 1 of [0, 0, 1, 0] is [1, 0]; with r_hat = 2, theta = 1 rad.
  const auto rot = mora::compress(row_of({0, 0, 1, 0}), OperatorKind::rotation(), 2);
  REQUIRE(rot.rows() == 2);
  CHECK(rot(0, 0) == 0.0);
  CHECK(rot(1, 0) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(rot(1, 1) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(rot(1, 0) == doctest::Approx(0.5403).epsilon(1e-4));
  CHECK(rot(1, 1) == doctest::Approx(0.8415).epsilon(1e-4));
}

TEST_CASE("compress: sharing matches the group-sum oracle, including padding") {
  std::mt19937_64 rng(12);
  for (std::size_t k : {4u, 7u, 17u, 48u}) {
    for (std::size_t rh : {1u, 2u, 3u, 5u}) {
      if (rh > k) continue;
      const auto x = oracle::random_vector<double>(k, rng);
      for (int type : {0, 1}) {
        const auto op = OperatorKind::sharing(type == 0 ? GroupScheme::Strided : GroupScheme::Contiguous);
        const auto got = as_vector(mora::compress(row_of(x), op, rh));
        const auto want = group_sum_oracle(x, rh, type);
        CHECK(oracle::max_rel_diff(got, want) < 1e-14);
      }
    }
  }
}

TEST_CASE("compress: truncation and sharing reject r_hat > k") {
  const auto x = row_of({1, 2, 3});
  CHECK_THROWS_AS(mora::compress(x, OperatorKind::truncation(), 4), mora::Error);
  CHECK_THROWS_AS(mora::compress(x, OperatorKind::sharing(), 4), mora::Error);
  CHECK_NOTHROW(mora::compress(x, OperatorKind::decouple(), 4));
}

TEST_CASE("decompress: worked examples") {
  const auto y = row_of({5, 6});
  CHECK(as_vector(mora::decompress(y, OperatorKind::truncation(), 2, 4, 1)) == std::vector<double>{5, 6, 0, 0});
  CHECK(as_vector(mora::decompress(y, OperatorKind::sharing(GroupScheme::Strided), 2, 4, 1)) ==
        std::vector<double>{5, 6, 5, 6});
  CHECK(as_vector(mora::decompress(y, OperatorKind::sharing(GroupScheme::Contiguous), 2, 4, 1)) ==
        std::vector<double>{5, 5, 6, 6});
  const Matrix<double> chunks{{1, 2}, {3, 4}};
  CHECK(as_vector(mora::decompress(chunks, OperatorKind::decouple(), 2, 4, 1)) == std::vector<double>{1, 2, 3, 4});
  CHECK(as_vector(mora::decompress(chunks, OperatorKind::rotation(), 2, 3, 1)) == std::vector<double>{1, 2, 3});
}

TEST_CASE("decompress: sharing matches the replication oracle") {
  std::mt19937_64 rng(13);
  for (std::size_t d : {4u, 9u, 33u}) {
    for (std::size_t rh : {2u, 3u, 7u}) {
      const auto y = oracle::random_vector<double>(rh, rng);
      for (int type : {0, 1}) {
        const auto op = OperatorKind::sharing(type == 0 ? GroupScheme::Strided : GroupScheme::Contiguous);
        CHECK(as_vector(mora::decompress(row_of(y), op, rh, d, 1)) == replicate_oracle(y, d, type));
      }
    }
  }
}

TEST_CASE("decompress: shape mismatch is rejected") {
  const Matrix<double> y(3, 2);
  CHECK_THROWS_AS(mora::decompress(y, OperatorKind::sharing(), 2, 4, 2), mora::ShapeError);
  CHECK_THROWS_AS(mora::decompress(y, OperatorKind::decouple(), 2, 4, 2), mora::ShapeError);
  CHECK_THROWS_AS(mora::decompress(y, OperatorKind::decouple(), 3, 4, 3), mora::ShapeError);
}

TEST_CASE("adapter_delta: fresh adapters contribute exactly zero") {
  std::mt19937_64 rng(14);
  for (const auto& op : kAllOperators) {
    MoraAdapter<double> a(33, 17, 1, op);
    const auto x = oracle::random_matrix<double>(5, 17, rng);
    const auto y = mora::adapter_delta(a, x);
    for (double v : y.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("adapter_delta: identity M under strided sharing") {
  MoraAdapter<double> a(4, 4, 1, 2, OperatorKind::sharing(GroupScheme::Strided));
  a.set_M(Matrix<double>::identity(2));
  const std::vector<double> x{1, 2, 3, 4};
  CHECK(mora::adapter_delta(a, std::span<const double>(x)) == std::vector<double>{4, 6, 4, 6});
}

TEST_CASE("expand_delta_w: closed forms") {
  const Matrix<double> m{{1, 2}, {3, 4}};
  MoraAdapter<double> shared(4, 4, 1, 2, OperatorKind::sharing(GroupScheme::Strided));
  shared.set_M(m);
  const auto ws = mora::expand_delta_w(shared);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(ws(i, j) == m(i % 2, j % 2));

  MoraAdapter<double> decoupled(4, 4, 1, 2, OperatorKind::decouple());
  decoupled.set_M(m);
  const Matrix<double> block_diag{{1, 2, 0, 0}, {3, 4, 0, 0}, {0, 0, 1, 2}, {0, 0, 3, 4}};
  CHECK(mora::expand_delta_w(decoupled) == block_diag);

  MoraAdapter<double> truncated(4, 4, 1, 2, OperatorKind::truncation());
  truncated.set_M(m);
  const Matrix<double> corner{{1, 2, 0, 0}, {3, 4, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}};
  CHECK(mora::expand_delta_w(truncated) == corner);

  // Rotation: block 0 is M, block 1 is M R_1 with theta = 1.
  MoraAdapter<double> rotated(4, 4, 1, 2, OperatorKind::rotation());
  rotated.set_M(m);
  const auto wr = mora::expand_delta_w(rotated);
  const double c = std::cos(1.0), s = std::sin(1.0);
  CHECK(wr(0, 0) == 1.0);
  CHECK(wr(1, 1) == 4.0);
  CHECK(wr(2, 2) == doctest::Approx(1 * c + 2 * s));
  CHECK(wr(2, 3) == doctest::Approx(-1 * s + 2 * c));
  CHECK(wr(3, 2) == doctest::Approx(3 * c + 4 * s));
  CHECK(wr(3, 3) == doctest::Approx(-3 * s + 4 * c));
  CHECK(wr(0, 2) == 0.0);
}

TEST_CASE("expand_delta_w: columns equal adapter_delta on basis vectors") {
  std::mt19937_64 rng(15);
  for (auto [d, k, r] : {std::tuple{16u, 16u, 1u}, {33u, 17u, 1u}, {17u, 33u, 2u}, {64u, 48u, 2u}}) {
    for (const auto& op : kAllOperators) {
      const auto a = random_adapter(d, k, r, op, rng);
      const auto w = mora::expand_delta_w(a);
      const auto basis = Matrix<double>::identity(k);
      const auto cols = mora::adapter_delta(a, basis);  // row j = delta(e_j)
      CHECK(mora::max_abs(mora::subtract(cols, mora::transpose(w))) < 1e-12);
    }
  }
}

TEST_CASE("losslessness: adapter_delta equals the expanded product") {
  std::mt19937_64 rng(16);
  for (auto [d, k] : {std::pair{16u, 16u}, {64u, 48u}, {33u, 17u}}) {
    for (const auto& op : kAllOperators) {
      for (int trial = 0; trial < 25; ++trial) {
        const auto a = random_adapter(d, k, 1 + trial % 3, op, rng);
        const auto x = oracle::random_vector<double>(k, rng);
        const auto got = mora::adapter_delta(a, std::span<const double>(x));
        const auto want = oracle::naive_matvec(mora::expand_delta_w(a), x);
        CHECK(oracle::max_rel_diff(got, want) < 1e-9);
      }
    }
  }
}

TEST_CASE("adjoint pairs pass the dot-product test") {
  std::mt19937_64 rng(17);
  for (auto [d, k] : {std::pair{16u, 16u}, {33u, 17u}, {17u, 40u}}) {
    for (const auto& op : kAllOperators) {
      const auto a = random_adapter(d, k, 1, op, rng);
      const std::size_t rows = a.chunks();
      const auto y = oracle::random_matrix<double>(rows, a.r_hat(), rng);
      const auto u = oracle::random_matrix<double>(1, d, rng);
      const auto dy = mora::decompress(y, op, a.r_hat(), d, 1);
      const auto du = mora::adjoint_decompress(u, op, a.r_hat(), rows);
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < d; ++i) lhs += dy.data()[i] * u.data()[i];
      for (std::size_t i = 0; i < y.size(); ++i) rhs += y.data()[i] * du.data()[i];
      CHECK(std::abs(lhs - rhs) < 1e-10 * (1 + std::abs(lhs)));

      const auto x = oracle::random_matrix<double>(1, k, rng);
      const auto g = oracle::random_matrix<double>(rows, a.r_hat(), rng);
      const auto cx = mora::compress(x, op, a.r_hat());
      const auto ag = mora::adjoint_compress(g, op, a.r_hat(), k, 1);
      lhs = rhs = 0;
      for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * g.data()[i];
      for (std::size_t i = 0; i < k; ++i) rhs += x.data()[i] * ag.data()[i];
      CHECK(std::abs(lhs - rhs) < 1e-10 * (1 + std::abs(lhs)));
    }
  }
}

TEST_CASE("merge_into: fresh adapter leaves the base bit-identical, merge is reversible") {
  std::mt19937_64 rng(18);
  const auto w0 = oracle::random_matrix<double>(33, 17, rng);
  for (const auto& op : kAllOperators) {
    MoraAdapter<double> fresh(33, 17, 1, op);
    CHECK(mora::merge_into(w0, fresh) == w0);

    const auto a = random_adapter(33, 17, 1, op, rng);
    const auto merged = mora::merge_into(w0, a);
    const auto x = oracle::random_vector<double>(17, rng);
    auto want = oracle::naive_matvec(w0, x);
    const auto delta = mora::adapter_delta(a, std::span<const double>(x));
    for (std::size_t i = 0; i < want.size(); ++i) want[i] += delta[i];
    CHECK(oracle::max_rel_diff(oracle::naive_matvec(merged, x), want) < 1e-9);
    CHECK(mora::max_abs(mora::subtract(mora::subtract(merged, mora::expand_delta_w(a)), w0)) < 1e-12);
  }
  CHECK_THROWS_AS(mora::merge_into(Matrix<double>(3, 3), MoraAdapter<double>(4, 4, 1, OperatorKind::decouple())),
                  mora::ShapeError);
}

TEST_CASE("merge_into: float merge preserves forward passes within 1e-5") {
  std::mt19937_64 rng(19);
  for (const auto& op : kAllOperators) {
    const auto w0 = oracle::random_matrix<float>(64, 48, rng);
    MoraAdapter<float> a(64, 48, 2, op);
    a.set_M(oracle::random_matrix<float>(a.r_hat(), a.r_hat(), rng, 0.1));
    const auto x = oracle::random_matrix<float>(8, 48, rng);
    const auto merged_out = mora::matmul_nt(x, mora::merge_into(w0, a));
    const auto split_out = mora::add(mora::matmul_nt(x, w0), mora::adapter_delta(a, x));
    CHECK(mora::max_abs(mora::subtract(merged_out, split_out)) <= 1e-5f * (1 + mora::max_abs(split_out)));
  }
}

TEST_CASE("rank ceilings") {
  std::mt19937_64 rng(20);
  for (const auto& op : kAllOperators) {
    const auto a = random_adapter(32, 32, 1, op, rng);
    const auto rank = mora::numerical_rank(mora::expand_delta_w(a), 1e-8);
    const auto rank_m = mora::numerical_rank(a.M(), 1e-8);
    if (op.type == mora::OperatorType::Sharing || op.type == mora::OperatorType::Truncation) {
      CHECK(rank == rank_m);
    }
    // Block-diagonal with 4 full copies of M.
    if (op.type == mora::OperatorType::Decouple) CHECK(rank == 4 * rank_m);
    CHECK(rank <= 32);
  }
  // Rank-deficient M keeps the sharing expansion at rank(M).
  MoraAdapter<double> a(32, 32, 1, OperatorKind::sharing());
  a.set_M(mora::matmul(oracle::random_matrix<double>(8, 3, rng), oracle::random_matrix<double>(3, 8, rng)));
  CHECK(mora::numerical_rank(mora::expand_delta_w(a), 1e-8) == 3);
}

TEST_CASE("rotation: distinct chunks differ, chunk zero is untouched") {
  std::mt19937_64 rng(21);
  const auto x = oracle::random_matrix<double>(1, 40, rng);
  const auto c = mora::compress(x, OperatorKind::rotation(), 8);
  REQUIRE(c.rows() == 5);
  for (std::size_t j = 0; j < 8; ++j) CHECK(c(0, j) == x(0, j));
  // Feeding the same chunk at every position shows the rotation alone separates them.
  Matrix<double> tiled(1, 40);
  for (std::size_t i = 0; i < 40; ++i) tiled(0, i) = x(0, i % 8);
  const auto ct = mora::compress(tiled, OperatorKind::rotation(), 8);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t i2 = i + 1; i2 < 5; ++i2) {
      double diff = 0;
      for (std::size_t j = 0; j < 8; ++j) diff = std::max(diff, std::abs(ct(i, j) - ct(i2, j)));
      CHECK(diff > 1e-6);
    }
}

TEST_CASE("grad_M: worked example and finite differences") {
  MoraAdapter<double> a(4, 4, 1, 2, OperatorKind::sharing(GroupScheme::Strided));
  const auto g = mora::grad_M(a, row_of({1, 2, 3, 4}), row_of({1, 0, 0, 0}));
  CHECK(g == Matrix<double>{{4, 6}, {0, 0}});
  CHECK(mora::grad_M(a, row_of({1, 2, 3, 4}), row_of({0, 0, 0, 0})) == Matrix<double>(2, 2));

  std::mt19937_64 rng(22);
  for (const auto& op : kAllOperators) {
    auto ad = random_adapter(33, 17, 1, op, rng);
    const auto x = oracle::random_matrix<double>(3, 17, rng);
    const auto u = oracle::random_matrix<double>(3, 33, rng);
    auto loss = [&] {
      const auto y = mora::adapter_delta(ad, x);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * u.data()[i];
      return s;
    };
    const auto analytic = mora::grad_M(ad, x, u);
    const auto numeric = oracle::finite_difference(ad.M(), loss, 1e-5);
    for (std::size_t i = 0; i < analytic.size(); ++i)
      CHECK(std::abs(analytic.data()[i] - numeric.data()[i]) <= 1e-4 * (1 + std::abs(numeric.data()[i])));
  }
}

TEST_CASE("grad_x: matches explicit transpose and finite differences") {
  std::mt19937_64 rng(23);
  for (const auto& op : kAllOperators) {
    const auto ad = random_adapter(33, 17, 1, op, rng);
    const auto u = oracle::random_matrix<double>(1, 33, rng);
    const auto gx = mora::grad_x(ad, u);
    const auto uv = std::vector<double>(u.data(), u.data() + 33);
    const auto want = oracle::naive_matvec(mora::transpose(mora::expand_delta_w(ad)), uv);
    CHECK(oracle::max_rel_diff(std::vector<double>(gx.data(), gx.data() + 17), want) < 1e-9);

    auto x = oracle::random_matrix<double>(1, 17, rng);
    auto loss = [&] {
      const auto y = mora::adapter_delta(ad, x);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * u.data()[i];
      return s;
    };
    const auto numeric = oracle::finite_difference(x, loss, 1e-5);
    for (std::size_t i = 0; i < 17; ++i)
      CHECK(std::abs(gx.data()[i] - numeric.data()[i]) <= 1e-4 * (1 + std::abs(numeric.data()[i])));
  }
  MoraAdapter<double> zero(8, 8, 1, OperatorKind::decouple());
  const auto gz = mora::grad_x(zero, Matrix<double>(2, 8, 1.0));
  for (double v : gz.values()) CHECK(v == 0.0);
}

TEST_CASE("LoRA: zero start, associativity and rank ceiling") {
  std::mt19937_64 rng(24);
  mora::LoraAdapter<double> fresh(32, 24, 4, 8.0, rng);
  const auto x = oracle::random_matrix<double>(3, 24, rng);
  const auto fresh_out = mora::lora_delta(fresh, x);
  for (double v : fresh_out.values()) CHECK(v == 0.0);
  CHECK(fresh.scaling() == 2.0);

  for (int trial = 0; trial < 20; ++trial) {
    mora::LoraAdapter<double> a(32, 24, 4, 8.0, oracle::random_matrix<double>(4, 24, rng),
                                oracle::random_matrix<double>(32, 4, rng));
    const auto xv = oracle::random_vector<double>(24, rng);
    const auto got = mora::lora_delta(a, std::span<const double>(xv));
    const auto want = oracle::naive_matvec(mora::scale(oracle::naive_matmul(a.B(), a.A()), 2.0), xv);
    CHECK(oracle::max_rel_diff(got, want) < 1e-9);
    CHECK(mora::numerical_rank(mora::expand_delta_w(a), 1e-8) <= 4);
  }
  CHECK_THROWS_AS(mora::lora_delta(fresh, Matrix<double>(1, 5)), mora::ShapeError);
}

TEST_CASE("LoRA: gradients match finite differences") {
  std::mt19937_64 rng(25);
  mora::LoraAdapter<double> a(12, 10, 3, 6.0, oracle::random_matrix<double>(3, 10, rng),
                              oracle::random_matrix<double>(12, 3, rng));
  auto x = oracle::random_matrix<double>(4, 10, rng);
  const auto u = oracle::random_matrix<double>(4, 12, rng);
  auto loss = [&] {
    const auto y = mora::lora_delta(a, x);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * u.data()[i];
    return s;
  };
  const auto g = mora::lora_grads(a, x, u);
  auto close = [](const Matrix<double>& p, const Matrix<double>& q) {
    return mora::max_abs(mora::subtract(p, q)) < 1e-7 * (1 + mora::max_abs(q));
  };
  CHECK(close(g.a, oracle::finite_difference(a.A(), loss, 1e-5)));
  CHECK(close(g.b, oracle::finite_difference(a.B(), loss, 1e-5)));
  CHECK(close(g.x, oracle::finite_difference(x, loss, 1e-5)));
}
