// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/verify.hpp"

#include "fault.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace mora {

namespace {

constexpr std::array<std::pair<std::size_t, std::size_t>, 3> kLosslessShapes{{{16, 16}, {64, 48}, {33, 17}}};

template <typename T>
Matrix<T> uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix<T> m(rows, cols);
  for (auto& v : m.values()) v = static_cast<T>(u(rng));
  return m;
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Ranks r for which an adapter of this shape and operator can be built.
std::vector<std::size_t> valid_ranks(std::size_t d, std::size_t k, OperatorKind op) {
  std::vector<std::size_t> out;
  for (std::size_t r = 1; r <= std::min(d, k); ++r) {
    try {
      MoraAdapter<double> probe(d, k, r, op);
      out.push_back(r);
    } catch (const Error&) {
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string dump(const Matrix<T>& m) {
  std::string s = "[";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    s += i ? "; " : "";
    for (std::size_t j = 0; j < m.cols(); ++j) s += (j ? " " : "") + fmt(static_cast<double>(m(i, j)));
  }
  return s + "]";
}

}  // namespace

std::size_t occupied_groups(std::size_t n, std::size_t r_hat, GroupScheme scheme) {
  if (scheme == GroupScheme::Strided) return std::min(n, r_hat);
  const std::size_t block = (n + r_hat - 1) / r_hat;
  return (n + block - 1) / block;
}

namespace {

SuiteResult start(std::string name, std::uint64_t seed) {
  SuiteResult r;
  r.name = std::move(name);
  r.seed = seed;
  return r;
}

void record(SuiteResult& res, double err, bool failed, const std::function<std::string()>& describe) {
  ++res.cases;
  if (std::isfinite(err)) res.worst = std::max(res.worst, err);
  else res.worst = std::numeric_limits<double>::infinity();
  if (!failed) return;
  ++res.failures;
  if (res.counterexample.empty()) res.counterexample = describe();
}

}  // namespace

SuiteResult verify_losslessness(std::uint64_t seed, std::size_t trials, double tolerance) {
  SuiteResult res = start("losslessness", seed);
  res.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  for (const auto& [d, k] : kLosslessShapes)
    for (const auto& op : kAllOperators) {
      const auto ranks = valid_ranks(d, k, op);
      for (std::size_t t = 0; t < trials; ++t) {
        MoraAdapter<double> a(d, k, ranks[pick(rng, 0, ranks.size() - 1)], op);
        a.set_M(uniform<double>(a.r_hat(), a.r_hat(), rng));
        const Matrix<double> x = uniform<double>(1, k, rng);
        const Matrix<double> got = adapter_delta(a, x);
        const Matrix<double> want = matmul_nt(x, expand_delta_w(a));
        double err = 0;
        std::size_t at = 0;
        for (std::size_t i = 0; i < d; ++i) {
          const double e = std::abs(got(0, i) - want(0, i)) / (1.0 + std::abs(want(0, i)));
          if (!(e <= err)) {
            err = e;
            at = i;
          }
        }
        record(res, err, !(err < tolerance), [&] {
          return "operator " + op.name() + ", d=" + std::to_string(d) + " k=" + std::to_string(k) +
                 " r=" + std::to_string(a.r()) + " r_hat=" + std::to_string(a.r_hat()) + ", trial " +
                 std::to_string(t) + ": coordinate " + std::to_string(at) + " delta " + fmt(got(0, at)) +
                 " vs dW x " + fmt(want(0, at)) + "\n  x = " + dump(x) + "\n  M = " + dump(a.M());
        });
      }
    }
  return res;
}

SuiteResult verify_adjoints(std::uint64_t seed, std::size_t trials, double tolerance) {
  SuiteResult res = start("adjoints", seed);
  res.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  const std::array<std::pair<std::size_t, std::size_t>, 3> shapes{{{16, 16}, {33, 17}, {17, 40}}};
  for (const auto& [d, k] : shapes)
    for (const auto& op : kAllOperators) {
      const auto ranks = valid_ranks(d, k, op);
      for (std::size_t t = 0; t < trials; ++t) {
        const MoraAdapter<double> a(d, k, ranks[pick(rng, 0, ranks.size() - 1)], op);
        const std::size_t rows = a.chunks();
        const auto y = uniform<double>(rows, a.r_hat(), rng);
        const auto u = uniform<double>(1, d, rng);
        const auto dy = decompress(y, op, a.r_hat(), d, 1);
        const auto du = adjoint_decompress(u, op, a.r_hat(), rows);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < d; ++i) lhs += dy.data()[i] * u.data()[i];
        for (std::size_t i = 0; i < y.size(); ++i) rhs += y.data()[i] * du.data()[i];
        double err = std::abs(lhs - rhs) / (1 + std::abs(lhs));

        const auto x = uniform<double>(1, k, rng);
        const auto g = uniform<double>(rows, a.r_hat(), rng);
        const auto cx = compress(x, op, a.r_hat());
        const auto ag = adjoint_compress(g, op, a.r_hat(), k, 1);
        double lhs2 = 0, rhs2 = 0;
        for (std::size_t i = 0; i < cx.size(); ++i) lhs2 += cx.data()[i] * g.data()[i];
        for (std::size_t i = 0; i < k; ++i) rhs2 += x.data()[i] * ag.data()[i];
        err = std::max(err, std::abs(lhs2 - rhs2) / (1 + std::abs(lhs2)));
        record(res, err, !(err < tolerance), [&] {
          return "operator " + op.name() + ", d=" + std::to_string(d) + " k=" + std::to_string(k) +
                 " r_hat=" + std::to_string(a.r_hat()) + ": <decompress y, u> " + fmt(lhs) + " vs <y, adj u> " +
                 fmt(rhs) + ", <compress x, g> " + fmt(lhs2) + " vs <x, adj g> " + fmt(rhs2);
        });
      }
    }
  return res;
}

SuiteResult verify_parity(std::uint64_t seed, std::size_t triples) {
  SuiteResult res = start("parity", seed);
  std::mt19937_64 rng(seed);
  auto check = [&](std::size_t d, std::size_t k, std::size_t r) {
    const std::size_t rh = rhat_for(d, k, r);
    const std::size_t rot = rhat_for(d, k, r, OperatorKind::rotation());
    const std::size_t budget = (d + k) * r;
    const bool ok = rh * rh <= budget && budget < (rh + 1) * (rh + 1) && rot % 2 == 0 && (rot == rh || rot + 1 == rh);
    record(res, ok ? 0.0 : 1.0, !ok, [&] {
      return "d=" + std::to_string(d) + " k=" + std::to_string(k) + " r=" + std::to_string(r) + ": r_hat " +
             std::to_string(rh) + " (rotation " + std::to_string(rot) + ") for budget " + std::to_string(budget);
    });
  };
  for (std::size_t t = 0; t < triples; ++t) {
    const std::size_t d = pick(rng, 1, 8192), k = pick(rng, 1, 8192);
    check(d, k, pick(rng, 1, std::min(d, k)));
  }
  for (const auto& [r, want] : {std::pair<std::size_t, std::size_t>{8, 256}, {128, 1024}}) {
    const std::size_t got = rhat_for(4096, 4096, r);
    record(res, got == want ? 0.0 : 1.0, got != want, [&, r = r, want = want] {
      return "r_hat(4096, 4096, " + std::to_string(r) + ") = " + std::to_string(got) + ", expected " +
             std::to_string(want);
    });
  }
  res.worst = static_cast<double>(res.failures);
  return res;
}

SuiteResult verify_rank_ceilings(std::uint64_t seed, std::size_t trials) {
  SuiteResult res = start("rank-ceilings", seed);
  std::mt19937_64 rng(seed);
  auto fail_if = [&](bool bad, const std::string& what) {
    record(res, 0.0, bad, [&] { return what; });
  };
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = pick(rng, 8, 48), k = pick(rng, 8, 48);
    const std::size_t r = pick(rng, 1, std::min(d, k) / 2);
    LoraAdapter<double> lora(d, k, r, 2.0 * static_cast<double>(r), uniform<double>(r, k, rng),
                             uniform<double>(d, r, rng));
    const std::size_t rank = numerical_rank(expand_delta_w(lora), 1e-8);
    fail_if(rank > r, "LoRA d=" + std::to_string(d) + " k=" + std::to_string(k) + " r=" + std::to_string(r) +
                          ": rank " + std::to_string(rank));
  }
  for (const auto& op : kAllOperators)
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t d = pick(rng, 8, 48), k = pick(rng, 8, 48);
      const auto ranks = valid_ranks(d, k, op);
      MoraAdapter<double> a(d, k, ranks[pick(rng, 0, ranks.size() - 1)], op);
      a.set_M(uniform<double>(a.r_hat(), a.r_hat(), rng));
      const std::size_t ceiling =
          std::min({d, k, op.chunked() ? a.chunks() * a.r_hat() : a.r_hat()});
      const std::size_t rank = numerical_rank(expand_delta_w(a), 1e-8);
      fail_if(rank > ceiling, "MoRA " + op.name() + " d=" + std::to_string(d) + " k=" + std::to_string(k) +
                                  " r_hat=" + std::to_string(a.r_hat()) + ": rank " + std::to_string(rank) +
                                  " above " + std::to_string(ceiling));
    }
  for (GroupScheme scheme : {GroupScheme::Strided, GroupScheme::Contiguous})
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t d = pick(rng, 8, 48), k = pick(rng, 8, 48);
      std::vector<std::size_t> ranks;
      for (std::size_t r : valid_ranks(d, k, OperatorKind::sharing(scheme)))
        if (rhat_for(d, k, r) <= std::min(d, k)) ranks.push_back(r);
      MoraAdapter<double> a(d, k, ranks[pick(rng, 0, ranks.size() - 1)], OperatorKind::sharing(scheme));
      a.set_M(uniform<double>(a.r_hat(), a.r_hat(), rng));
      const std::size_t expected =
          std::min(occupied_groups(d, a.r_hat(), scheme), occupied_groups(k, a.r_hat(), scheme));
      const std::size_t rank = numerical_rank(expand_delta_w(a), 1e-8);
      fail_if(rank != expected, "full-rank M under " + a.op().name() + " d=" + std::to_string(d) +
                                    " k=" + std::to_string(k) + " r_hat=" + std::to_string(a.r_hat()) + ": rank " +
                                    std::to_string(rank) + ", expected " + std::to_string(expected) +
                                    "\n  M = " + dump(a.M()));
    }
  res.worst = static_cast<double>(res.failures);
  return res;
}

namespace {

double loss_of(TinyLM<double>& m, const TokenBatch& b) {
  Tape<double> tape;
  const auto loss = tape.cross_entropy(m.forward(tape, b.inputs, b.batch, b.seq), b.targets);
  return tape.value(loss)(0, 0);
}

template <typename T>
std::vector<Matrix<double>> analytic_grads(const TinyLM<double>& ref, const TokenBatch& b) {
  TinyLM<T> m = ref.template cast<T>();
  std::vector<Matrix<T>> grads;
  Tape<T> tape;
  tape.backward(tape.cross_entropy(m.forward(tape, b.inputs, b.batch, b.seq, Tuning::Adapters, &grads), b.targets));
  std::vector<Matrix<double>> out;
  for (const auto& g : grads) out.push_back(g.template cast<double>());
  return out;
}

}  // namespace

SuiteResult verify_gradients(std::uint64_t seed, const GradientOptions& opt) {
  SuiteResult res = start(opt.float_analytic ? "gradients-32" : "gradients", seed);
  res.tolerance = opt.tolerance;
  std::mt19937_64 rng(seed);
  const KvDataset data = generate_kv_pairs(2, seed, 8, 8);
  const std::vector<std::size_t> idx{0, 1};
  const TokenBatch batch = make_batch(data, idx);
  const TinyLM<double> base = TinyLM<double>::random(opt.model, rng);

  std::vector<std::string> kinds;
  for (const auto& op : kAllOperators) kinds.push_back(op.name());
  kinds.push_back("lora");
  for (std::size_t kind = 0; kind < kinds.size(); ++kind) {
    TinyLM<double> m = base;
    if (kind < kAllOperators.size()) {
      m.attach_mora(opt.r, kAllOperators[kind]);
      for (auto& p : m.trainable(Tuning::Adapters)) *p.value = uniform<double>(p.value->rows(), p.value->cols(), rng, 0.2);
    } else {
      m.attach_lora(opt.r, 2.0 * static_cast<double>(opt.r), rng);
      for (auto& p : m.trainable(Tuning::Adapters))
        if (p.name.ends_with(".B")) *p.value = uniform<double>(p.value->rows(), p.value->cols(), rng, 0.2);
    }
    const auto grads = opt.float_analytic ? analytic_grads<float>(m, batch) : analytic_grads<double>(m, batch);
    auto params = m.trainable(Tuning::Adapters);
    for (std::size_t p = 0; p < params.size(); ++p) {
      Matrix<double>& value = *params[p].value;
      double diff2 = 0, fd2 = 0;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double keep = value.data()[i];
        value.data()[i] = keep + opt.step;
        const double up = loss_of(m, batch);
        value.data()[i] = keep - opt.step;
        const double down = loss_of(m, batch);
        value.data()[i] = keep;
        const double fd = (up - down) / (2 * opt.step);
        const double g = grads[p].data()[i];
        diff2 += (g - fd) * (g - fd);
        fd2 += fd * fd;
        if (opt.per_tensor) continue;
        const double err = std::abs(g - fd) / std::max(std::abs(fd), opt.floor);
        record(res, err, !(err < opt.tolerance), [&] {
          return kinds[kind] + " parameter " + params[p].name + "[" + std::to_string(i) + "]: analytic " + fmt(g) +
                 ", central difference " + fmt(fd);
        });
      }
      if (!opt.per_tensor) continue;
      const double err = std::sqrt(diff2) / std::max(std::sqrt(fd2), opt.floor);
      record(res, err, !(err < opt.tolerance), [&] {
        return kinds[kind] + " parameter " + params[p].name + ": |analytic - difference| " + fmt(std::sqrt(diff2)) +
               ", |difference| " + fmt(std::sqrt(fd2));
      });
    }
  }
  return res;
}

template <typename T>
SuiteResult verify_merge(std::uint64_t seed, std::size_t inputs, double tolerance) {
  SuiteResult res = start(sizeof(T) == 4 ? "merge-32" : "merge", seed);
  res.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  const ModelConfig cfg;
  const TinyLM<T> base = TinyLM<T>::random(cfg, rng);
  const std::size_t seq = 16;
  std::vector<int> tokens(inputs * seq);
  for (auto& t : tokens) t = static_cast<int>(pick(rng, 0, cfg.vocab - 1));

  for (std::size_t kind = 0; kind <= kAllOperators.size(); ++kind) {
    TinyLM<T> m = base;
    std::string name;
    if (kind < kAllOperators.size()) {
      m.attach_mora(8, kAllOperators[kind]);
      name = kAllOperators[kind].name();
    } else {
      m.attach_lora(8, 16.0, rng);
      name = "lora";
    }
    for (auto& p : m.trainable(Tuning::Adapters))
      if (!p.name.ends_with(".A")) *p.value = uniform<T>(p.value->rows(), p.value->cols(), rng, 0.05);
    const Matrix<T> before = m.logits(tokens, inputs, seq);
    merge_for_export(m);
    const Matrix<T> after = m.logits(tokens, inputs, seq);
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      diff = std::max(diff, std::abs(static_cast<double>(after.data()[i]) - static_cast<double>(before.data()[i])));
      scale = std::max(scale, std::abs(static_cast<double>(before.data()[i])));
    }
    const double dev = scale > 0 ? diff / scale : diff;
    record(res, dev, !(dev < tolerance), [&] {
      return name + ": max relative deviation " + fmt(dev) + " over " + std::to_string(inputs) + " sequences";
    });
  }
  return res;
}

RemoraGrowth remora_growth(std::uint64_t seed, std::size_t trials) {
  RemoraGrowth g;
  g.trials = trials;
  std::mt19937_64 rng(seed);
  constexpr std::size_t n = 32, r_hat = 4;
  for (std::size_t t = 0; t < trials; ++t) {
    MoraAdapter<double> first(n, n, 1, r_hat, OperatorKind::sharing(GroupScheme::Strided));
    first.set_M(uniform<double>(r_hat, r_hat, rng));
    const Matrix<double> dw1 = expand_delta_w(first);
    const Matrix<double> m2 = uniform<double>(r_hat, r_hat, rng);

    MoraAdapter<double> second = first;
    second.set_op(OperatorKind::sharing(flipped(first.op().scheme)));
    second.set_M(m2);
    if (numerical_rank(add(dw1, expand_delta_w(second)), 1e-8) > r_hat) ++g.grew_with_flip;

    MoraAdapter<double> same = first;
    same.set_M(m2);
    if (numerical_rank(add(dw1, expand_delta_w(same)), 1e-8) <= r_hat) ++g.capped_without_flip;
  }
  return g;
}

SuiteResult verify_remora(std::uint64_t seed, std::size_t trials) {
  SuiteResult res = start("remora-rank-growth", seed);
  const RemoraGrowth g = remora_growth(seed, trials);
  res.cases = 2 * trials;
  res.failures = (trials - g.grew_with_flip) + (trials - g.capped_without_flip);
  res.worst = static_cast<double>(res.failures);
  if (res.failures) {
    res.counterexample = "rank grew in " + std::to_string(g.grew_with_flip) + "/" + std::to_string(trials) +
                         " flipped trials; stayed <= 4 in " + std::to_string(g.capped_without_flip) + "/" +
                         std::to_string(trials) + " unflipped trials";
  }
  return res;
}

std::vector<SuiteResult> verify_all(const VerifyOptions& opt) {
  struct FaultGuard {
    explicit FaultGuard(bool on) {
      if (on) detail::set_active_fault(detail::Fault::SharingDecompressSign);
    }
    ~FaultGuard() { detail::set_active_fault(detail::Fault::None); }
  } guard(opt.inject_sharing_fault);

  // Each suite draws from its own stream so adding one never shifts another.
  const std::uint64_t s = opt.seed;
  std::vector<SuiteResult> out;
  out.push_back(verify_losslessness(s));
  out.push_back(verify_adjoints(s + 1));
  out.push_back(verify_parity(s + 2));
  out.push_back(verify_rank_ceilings(s + 3));
  out.push_back(verify_gradients(s + 4));
  out.push_back(verify_merge<double>(s + 5, 100, 1e-9));
  out.push_back(verify_remora(s + 6));
  return out;
}

std::string format_verify_report(const std::vector<SuiteResult>& results) {
  std::ostringstream os;
  std::size_t passed = 0;
  char line[160];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-20s seed %-6llu cases %-7zu failures %-5zu worst %.3e  %s\n", r.name.c_str(),
                  static_cast<unsigned long long>(r.seed), r.cases, r.failures, r.worst, r.passed() ? "PASS" : "FAIL");
    os << line;
    if (!r.passed()) os << "  counterexample: " << r.counterexample << '\n';
    passed += r.passed();
  }
  os << passed << "/" << results.size() << " suites passed\n";
  return os.str();
}

template SuiteResult verify_merge<float>(std::uint64_t, std::size_t, double);
template SuiteResult verify_merge<double>(std::uint64_t, std::size_t, double);

}  // namespace mora
