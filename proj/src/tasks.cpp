// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/tasks.hpp"

#include "kernels.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>

namespace mora {

namespace {

char hex_char(int t) { return "0123456789abcdef"[t]; }

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  throw Error(Error::Kind::Format, std::string("dataset: invalid hex character '") + c + "'");
}

std::vector<int> parse_hex(const std::string& s) {
  std::vector<int> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(hex_value(c));
  return out;
}

}  // namespace

KvDataset generate_kv_pairs(std::size_t n, std::uint64_t seed, std::size_t key_len, std::size_t val_len) {
  if (n == 0) throw Error(Error::Kind::InvalidArgument, "generate_kv_pairs: n must be at least 1");
  if (key_len == 0 || val_len == 0) throw Error(Error::Kind::InvalidArgument, "generate_kv_pairs: lengths must be >= 1");
  // 16^key_len distinct keys exist; only small lengths can run out.
  if (key_len < 16) {
    const double capacity = std::pow(16.0, static_cast<double>(key_len));
    if (static_cast<double>(n) > capacity) {
      throw Error(Error::Kind::InvalidArgument, "generate_kv_pairs: " + std::to_string(n) + " pairs requested but only " +
                                                    std::to_string(static_cast<unsigned long long>(capacity)) +
                                                    " distinct keys of length " + std::to_string(key_len) + " exist");
    }
  }
  KvDataset data;
  data.key_len = key_len;
  data.val_len = val_len;
  data.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> digit(0, kHexSymbols - 1);
  std::set<std::vector<int>> seen;
  while (data.pairs.size() < n) {
    KvPair p;
    p.key.resize(key_len);
    p.value.resize(val_len);
    for (auto& t : p.key) t = digit(rng);
    for (auto& t : p.value) t = digit(rng);
    if (!seen.insert(p.key).second) continue;
    data.pairs.push_back(std::move(p));
  }
  return data;
}

void write_dataset(std::ostream& os, const KvDataset& data) {
  for (const auto& p : data.pairs) {
    for (int t : p.key) os << hex_char(t);
    os << '\t';
    for (int t : p.value) os << hex_char(t);
    os << '\n';
  }
}

KvDataset read_dataset(std::istream& is) {
  KvDataset data;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(Error::Kind::Format, "dataset: missing tab in line '" + line + "'");
    KvPair p{parse_hex(line.substr(0, tab)), parse_hex(line.substr(tab + 1))};
    if (data.pairs.empty()) {
      data.key_len = p.key.size();
      data.val_len = p.value.size();
    } else if (p.key.size() != data.key_len || p.value.size() != data.val_len) {
      throw Error(Error::Kind::Format, "dataset: inconsistent key/value lengths in line '" + line + "'");
    }
    data.pairs.push_back(std::move(p));
  }
  return data;
}

TokenBatch make_batch(const KvDataset& data, std::span<const std::size_t> indices) {
  TokenBatch b;
  b.batch = indices.size();
  b.seq = data.key_len + data.val_len;
  b.inputs.reserve(b.batch * b.seq);
  b.targets.reserve(b.batch * b.seq);
  for (std::size_t idx : indices) {
    const KvPair& p = data.pairs.at(idx);
    std::vector<int> full;
    full.insert(full.end(), p.key.begin(), p.key.end());
    full.push_back(kSepToken);
    full.insert(full.end(), p.value.begin(), p.value.end());
    for (std::size_t t = 0; t < b.seq; ++t) {
      b.inputs.push_back(full[t]);
      b.targets.push_back(t >= data.key_len ? full[t + 1] : -1);
    }
  }
  return b;
}

const char* family_name(LinearFamily f) {
  switch (f) {
    case LinearFamily::Q: return "q";
    case LinearFamily::K: return "k";
    case LinearFamily::V: return "v";
    case LinearFamily::O: return "o";
    case LinearFamily::Up: return "up";
    case LinearFamily::Down: return "down";
    case LinearFamily::Gate: return "gate";
  }
  return "?";
}

std::pair<std::size_t, std::size_t> ModelConfig::shape(LinearFamily f) const {
  switch (f) {
    case LinearFamily::Up:
    case LinearFamily::Gate: return {ffn_dim, dim};
    case LinearFamily::Down: return {dim, ffn_dim};
    default: return {dim, dim};
  }
}

// ---------------------------------------------------------------------------
// TinyLM

template <typename T>
TinyLM<T>::TinyLM(ModelConfig cfg) : cfg_(cfg) {
  if (cfg.vocab == 0 || cfg.dim == 0 || cfg.layers == 0 || cfg.heads == 0 || cfg.ffn_dim == 0) {
    throw Error(Error::Kind::InvalidArgument, "TinyLM: all model sizes must be positive");
  }
  if (cfg.dim % cfg.heads != 0 || (cfg.dim / cfg.heads) % 2 != 0) {
    throw Error(Error::Kind::InvalidArgument, "TinyLM: dim must split into heads of even width");
  }
  embed = Matrix<T>(cfg.vocab, cfg.dim);
  output = Matrix<T>(cfg.vocab, cfg.dim);
  final_norm = Matrix<T>(1, cfg.dim, T(1));
  layers.resize(cfg.layers);
  slots.resize(cfg.layers);
  for (auto& l : layers) {
    l.attn_norm = Matrix<T>(1, cfg.dim, T(1));
    l.ffn_norm = Matrix<T>(1, cfg.dim, T(1));
    for (LinearFamily f : kAllFamilies) {
      const auto [d, k] = cfg.shape(f);
      l.weight[static_cast<std::size_t>(f)] = Matrix<T>(d, k);
    }
  }
}

template <typename T>
TinyLM<T> TinyLM<T>::random(const ModelConfig& cfg, std::mt19937_64& rng) {
  TinyLM m(cfg);
  auto fill = [&](Matrix<T>& w, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    for (auto& v : w.values()) v = static_cast<T>(n(rng));
  };
  fill(m.embed, 1.0);
  for (auto& l : m.layers)
    for (auto& w : l.weight) fill(w, 1.0 / std::sqrt(static_cast<double>(w.cols())));
  fill(m.output, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
  return m;
}

template <typename T>
void TinyLM<T>::attach_mora(std::size_t r, OperatorKind op) {
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (LinearFamily f : kAllFamilies) {
      const auto [d, k] = cfg_.shape(f);
      slot(l, f).adapter = MoraAdapter<T>(d, k, r, op);
    }
}

template <typename T>
void TinyLM<T>::attach_lora(std::size_t r, double alpha, std::mt19937_64& rng, double init_std) {
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (LinearFamily f : kAllFamilies) {
      const auto [d, k] = cfg_.shape(f);
      slot(l, f).adapter = LoraAdapter<T>(d, k, r, alpha, rng, init_std);
    }
}

template <typename T>
void TinyLM<T>::detach_adapters() {
  for (auto& row : slots)
    for (auto& s : row) s.adapter = std::monostate{};
}

template <typename T>
bool TinyLM<T>::has_adapters() const {
  for (const auto& row : slots)
    for (const auto& s : row)
      if (!std::holds_alternative<std::monostate>(s.adapter)) return true;
  return false;
}

template <typename T>
std::vector<typename TinyLM<T>::ParamRef> TinyLM<T>::parameters() {
  std::vector<ParamRef> out;
  out.push_back({"embed", &embed, false});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", &layers[l].attn_norm, false});
    out.push_back({p + "ffn_norm", &layers[l].ffn_norm, false});
    for (LinearFamily f : kAllFamilies) out.push_back({p + family_name(f), &weight(l, f), false});
  }
  out.push_back({"final_norm", &final_norm, false});
  out.push_back({"output", &output, false});
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (LinearFamily f : kAllFamilies) {
      const std::string p = "layers." + std::to_string(l) + "." + family_name(f) + ".";
      auto& a = slot(l, f).adapter;
      if (auto* m = std::get_if<MoraAdapter<T>>(&a)) out.push_back({p + "M", &m->M(), true});
      if (auto* lo = std::get_if<LoraAdapter<T>>(&a)) {
        out.push_back({p + "A", &lo->A(), true});
        out.push_back({p + "B", &lo->B(), true});
      }
    }
  return out;
}

template <typename T>
std::vector<typename TinyLM<T>::ParamRef> TinyLM<T>::trainable(Tuning tuning) {
  std::vector<ParamRef> out;
  if (tuning == Tuning::Frozen) return out;
  for (auto& p : parameters())
    if (p.adapter || tuning == Tuning::Full) out.push_back(p);
  return out;
}

template <typename T>
typename Tape<T>::Id TinyLM<T>::forward(Tape<T>& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                                        Tuning tuning, std::vector<Matrix<T>>* grads) {
  if (tokens.size() != batch * seq) {
    throw ShapeError("TinyLM::forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                     std::to_string(batch) + " x seq " + std::to_string(seq));
  }
  std::unordered_map<const Matrix<T>*, Matrix<T>*> sinks;
  if (grads) {
    auto params = trainable(tuning);
    if (grads->size() != params.size()) grads->resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix<T>& g = (*grads)[i];
      if (g.rows() != params[i].value->rows() || g.cols() != params[i].value->cols())
        g = Matrix<T>(params[i].value->rows(), params[i].value->cols());
      sinks[params[i].value] = &g;
    }
  }
  auto param = [&](const Matrix<T>& m) {
    auto it = sinks.find(&m);
    return tape.parameter(m, it == sinks.end() ? nullptr : it->second);
  };
  auto adapted = [&](typename Tape<T>::Id x, std::size_t l, LinearFamily f) {
    auto y = tape.linear(x, param(weight(l, f)));
    const auto& a = slot(l, f).adapter;
    if (const auto* m = std::get_if<MoraAdapter<T>>(&a)) {
      y = tape.add(y, tape.mora_delta(x, param(m->M()), m->op(), m->d()));
    } else if (const auto* lo = std::get_if<LoraAdapter<T>>(&a)) {
      y = tape.add(y, tape.lora_delta(x, param(lo->A()), param(lo->B()), lo->scaling()));
    }
    return y;
  };

  auto x = tape.embedding(tokens, param(embed));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto h = tape.rms_norm(x, param(layers[l].attn_norm));
    auto q = tape.rope(adapted(h, l, LinearFamily::Q), seq, cfg_.heads);
    auto k = tape.rope(adapted(h, l, LinearFamily::K), seq, cfg_.heads);
    auto v = adapted(h, l, LinearFamily::V);
    auto att = tape.causal_attention(q, k, v, seq, cfg_.heads);
    x = tape.add(x, adapted(att, l, LinearFamily::O));
    auto h2 = tape.rms_norm(x, param(layers[l].ffn_norm));
    auto gate = adapted(h2, l, LinearFamily::Gate);
    auto up = adapted(h2, l, LinearFamily::Up);
    x = tape.add(x, adapted(tape.swiglu(gate, up), l, LinearFamily::Down));
  }
  auto fin = tape.rms_norm(x, param(final_norm));
  return tape.linear(fin, param(output));
}

template <typename T>
Matrix<T> TinyLM<T>::logits(std::span<const int> tokens, std::size_t batch, std::size_t seq) {
  Tape<T> tape;
  const auto id = forward(tape, tokens, batch, seq);
  return tape.value(id);
}

template <typename T>
template <typename U>
TinyLM<U> TinyLM<T>::cast() const {
  TinyLM<U> out(cfg_);
  out.embed = embed.template cast<U>();
  out.output = output.template cast<U>();
  out.final_norm = final_norm.template cast<U>();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.layers[l].attn_norm = layers[l].attn_norm.template cast<U>();
    out.layers[l].ffn_norm = layers[l].ffn_norm.template cast<U>();
    for (std::size_t f = 0; f < kFamilies; ++f) {
      out.layers[l].weight[f] = layers[l].weight[f].template cast<U>();
      const Slot& s = slots[l][f];
      auto& o = out.slots[l][f];
      o.merged_delta = s.merged_delta.template cast<U>();
      if (const auto* m = std::get_if<MoraAdapter<T>>(&s.adapter)) {
        MoraAdapter<U> a(m->d(), m->k(), m->r(), m->r_hat(), m->op());
        a.set_M(m->M().template cast<U>());
        o.adapter = std::move(a);
      } else if (const auto* lo = std::get_if<LoraAdapter<T>>(&s.adapter)) {
        o.adapter = LoraAdapter<U>(lo->d(), lo->k(), lo->r(), lo->alpha(), lo->A().template cast<U>(),
                                   lo->B().template cast<U>());
      }
    }
  }
  out.merge_cycles = merge_cycles;
  out.exported = exported;
  return out;
}

template <typename T>
struct TinyLM<T>::KvCache {
  std::size_t batch = 0;
  std::size_t capacity = 0;
  std::size_t filled = 0;
  std::vector<Matrix<T>> k, v;  // per layer, row b * capacity + position
};

template <typename T>
Matrix<T> TinyLM<T>::run_block(KvCache& cache, std::span<const int> tokens, std::size_t n) const {
  const std::size_t batch = cache.batch, dim = cfg_.dim, heads = cfg_.heads, hd = dim / heads;
  const std::size_t offset = cache.filled;
  if (offset + n > cache.capacity) throw Error(Error::Kind::State, "decoder cache overflow");
  const std::size_t rows = batch * n;
  const T eps = T(1e-5);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  Matrix<T> x(rows, dim);
  for (std::size_t i = 0; i < rows; ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= embed.rows()) {
      throw Error(Error::Kind::InvalidArgument, "decoder: token " + std::to_string(tokens[i]) + " outside vocabulary of " +
                                                    std::to_string(embed.rows()));
    }
    std::copy_n(embed.data() + static_cast<std::size_t>(tokens[i]) * dim, dim, x.data() + i * dim);
  }
  auto norm = [&](const Matrix<T>& in, const Matrix<T>& gain) {
    Matrix<T> out(in.rows(), in.cols());
    kernels::rms_norm(in.data(), gain.data(), out.data(), in.rows(), in.cols(), eps);
    return out;
  };
  auto adapted = [&](const Matrix<T>& in, std::size_t l, LinearFamily f) {
    Matrix<T> y = matmul_nt(in, weight(l, f));
    const auto& a = slot(l, f).adapter;
    if (const auto* m = std::get_if<MoraAdapter<T>>(&a)) axpy(T(1), adapter_delta(*m, in), y);
    if (const auto* lo = std::get_if<LoraAdapter<T>>(&a)) axpy(T(1), lora_delta(*lo, in), y);
    return y;
  };

  std::vector<T> scores(cache.capacity);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Matrix<T> h = norm(x, layers[l].attn_norm);
    Matrix<T> q = adapted(h, l, LinearFamily::Q);
    Matrix<T> k = adapted(h, l, LinearFamily::K);
    const Matrix<T> v = adapted(h, l, LinearFamily::V);
    kernels::rotate_positions(q, n, heads, T(1), offset);
    kernels::rotate_positions(k, n, heads, T(1), offset);
    Matrix<T>& kc = cache.k[l];
    Matrix<T>& vc = cache.v[l];
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t dst = (b * cache.capacity + offset + i) * dim;
        std::copy_n(k.data() + (b * n + i) * dim, dim, kc.data() + dst);
        std::copy_n(v.data() + (b * n + i) * dim, dim, vc.data() + dst);
      }
    Matrix<T> att(rows, dim);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t first = b * cache.capacity * dim + hh * hd;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t row = (b * n + i) * dim + hh * hd;
          kernels::attend(q.data() + row, kc.data() + first, vc.data() + first, dim, offset + i + 1, hd, scale,
                          att.data() + row, scores.data());
        }
      }
    axpy(T(1), adapted(att, l, LinearFamily::O), x);
    const Matrix<T> h2 = norm(x, layers[l].ffn_norm);
    const Matrix<T> gate = adapted(h2, l, LinearFamily::Gate);
    const Matrix<T> up = adapted(h2, l, LinearFamily::Up);
    Matrix<T> act(gate.rows(), gate.cols());
    kernels::swiglu(gate.data(), up.data(), act.data(), act.size());
    axpy(T(1), adapted(act, l, LinearFamily::Down), x);
  }
  cache.filled += n;
  return matmul_nt(norm(x, final_norm), output);
}

template <typename T>
Matrix<T> TinyLM<T>::incremental_logits(std::span<const int> tokens, std::size_t batch, std::size_t seq,
                                        std::size_t block) const {
  if (tokens.size() != batch * seq || block == 0) {
    throw ShapeError("incremental_logits: " + std::to_string(tokens.size()) + " tokens for batch " +
                     std::to_string(batch) + " x seq " + std::to_string(seq) + ", block " + std::to_string(block));
  }
  KvCache cache;
  cache.batch = batch;
  cache.capacity = seq;
  cache.k.assign(layers.size(), Matrix<T>(batch * seq, cfg_.dim));
  cache.v = cache.k;
  Matrix<T> out(batch * seq, cfg_.vocab);
  for (std::size_t start = 0; start < seq; start += block) {
    const std::size_t n = std::min(block, seq - start);
    std::vector<int> part(batch * n);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(tokens.begin() + b * seq + start, n, part.begin() + b * n);
    const Matrix<T> lg = run_block(cache, part, n);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(lg.data() + b * n * cfg_.vocab, n * cfg_.vocab, out.data() + (b * seq + start) * cfg_.vocab);
  }
  return out;
}

template <typename T>
std::vector<int> TinyLM<T>::greedy_continue(std::span<const int> prompt, std::size_t batch, std::size_t prompt_len,
                                            std::size_t steps, int choices) const {
  if (prompt.size() != batch * prompt_len || prompt_len == 0) {
    throw ShapeError("greedy_continue: " + std::to_string(prompt.size()) + " prompt tokens for batch " +
                     std::to_string(batch) + " x " + std::to_string(prompt_len));
  }
  if (choices <= 0 || static_cast<std::size_t>(choices) > cfg_.vocab)
    throw Error(Error::Kind::InvalidArgument, "greedy_continue: choices must be in [1, vocab]");
  KvCache cache;
  cache.batch = batch;
  cache.capacity = prompt_len + steps;
  cache.k.assign(layers.size(), Matrix<T>(batch * cache.capacity, cfg_.dim));
  cache.v = cache.k;
  std::vector<int> out(batch * steps);
  if (steps == 0) return out;
  Matrix<T> lg = run_block(cache, prompt, prompt_len);
  std::size_t per = prompt_len;
  std::vector<int> next(batch);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t b = 0; b < batch; ++b) {
      const T* row = lg.data() + (b * per + per - 1) * cfg_.vocab;
      int best = 0;
      for (int c = 1; c < choices; ++c)
        if (row[c] > row[best]) best = c;
      next[b] = best;
      out[b * steps + s] = best;
    }
    if (s + 1 == steps) break;
    lg = run_block(cache, next, 1);
    per = 1;
  }
  return out;
}

template class TinyLM<float>;
template class TinyLM<double>;
template TinyLM<double> TinyLM<float>::cast<double>() const;
template TinyLM<float> TinyLM<double>::cast<float>() const;
template TinyLM<float> TinyLM<float>::cast<float>() const;
template TinyLM<double> TinyLM<double>::cast<double>() const;

// ---------------------------------------------------------------------------
// Evaluation

double evaluate_char_accuracy(const NextTokenScorer& scorer, const KvDataset& data, std::size_t chunk) {
  if (data.pairs.empty()) return 0.0;
  const std::size_t K = data.key_len, V = data.val_len;
  const std::size_t seq = K + V;
  std::size_t correct = 0;

  for (std::size_t start = 0; start < data.pairs.size(); start += chunk) {
    const std::size_t count = std::min(chunk, data.pairs.size() - start);
    // Inputs start out teacher-forced; each round replaces the first input
    // that disagrees with the greedy choice and rescoring continues from there.
    std::vector<std::vector<int>> buffer(count);
    std::vector<std::vector<int>> generated(count);
    for (std::size_t p = 0; p < count; ++p) {
      const KvPair& pair = data.pairs[start + p];
      buffer[p] = pair.key;
      buffer[p].push_back(kSepToken);
      buffer[p].insert(buffer[p].end(), pair.value.begin(), pair.value.end() - 1);
    }
    std::vector<std::size_t> active(count);
    for (std::size_t p = 0; p < count; ++p) active[p] = p;

    while (!active.empty()) {
      std::vector<int> tokens;
      tokens.reserve(active.size() * seq);
      for (std::size_t p : active) tokens.insert(tokens.end(), buffer[p].begin(), buffer[p].end());
      const Matrix<float> logits = scorer(tokens, active.size(), seq);
      std::vector<std::size_t> next;
      for (std::size_t a = 0; a < active.size(); ++a) {
        const std::size_t p = active[a];
        bool pending = false;
        for (std::size_t t = generated[p].size(); t < V; ++t) {
          const float* row = logits.data() + (a * seq + K + t) * logits.cols();
          int best = 0;
          for (int c = 1; c < kHexSymbols; ++c)
            if (row[c] > row[best]) best = c;
          generated[p].push_back(best);
          if (t + 1 == V) break;
          int& slot = buffer[p][K + 1 + t];
          if (slot != best) {
            slot = best;
            pending = true;
            break;
          }
        }
        if (pending) next.push_back(p);
      }
      active = std::move(next);
    }
    for (std::size_t p = 0; p < count; ++p)
      for (std::size_t t = 0; t < V; ++t) correct += generated[p][t] == data.pairs[start + p].value[t];
  }
  return static_cast<double>(correct) / static_cast<double>(data.pairs.size() * V);
}

double evaluate_char_accuracy(const TinyLM<float>& model, const KvDataset& data, std::size_t chunk) {
  if (data.pairs.empty()) return 0.0;
  const std::size_t K = data.key_len, V = data.val_len;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.pairs.size(); start += chunk) {
    const std::size_t count = std::min(chunk, data.pairs.size() - start);
    std::vector<int> prompt;
    prompt.reserve(count * (K + 1));
    for (std::size_t p = 0; p < count; ++p) {
      const auto& key = data.pairs[start + p].key;
      prompt.insert(prompt.end(), key.begin(), key.end());
      prompt.push_back(kSepToken);
    }
    const auto generated = model.greedy_continue(prompt, count, K + 1, V, kHexSymbols);
    for (std::size_t p = 0; p < count; ++p)
      for (std::size_t t = 0; t < V; ++t) correct += generated[p * V + t] == data.pairs[start + p].value[t];
  }
  return static_cast<double>(correct) / static_cast<double>(data.pairs.size() * V);
}

}  // namespace mora
