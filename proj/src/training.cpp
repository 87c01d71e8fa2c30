// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mora {

// ---------------------------------------------------------------------------
// AdamW

template <typename T>
void AdamW<T>::step(const std::vector<Matrix<T>*>& params, const std::vector<Matrix<T>>& grads,
                    const std::vector<bool>& decay, double lr) {
  if (grads.size() != params.size() || decay.size() != params.size()) {
    throw Error(Error::Kind::InvalidArgument, "AdamW::step: " + std::to_string(params.size()) + " params, " +
                                                  std::to_string(grads.size()) + " grads, " +
                                                  std::to_string(decay.size()) + " decay flags");
  }
  if (m_.size() < params.size()) {
    m_.resize(params.size());
    v_.resize(params.size());
    t_.resize(params.size(), 0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix<T>& p = *params[i];
    const Matrix<T>& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError("AdamW::step: gradient " + shape_of(g) + " for parameter " + shape_of(p));
    if (!all_finite(g)) throw NumericError("AdamW::step: non-finite gradient for parameter " + std::to_string(i));
    if (m_[i].rows() != p.rows() || m_[i].cols() != p.cols()) {
      m_[i] = Matrix<T>(p.rows(), p.cols());
      v_[i] = Matrix<T>(p.rows(), p.cols());
      t_[i] = 0;
    }
    const std::size_t t = ++t_[i];
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const double wd = decay[i] ? lr * cfg_.weight_decay : 0.0;
    T* pv = p.data();
    T* mv = m_[i].data();
    T* vv = v_[i].data();
    const T* gv = g.data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = gv[j];
      const double m = b1 * mv[j] + (1 - b1) * gj;
      const double v = b2 * vv[j] + (1 - b2) * gj * gj;
      mv[j] = static_cast<T>(m);
      vv[j] = static_cast<T>(v);
      double x = pv[j];
      x -= wd * x;
      x -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      pv[j] = static_cast<T>(x);
    }
  }
}

template <typename T>
void AdamW<T>::reset() {
  m_.clear();
  v_.clear();
  t_.clear();
}

template <typename T>
void AdamW<T>::reset(std::size_t index) {
  if (index >= t_.size()) return;
  m_[index].fill(T(0));
  v_[index].fill(T(0));
  t_[index] = 0;
}

template class AdamW<float>;
template class AdamW<double>;

// ---------------------------------------------------------------------------
// Schedules

const char* schedule_name(ScheduleShape s) {
  switch (s) {
    case ScheduleShape::Constant: return "constant";
    case ScheduleShape::Linear: return "linear";
    case ScheduleShape::Cosine: return "cosine";
  }
  return "?";
}

ScheduleShape parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleShape::Constant;
  if (s == "linear") return ScheduleShape::Linear;
  if (s == "cosine") return ScheduleShape::Cosine;
  throw Error(Error::Kind::InvalidArgument, "unknown schedule '" + s + "' (expected constant, linear or cosine)");
}

double Schedule::lr_at(std::size_t step) const {
  const double frac = total == 0 ? 0.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  double lr = base_lr;
  switch (shape) {
    case ScheduleShape::Constant: break;
    case ScheduleShape::Linear: lr *= 1.0 - frac; break;
    case ScheduleShape::Cosine: lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * frac)); break;
  }
  if (warmup > 0 && step < warmup) lr *= static_cast<double>(step) / static_cast<double>(warmup);
  if (restart_warmup > 0) {
    // Latest restart mark at or before step.
    auto it = std::upper_bound(restarts.begin(), restarts.end(), step);
    if (it != restarts.begin()) {
      const std::size_t since = step - *std::prev(it);
      if (since < restart_warmup) lr *= static_cast<double>(since) / static_cast<double>(restart_warmup);
    }
  }
  return std::max(0.0, lr);
}

const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::None: return "none";
    case AdapterKind::Mora: return "mora";
    case AdapterKind::Lora: return "lora";
    case AdapterKind::Full: return "full";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& s) {
  if (s == "none") return AdapterKind::None;
  if (s == "mora") return AdapterKind::Mora;
  if (s == "lora") return AdapterKind::Lora;
  if (s == "full") return AdapterKind::Full;
  throw Error(Error::Kind::InvalidArgument, "unknown adapter kind '" + s + "' (expected none, mora, lora or full)");
}

Schedule TrainConfig::make_schedule() const {
  Schedule s;
  s.shape = schedule;
  s.base_lr = lr;
  s.total = steps;
  s.warmup = warmup;
  s.restart_warmup = restart_warmup;
  if (merge_every > 0)
    for (std::size_t m = merge_every; m < steps; m += merge_every) s.restarts.push_back(m);
  return s;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw Error(Error::Kind::InvalidArgument, "train config: " + field + " " + why);
  };
  if ((kind == AdapterKind::Mora || kind == AdapterKind::Lora) && r == 0) bad("adapter.r", "must be at least 1");
  if (!(lr >= 0) || !std::isfinite(lr)) bad("train.lr", "must be a finite non-negative number");
  if (batch == 0) bad("train.batch", "must be at least 1");
  if (!(weight_decay >= 0)) bad("train.weight_decay", "must be non-negative");
  if (!(target_accuracy > 0 && target_accuracy <= 1)) bad("train.target_accuracy", "must be in (0, 1]");
  if (merge_every > 0 && kind != AdapterKind::Mora && kind != AdapterKind::Lora)
    bad("train.merge_every", "requires adapter.kind mora or lora");
  if (alpha < 0) bad("adapter.alpha", "must be non-negative");
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "step,lr,train_loss,eval_accuracy,merge_flag\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,", r.step, r.lr, r.train_loss);
    os << buf;
    if (r.eval_accuracy) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.eval_accuracy);
      os << buf;
    }
    os << ',' << (r.merge ? 1 : 0) << '\n';
  }
}

void attach_adapters(TinyLM<float>& model, const TrainConfig& cfg, std::mt19937_64& rng) {
  model.detach_adapters();
  if (cfg.kind == AdapterKind::Mora) model.attach_mora(cfg.r, cfg.op);
  if (cfg.kind == AdapterKind::Lora) model.attach_lora(cfg.r, cfg.effective_alpha(), rng, cfg.effective_init_std());
}

// ---------------------------------------------------------------------------
// Merging

namespace {

template <typename T>
void accumulate(Matrix<T>& total, const Matrix<T>& delta) {
  if (total.empty()) {
    total = delta;
  } else {
    axpy(T(1), delta, total);
  }
}

template <typename T>
void fold_slot(Matrix<T>& w, typename TinyLM<T>::Slot& slot) {
  Matrix<T> delta;
  if (const auto* m = std::get_if<MoraAdapter<T>>(&slot.adapter)) delta = expand_delta_w(*m);
  if (const auto* l = std::get_if<LoraAdapter<T>>(&slot.adapter)) delta = expand_delta_w(*l);
  if (delta.empty()) return;
  axpy(T(1), delta, w);
  accumulate(slot.merged_delta, delta);
}

}  // namespace

template <typename T>
void merge_and_reinit(TinyLM<T>& model, MergeMode mode, std::mt19937_64& rng, double lora_init_std, bool flip_scheme) {
  if (model.exported) throw Error(Error::Kind::State, "merge_and_reinit: adapters were already merged for export");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (LinearFamily f : kAllFamilies) {
      auto& slot = model.slot(l, f);
      const bool is_mora = std::holds_alternative<MoraAdapter<T>>(slot.adapter);
      const bool is_lora = std::holds_alternative<LoraAdapter<T>>(slot.adapter);
      if (!is_mora && !is_lora) continue;
      if ((mode == MergeMode::ReMoRA) != is_mora) {
        throw Error(Error::Kind::State, std::string("merge_and_reinit: ") +
                                            (mode == MergeMode::ReMoRA ? "ReMoRA" : "ReLoRA") +
                                            " requested but layer " + std::to_string(l) + " " + family_name(f) +
                                            " carries a different adapter kind");
      }
      fold_slot<T>(model.weight(l, f), slot);
      if (auto* m = std::get_if<MoraAdapter<T>>(&slot.adapter)) {
        m->M().fill(T(0));
        OperatorKind op = m->op();
        if (flip_scheme && op.type == OperatorType::Sharing) {
          op.scheme = flipped(op.scheme);
          m->set_op(op);
        }
      } else {
        std::get<LoraAdapter<T>>(slot.adapter).reinitialize(rng, lora_init_std);
      }
    }
  }
  ++model.merge_cycles;
}

template <typename T>
void merge_for_export(TinyLM<T>& model) {
  if (model.exported) throw Error(Error::Kind::State, "export: adapters were already merged (checkpoint consumed)");
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    for (LinearFamily f : kAllFamilies) {
      auto& slot = model.slot(l, f);
      fold_slot<T>(model.weight(l, f), slot);
      slot.adapter = std::monostate{};
    }
  model.exported = true;
}

template void merge_and_reinit(TinyLM<float>&, MergeMode, std::mt19937_64&, double, bool);
template void merge_and_reinit(TinyLM<double>&, MergeMode, std::mt19937_64&, double, bool);
template void merge_for_export(TinyLM<float>&);
template void merge_for_export(TinyLM<double>&);

// ---------------------------------------------------------------------------
// Training loop

double evaluate_loss(TinyLM<float>& model, const KvDataset& data) {
  double total = 0;
  std::size_t count = 0;
  const std::size_t chunk = 128;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const TokenBatch b = make_batch(data, idx);
    Tape<float> tape;
    const auto loss = tape.cross_entropy(model.forward(tape, b.inputs, b.batch, b.seq), b.targets);
    const std::size_t n = idx.size() * data.val_len;
    total += static_cast<double>(tape.value(loss)(0, 0)) * static_cast<double>(n);
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

namespace {

// Every step allocates and frees the same few hundred activation buffers of
// 0.5-1 MB. Above glibc's mmap threshold each one costs fresh page faults, so
// keep them on the heap and let the allocator reuse them.
void keep_activations_on_heap() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

TrainResult train(const TrainConfig& cfg, TinyLM<float>& model, const KvDataset& data,
                  const std::function<void(const MetricRow&)>& on_row) {
  cfg.validate();
  keep_activations_on_heap();
  if (data.size() == 0) throw Error(Error::Kind::InvalidArgument, "train: dataset is empty");
  const Tuning tuning = cfg.kind == AdapterKind::Full ? Tuning::Full : Tuning::Adapters;
  const Schedule schedule = cfg.make_schedule();
  // Shuffling and ReLoRA resampling draw from a stream separate from the one
  // that initialized the adapters.
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamW<float> opt({0.9, 0.999, 1e-8, cfg.weight_decay});

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::vector<Matrix<float>> grads;

  for (std::size_t s = 0; s < cfg.steps; ++s) {
    MetricRow row;
    row.step = s;
    if (std::binary_search(schedule.restarts.begin(), schedule.restarts.end(), s)) {
      merge_and_reinit(model, cfg.kind == AdapterKind::Mora ? MergeMode::ReMoRA : MergeMode::ReLoRA, rng,
                       cfg.effective_init_std());
      opt.reset();
      row.merge = true;
      ++result.merges;
    }
    row.lr = schedule.lr_at(s);

    std::vector<std::size_t> idx;
    idx.reserve(cfg.batch);
    while (idx.size() < cfg.batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const TokenBatch b = make_batch(data, idx);

    for (auto& g : grads) g.fill(0.0f);
    Tape<float> tape;
    const auto logits = model.forward(tape, b.inputs, b.batch, b.seq, tuning, &grads);
    const auto loss = tape.cross_entropy(logits, b.targets);
    row.train_loss = tape.value(loss)(0, 0);
    if (!std::isfinite(row.train_loss)) {
      throw NumericError("train: loss diverged (" + std::to_string(row.train_loss) + ") at step " + std::to_string(s) +
                         " with lr " + std::to_string(row.lr));
    }
    tape.backward(loss);

    auto params = model.trainable(tuning);
    std::vector<Matrix<float>*> ptrs;
    std::vector<bool> decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!all_finite(grads[i])) {
        throw NumericError("train: non-finite gradient for " + params[i].name + " at step " + std::to_string(s));
      }
      ptrs.push_back(params[i].value);
      decay.push_back(params[i].adapter);
    }
    opt.step(ptrs, grads, decay, row.lr);

    const bool last = s + 1 == cfg.steps;
    if (cfg.eval_every > 0 && ((s + 1) % cfg.eval_every == 0 || last)) {
      row.eval_accuracy = evaluate_char_accuracy(model, data);
      result.final_accuracy = *row.eval_accuracy;
      if (!result.steps_to_target && *row.eval_accuracy >= cfg.target_accuracy) result.steps_to_target = s + 1;
    }
    result.final_loss = row.train_loss;
    result.rows.push_back(row);
    if (on_row) on_row(row);
    if (cfg.stop_at_target && result.steps_to_target) break;
  }
  return result;
}

TinyLM<float> pretrain_base(const ModelConfig& cfg, std::uint64_t seed, std::size_t steps, std::size_t batch,
                            std::size_t seq, double lr) {
  std::mt19937_64 rng(seed);
  TinyLM<float> model = TinyLM<float>::random(cfg, rng);
  std::uniform_int_distribution<int> digit(0, kHexSymbols - 1);
  AdamW<float> opt;
  std::vector<Matrix<float>> grads;
  std::vector<int> tokens(batch * (seq + 1));
  std::vector<int> inputs(batch * seq), targets(batch * seq);
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& t : tokens) t = digit(rng);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < seq; ++t) {
        inputs[b * seq + t] = tokens[b * (seq + 1) + t];
        targets[b * seq + t] = tokens[b * (seq + 1) + t + 1];
      }
    for (auto& g : grads) g.fill(0.0f);
    Tape<float> tape;
    const auto loss = tape.cross_entropy(model.forward(tape, inputs, batch, seq, Tuning::Full, &grads), targets);
    tape.backward(loss);
    std::vector<Matrix<float>*> ptrs;
    for (auto& p : model.trainable(Tuning::Full)) ptrs.push_back(p.value);
    opt.step(ptrs, grads, std::vector<bool>(ptrs.size(), false), lr);
  }
  return model;
}

}  // namespace mora
