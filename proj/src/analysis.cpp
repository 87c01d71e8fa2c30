// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/analysis.hpp"

#include <cstdio>
#include <ostream>

namespace mora {

std::array<double, kFamilies> SpectrumReport::average_counts() const {
  std::array<double, kFamilies> sum{};
  std::array<std::size_t, kFamilies> n{};
  for (const auto& e : entries) {
    if (!e.error.empty()) continue;
    const auto f = static_cast<std::size_t>(e.family);
    sum[f] += static_cast<double>(e.count);
    ++n[f];
  }
  for (std::size_t f = 0; f < kFamilies; ++f) sum[f] = n[f] ? sum[f] / static_cast<double>(n[f]) : 0.0;
  return sum;
}

template <typename T>
Matrix<double> cumulative_delta(const TinyLM<T>& model, std::size_t layer, LinearFamily family) {
  const auto [d, k] = model.config().shape(family);
  const auto& slot = model.slot(layer, family);
  Matrix<double> total = slot.merged_delta.empty() ? Matrix<double>(d, k) : slot.merged_delta.template cast<double>();
  if (const auto* m = std::get_if<MoraAdapter<T>>(&slot.adapter)) {
    MoraAdapter<double> a(m->d(), m->k(), m->r(), m->r_hat(), m->op());
    a.set_M(m->M().template cast<double>());
    axpy(1.0, expand_delta_w(a), total);
  } else if (const auto* l = std::get_if<LoraAdapter<T>>(&slot.adapter)) {
    LoraAdapter<double> a(l->d(), l->k(), l->r(), l->alpha(), l->A().template cast<double>(),
                          l->B().template cast<double>());
    axpy(1.0, expand_delta_w(a), total);
  }
  return total;
}

SpectrumEntry spectrum_entry(std::size_t layer, LinearFamily family, const Matrix<double>& delta, double threshold) {
  SpectrumEntry e;
  e.layer = layer;
  e.family = family;
  e.rows = delta.rows();
  e.cols = delta.cols();
  try {
    const auto sv = singular_values(delta);
    e.top_singular_value = sv.empty() ? 0.0 : sv.front();
    for (double s : sv) e.count += s > threshold;
  } catch (const Error& err) {
    e.error = err.what();
  }
  return e;
}

template <typename T>
SpectrumReport spectrum_report(const TinyLM<T>& model, double threshold) {
  if (!(threshold > 0)) throw Error(Error::Kind::InvalidArgument, "spectrum_report: threshold must be positive");
  SpectrumReport report;
  report.threshold = threshold;
  bool saw_mora = false, saw_lora = false;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (LinearFamily f : kAllFamilies) {
      const auto& slot = model.slot(l, f);
      if (const auto* m = std::get_if<MoraAdapter<T>>(&slot.adapter)) {
        saw_mora = true;
        report.r = m->r();
      } else if (const auto* lo = std::get_if<LoraAdapter<T>>(&slot.adapter)) {
        saw_lora = true;
        report.r = lo->r();
      }
      SpectrumEntry e = spectrum_entry(l, f, cumulative_delta(model, l, f), threshold);
      report.entries.push_back(std::move(e));
    }
  }
  report.adapter = saw_mora && saw_lora ? "mixed" : saw_mora ? "mora" : saw_lora ? "lora" : "none";
  return report;
}

void write_spectrum_csv(std::ostream& os, const SpectrumReport& report) {
  os << "layer_family,layer_index,count,top_singular_value\n";
  char buf[64];
  for (const auto& e : report.entries) {
    os << family_name(e.family) << ',' << e.layer << ',';
    if (e.error.empty()) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g", e.count, e.top_singular_value);
      os << buf;
    } else {
      os << ",";  // failed layer: empty fields
    }
    os << '\n';
  }
}

template <typename T>
std::vector<ParamRow> param_report(const TinyLM<T>& model) {
  std::vector<ParamRow> rows;
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    for (LinearFamily f : kAllFamilies) {
      ParamRow row;
      row.layer = l;
      row.family = f;
      std::tie(row.d, row.k) = model.config().shape(f);
      const auto& slot = model.slot(l, f);
      if (const auto* m = std::get_if<MoraAdapter<T>>(&slot.adapter)) {
        row.kind = "mora";
        row.r = m->r();
        row.r_hat = m->r_hat();
        row.trainable = m->trainable_count();
      } else if (const auto* lo = std::get_if<LoraAdapter<T>>(&slot.adapter)) {
        row.kind = "lora";
        row.r = lo->r();
        row.trainable = lo->trainable_count();
      } else {
        row.kind = "none";
      }
      row.budget = (row.d + row.k) * row.r;
      row.utilization = row.budget ? static_cast<double>(row.trainable) / static_cast<double>(row.budget) : 0.0;
      rows.push_back(row);
    }
  return rows;
}

void write_param_csv(std::ostream& os, const std::vector<ParamRow>& rows) {
  os << "layer_family,layer_index,kind,d,k,r,r_hat,trainable,budget,utilization\n";
  char buf[64];
  for (const auto& p : rows) {
    std::snprintf(buf, sizeof buf, "%.4f", p.utilization);
    os << family_name(p.family) << ',' << p.layer << ',' << p.kind << ',' << p.d << ',' << p.k << ',' << p.r << ','
       << p.r_hat << ',' << p.trainable << ',' << p.budget << ',' << buf << '\n';
  }
}

template Matrix<double> cumulative_delta(const TinyLM<float>&, std::size_t, LinearFamily);
template Matrix<double> cumulative_delta(const TinyLM<double>&, std::size_t, LinearFamily);
template SpectrumReport spectrum_report(const TinyLM<float>&, double);
template SpectrumReport spectrum_report(const TinyLM<double>&, double);
template std::vector<ParamRow> param_report(const TinyLM<float>&);
template std::vector<ParamRow> param_report(const TinyLM<double>&);

}  // namespace mora
