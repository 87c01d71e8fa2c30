// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/io.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace mora {

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void config_error(std::size_t line, const std::string& key, const std::string& why) {
  throw Error(Error::Kind::InvalidArgument,
              "config line " + std::to_string(line) + ": " + key + ": " + why);
}

std::uint64_t parse_uint(std::size_t line, const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) config_error(line, key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(std::size_t line, const std::string& key, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    config_error(line, key, "expected a finite number, got '" + v + "'");
  return out;
}

bool parse_bool(std::size_t line, const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  config_error(line, key, "expected true or false, got '" + v + "'");
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  ExperimentConfig c;
  std::string op_name = c.op.type == OperatorType::Sharing ? "sharing" : c.op.name();
  std::string scheme = "strided";
  std::size_t op_line = 0, scheme_line = 0;
  std::map<std::string, std::size_t> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) config_error(line, s, "expected key=value");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    const std::string v = trim(std::string_view(s).substr(eq + 1));
    if (!seen.emplace(key, line).second) config_error(line, key, "duplicate key (first set on line " + std::to_string(seen[key]) + ")");
    auto u = [&] { return static_cast<std::size_t>(parse_uint(line, key, v)); };
    auto positive = [&] {
      const std::size_t n = u();
      if (n == 0) config_error(line, key, "must be at least 1");
      return n;
    };
    if (key == "task.pairs") c.pairs = positive();
    else if (key == "task.key_len") c.key_len = positive();
    else if (key == "task.val_len") c.val_len = positive();
    else if (key == "task.seed") c.task_seed = parse_uint(line, key, v);
    else if (key == "model.dim") c.model.dim = positive();
    else if (key == "model.layers") c.model.layers = positive();
    else if (key == "model.heads") c.model.heads = positive();
    else if (key == "model.ffn_dim") c.model.ffn_dim = positive();
    else if (key == "model.pretrain_steps") c.pretrain_steps = u();
    else if (key == "adapter.kind") {
      try {
        c.kind = parse_adapter_kind(v);
      } catch (const Error& e) {
        config_error(line, key, e.what());
      }
    } else if (key == "adapter.operator") {
      op_name = v;
      op_line = line;
    } else if (key == "adapter.scheme") {
      scheme = v;
      scheme_line = line;
    } else if (key == "adapter.r") c.r = positive();
    else if (key == "adapter.alpha") c.alpha = parse_real(line, key, v);
    else if (key == "adapter.init_std") c.init_std = parse_real(line, key, v);
    else if (key == "train.lr") {
      c.lrs.clear();
      std::istringstream parts(v);
      std::string part;
      while (std::getline(parts, part, ',')) {
        const double lr = parse_real(line, key, trim(part));
        if (lr < 0) config_error(line, key, "learning rates must be non-negative");
        c.lrs.push_back(lr);
      }
      if (c.lrs.empty()) config_error(line, key, "expected at least one learning rate");
    } else if (key == "train.steps") c.steps = u();
    else if (key == "train.batch") c.batch = positive();
    else if (key == "train.merge_every") c.merge_every = u();
    else if (key == "train.schedule") {
      try {
        c.schedule = parse_schedule(v);
      } catch (const Error& e) {
        config_error(line, key, e.what());
      }
    } else if (key == "train.warmup") c.warmup = u();
    else if (key == "train.restart_warmup") c.restart_warmup = u();
    else if (key == "train.weight_decay") c.weight_decay = parse_real(line, key, v);
    else if (key == "train.eval_every") c.eval_every = u();
    else if (key == "train.target_accuracy") c.target_accuracy = parse_real(line, key, v);
    else if (key == "train.stop_at_target") c.stop_at_target = parse_bool(line, key, v);
    else if (key == "seed") c.seed = parse_uint(line, key, v);
    else if (key == "output.dir") {
      if (v.empty()) config_error(line, key, "must not be empty");
      c.out_dir = v;
    } else {
      config_error(line, key, "unknown key");
    }
  }
  if (scheme != "strided" && scheme != "contiguous")
    config_error(scheme_line, "adapter.scheme", "expected strided or contiguous, got '" + scheme + "'");
  try {
    c.op = OperatorKind::parse(op_name);
  } catch (const Error& e) {
    config_error(op_line, "adapter.operator", e.what());
  }
  if (c.op.type == OperatorType::Sharing) c.op.scheme = scheme == "strided" ? GroupScheme::Strided : GroupScheme::Contiguous;
  try {
    for (double lr : c.lrs) c.train_config(lr).validate();
  } catch (const Error& e) {
    throw Error(Error::Kind::InvalidArgument, std::string("config: ") + e.what());
  }
  if (c.model.dim % c.model.heads != 0 || (c.model.dim / c.model.heads) % 2 != 0)
    throw Error(Error::Kind::InvalidArgument, "config: model.heads must split model.dim into even-width heads");
  if ((c.kind == AdapterKind::Mora || c.kind == AdapterKind::Lora) && c.r > std::min(c.model.dim, c.model.ffn_dim))
    throw Error(Error::Kind::InvalidArgument, "config: adapter.r exceeds the smallest layer dimension");
  return c;
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "task.pairs=" << pairs << '\n'
     << "task.key_len=" << key_len << '\n'
     << "task.val_len=" << val_len << '\n'
     << "task.seed=" << task_seed << '\n'
     << "model.dim=" << model.dim << '\n'
     << "model.layers=" << model.layers << '\n'
     << "model.heads=" << model.heads << '\n'
     << "model.ffn_dim=" << model.ffn_dim << '\n'
     << "model.pretrain_steps=" << pretrain_steps << '\n'
     << "adapter.kind=" << adapter_kind_name(kind) << '\n'
     << "adapter.operator=" << (op.type == OperatorType::Sharing ? std::string("sharing") : op.name()) << '\n'
     << "adapter.scheme=" << (op.scheme == GroupScheme::Strided ? "strided" : "contiguous") << '\n'
     << "adapter.r=" << r << '\n'
     << "adapter.alpha=" << format_real(alpha) << '\n'
     << "adapter.init_std=" << format_real(init_std) << '\n'
     << "train.lr=";
  for (std::size_t i = 0; i < lrs.size(); ++i) os << (i ? "," : "") << format_real(lrs[i]);
  os << '\n'
     << "train.steps=" << steps << '\n'
     << "train.batch=" << batch << '\n'
     << "train.merge_every=" << merge_every << '\n'
     << "train.schedule=" << schedule_name(schedule) << '\n'
     << "train.warmup=" << warmup << '\n'
     << "train.restart_warmup=" << restart_warmup << '\n'
     << "train.weight_decay=" << format_real(weight_decay) << '\n'
     << "train.eval_every=" << eval_every << '\n'
     << "train.target_accuracy=" << format_real(target_accuracy) << '\n'
     << "train.stop_at_target=" << (stop_at_target ? "true" : "false") << '\n'
     << "seed=" << seed << '\n'
     << "output.dir=" << out_dir << '\n';
  return os.str();
}

TrainConfig ExperimentConfig::train_config(double lr) const {
  TrainConfig t;
  t.kind = kind;
  t.r = r;
  t.op = op;
  t.alpha = alpha;
  t.lora_init_std = init_std;
  t.lr = lr;
  t.steps = steps;
  t.batch = batch;
  t.merge_every = merge_every;
  t.schedule = schedule;
  t.warmup = warmup;
  t.restart_warmup = restart_warmup;
  t.weight_decay = weight_decay;
  t.eval_every = eval_every;
  t.target_accuracy = target_accuracy;
  t.stop_at_target = stop_at_target;
  t.seed = seed;
  return t;
}

KvDataset ExperimentConfig::dataset() const { return generate_kv_pairs(pairs, dataset_seed(), key_len, val_len); }

ExperimentConfig load_config(const std::string& path) { return ExperimentConfig::parse(read_file(path)); }

// ---------------------------------------------------------------------------
// Files

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::Io, "cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Error::Kind::Io, "cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Error::Kind::Io, "write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Error::Kind::Io, "cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Binary encoding

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::size_t v) {
    if (v > 0xffffffffULL) throw Error(Error::Kind::Format, "value does not fit in u32");
    const auto x = static_cast<std::uint32_t>(v);
    raw(&x, 4);
  }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void matrix(const Matrix<float>& m) { raw(m.data(), m.size() * sizeof(float)); }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view in, const char* what) : in_(in), what_(what) {}
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  Matrix<float> matrix(std::size_t rows, std::size_t cols) {
    need(rows * cols * sizeof(float));
    Matrix<float> m(rows, cols);
    std::memcpy(m.data(), in_.data() + pos_, m.size() * sizeof(float));
    pos_ += m.size() * sizeof(float);
    return m;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    const auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t offset() const { return pos_; }
  [[noreturn]] void fail(const std::string& why) const {
    throw Error(Error::Kind::Format, std::string(what_) + ": " + why + " at byte " + std::to_string(pos_));
  }

 private:
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, in_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) fail("truncated (needed " + std::to_string(n) + " more bytes)");
  }
  std::string_view in_;
  const char* what_;
  std::size_t pos_ = 0;
};

void check_magic(Reader& r, std::string_view magic, std::uint16_t version) {
  const auto got = r.bytes(4);
  if (got != magic) r.fail("bad magic '" + std::string(got) + "', expected '" + std::string(magic) + "'");
  const auto v = r.u16();
  if (v != version) r.fail("unsupported version " + std::to_string(v) + ", expected " + std::to_string(version));
}

}  // namespace

std::string encode_checkpoint(const TinyLM<float>& model) {
  Writer w;
  w.bytes("MORA");
  w.u16(kCheckpointVersion);
  w.u32(model.layers.size() * kFamilies);
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    for (LinearFamily f : kAllFamilies) {
      const auto [d, k] = model.config().shape(f);
      const auto& slot = model.slot(l, f);
      if (const auto* m = std::get_if<MoraAdapter<float>>(&slot.adapter)) {
        w.u8(m->op().tag());
        w.u32(d);
        w.u32(k);
        w.u32(m->r());
        w.u32(m->r_hat());
        w.matrix(m->M());
      } else if (const auto* lo = std::get_if<LoraAdapter<float>>(&slot.adapter)) {
        w.u8(kLoraTag);
        w.u32(d);
        w.u32(k);
        w.u32(lo->r());
        w.f32(static_cast<float>(lo->alpha()));
        w.matrix(lo->A());
        w.matrix(lo->B());
      } else {
        w.u8(kEmptyTag);
        w.u32(d);
        w.u32(k);
      }
      w.u8(slot.merged_delta.empty() ? 0 : 1);
      if (!slot.merged_delta.empty()) w.matrix(slot.merged_delta);
    }
  return w.take();
}

std::vector<AdapterRecord> decode_checkpoint(std::string_view bytes) {
  Reader r(bytes, "checkpoint");
  check_magic(r, "MORA", kCheckpointVersion);
  const std::uint32_t count = r.u32();
  if (count % kFamilies != 0) r.fail("record count " + std::to_string(count) + " is not a multiple of 7");
  std::vector<AdapterRecord> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    AdapterRecord rec;
    rec.layer = i / kFamilies;
    rec.family = kAllFamilies[i % kFamilies];
    const std::uint8_t tag = r.u8();
    rec.d = r.u32();
    rec.k = r.u32();
    if (rec.d == 0 || rec.k == 0 || rec.d > (1u << 16) || rec.k > (1u << 16)) r.fail("implausible layer shape");
    try {
      if (tag <= 4) {
        const std::size_t rank = r.u32(), r_hat = r.u32();
        MoraAdapter<float> a(rec.d, rec.k, rank, r_hat, OperatorKind::from_tag(tag));
        a.set_M(r.matrix(r_hat, r_hat));
        rec.adapter = std::move(a);
      } else if (tag == kLoraTag) {
        const std::size_t rank = r.u32();
        const double alpha = r.f32();
        if (rank == 0 || rank > std::min(rec.d, rec.k)) r.fail("bad LoRA rank " + std::to_string(rank));
        Matrix<float> a = r.matrix(rank, rec.k);
        Matrix<float> b = r.matrix(rec.d, rank);
        rec.adapter = LoraAdapter<float>(rec.d, rec.k, rank, alpha, std::move(a), std::move(b));
      } else if (tag != kEmptyTag) {
        r.fail("unknown record tag " + std::to_string(tag));
      }
    } catch (const Error& e) {
      if (e.kind() == Error::Kind::Format) throw;
      r.fail(std::string("invalid adapter record: ") + e.what());
    }
    const std::uint8_t has_merged = r.u8();
    if (has_merged > 1) r.fail("bad merged flag");
    if (has_merged) rec.merged_delta = r.matrix(rec.d, rec.k);
    out.push_back(std::move(rec));
  }
  if (!r.done()) r.fail("trailing bytes");
  return out;
}

void apply_checkpoint(TinyLM<float>& model, const std::vector<AdapterRecord>& records) {
  std::string problems;
  const std::size_t expected = model.layers.size() * kFamilies;
  if (records.size() != expected) {
    problems += "  checkpoint has " + std::to_string(records.size()) + " layer records, model has " +
                std::to_string(expected) + "\n";
  }
  for (const auto& rec : records) {
    if (rec.layer >= model.layers.size()) continue;
    const auto [d, k] = model.config().shape(rec.family);
    if (rec.d != d || rec.k != k) {
      problems += "  layer " + std::to_string(rec.layer) + " " + family_name(rec.family) + ": checkpoint " +
                  shape_string(rec.d, rec.k) + ", base " + shape_string(d, k) + "\n";
    }
  }
  if (!problems.empty()) throw ShapeError("checkpoint does not fit the base weights:\n" + problems);
  for (const auto& rec : records) {
    auto& slot = model.slot(rec.layer, rec.family);
    slot.adapter = rec.adapter;
    slot.merged_delta = rec.merged_delta;
  }
}

SpectrumReport spectrum_report(const std::vector<AdapterRecord>& records, double threshold) {
  if (!(threshold > 0)) throw Error(Error::Kind::InvalidArgument, "spectrum_report: threshold must be positive");
  SpectrumReport report;
  report.threshold = threshold;
  bool saw_mora = false, saw_lora = false;
  for (const auto& rec : records) {
    Matrix<double> delta = rec.merged_delta.empty() ? Matrix<double>(rec.d, rec.k) : rec.merged_delta.cast<double>();
    if (const auto* m = std::get_if<MoraAdapter<float>>(&rec.adapter)) {
      saw_mora = true;
      report.r = m->r();
      MoraAdapter<double> a(m->d(), m->k(), m->r(), m->r_hat(), m->op());
      a.set_M(m->M().cast<double>());
      axpy(1.0, expand_delta_w(a), delta);
    } else if (const auto* lo = std::get_if<LoraAdapter<float>>(&rec.adapter)) {
      saw_lora = true;
      report.r = lo->r();
      LoraAdapter<double> a(lo->d(), lo->k(), lo->r(), lo->alpha(), lo->A().cast<double>(), lo->B().cast<double>());
      axpy(1.0, expand_delta_w(a), delta);
    }
    report.entries.push_back(spectrum_entry(rec.layer, rec.family, delta, threshold));
  }
  report.adapter = saw_mora && saw_lora ? "mixed" : saw_mora ? "mora" : saw_lora ? "lora" : "none";
  return report;
}

std::string encode_weights(const TinyLM<float>& model, std::uint64_t consumed_digest) {
  Writer w;
  w.bytes("MORW");
  w.u16(kWeightsVersion);
  w.u64(consumed_digest);
  const ModelConfig& c = model.config();
  w.u32(c.vocab);
  w.u32(c.dim);
  w.u32(c.layers);
  w.u32(c.heads);
  w.u32(c.ffn_dim);
  auto params = const_cast<TinyLM<float>&>(model).parameters();
  std::size_t count = 0;
  for (const auto& p : params) count += !p.adapter;
  w.u32(count);
  for (const auto& p : params) {
    if (p.adapter) continue;
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name);
    w.u32(p.value->rows());
    w.u32(p.value->cols());
    w.matrix(*p.value);
  }
  return w.take();
}

WeightsFile decode_weights(std::string_view bytes) {
  Reader r(bytes, "weights");
  check_magic(r, "MORW", kWeightsVersion);
  WeightsFile out;
  out.consumed_digest = r.u64();
  ModelConfig c;
  c.vocab = r.u32();
  c.dim = r.u32();
  c.layers = r.u32();
  c.heads = r.u32();
  c.ffn_dim = r.u32();
  if (c.vocab == 0 || c.dim == 0 || c.layers == 0 || c.heads == 0 || c.ffn_dim == 0 || c.dim > 65536 ||
      c.ffn_dim > 65536 || c.layers > 1024 || c.vocab > 65536)
    r.fail("implausible model dimensions");
  try {
    out.model = TinyLM<float>(c);
  } catch (const Error& e) {
    r.fail(e.what());
  }
  std::map<std::string, Matrix<float>*> by_name;
  for (auto& p : out.model.parameters()) by_name[p.name] = p.value;
  const std::uint32_t count = r.u32();
  if (count != by_name.size())
    r.fail("tensor count " + std::to_string(count) + ", expected " + std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name(r.bytes(r.u16()));
    const std::size_t rows = r.u32(), cols = r.u32();
    const auto it = by_name.find(name);
    if (it == by_name.end()) r.fail("unknown tensor '" + name + "'");
    if (it->second->rows() != rows || it->second->cols() != cols)
      r.fail("tensor '" + name + "' is " + shape_string(rows, cols) + ", expected " + shape_of(*it->second));
    *it->second = r.matrix(rows, cols);
    by_name.erase(it);
  }
  if (!r.done()) r.fail("trailing bytes");
  return out;
}

double max_relative_deviation(const Matrix<float>& a, const Matrix<float>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("max_relative_deviation: " + shape_of(a) + " vs " + shape_of(b));
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    scale = std::max(scale, std::abs(static_cast<double>(b.data()[i])));
  }
  if (scale == 0) return diff == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / scale;
}

}  // namespace mora
