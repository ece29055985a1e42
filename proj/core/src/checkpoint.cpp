#include "ttq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

#include "ttq/config.hpp"
#include "ttq/errors.hpp"
#include "ttq/quant.hpp"

namespace ttq::io {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class RecordKind : std::uint8_t {
  DenseLinear = 0,
  TTLinear = 1,
  TTMEmbedding = 2,
  DenseEmbedding = 3,
  Plain = 4,
};

class Writer {
 public:
  std::vector<std::uint8_t> bytes;
  std::uint64_t payload = 0;

  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void put_sizes(const std::vector<std::size_t>& v) {
    put<std::uint8_t>(static_cast<std::uint8_t>(v.size()));
    for (std::size_t x : v) put<std::uint32_t>(static_cast<std::uint32_t>(x));
  }

  // Payload writers (counted).
  void f32(double v) {
    put<float>(static_cast<float>(v));
    payload += 4;
  }
  void f32s(std::span<const double> v) {
    for (double x : v) f32(x);
  }
  void packed(std::span<const std::uint8_t> b) {
    bytes.insert(bytes.end(), b.begin(), b.end());
    payload += b.size();
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::size_t> get_sizes() {
    const auto n = get<std::uint8_t>();
    std::vector<std::size_t> v(n);
    for (auto& x : v) x = get<std::uint32_t>();
    return v;
  }
  double f32() { return static_cast<double>(get<float>()); }
  void f32s(std::vector<double>& out) {
    for (double& x : out) x = f32();
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IntegrityError("checkpoint record truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_plan(Writer& w, const tt::TensorShapePlan& p) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(p.format));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.rows));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.cols));
  w.put_sizes(p.row_factors);
  w.put_sizes(p.col_factors);
  w.put_sizes(p.ranks);
}

tt::TensorShapePlan read_plan(Reader& r) {
  tt::TensorShapePlan p;
  const auto fmt = r.get<std::uint8_t>();
  if (fmt > 1) throw IntegrityError("unknown plan format in checkpoint");
  p.format = static_cast<tt::Format>(fmt);
  p.rows = r.get<std::uint32_t>();
  p.cols = r.get<std::uint32_t>();
  p.row_factors = r.get_sizes();
  p.col_factors = r.get_sizes();
  p.ranks = r.get_sizes();
  try {
    p.validate();
  } catch (const Error& e) {
    throw IntegrityError(std::string("invalid plan in checkpoint: ") + e.what());
  }
  return p;
}

/// Cores as one code stream under a shared scale, or FP32 values.
void write_cores(Writer& w, const std::vector<ad::Param>& cores, int bits, double scale) {
  if (quant::is_quantized(bits)) {
    const double delta = static_cast<double>(static_cast<float>(scale));
    std::vector<std::int8_t> codes;
    for (const auto& c : cores) {
      const auto q = quant::quantize(c.value.data, delta, bits).codes;
      codes.insert(codes.end(), q.begin(), q.end());
    }
    w.packed(quant::pack_codes(codes, bits));
  } else {
    for (const auto& c : cores) w.f32s(c.value.data);
  }
}

void read_cores(Reader& r, std::vector<ad::Param>& cores, const std::string& name, const tt::TensorShapePlan& plan,
                int bits, double delta) {
  cores.clear();
  std::size_t total = 0;
  for (std::size_t k = 0; k < plan.num_cores(); ++k) total += plan.core_size(k);
  std::vector<double> values(total);
  if (quant::is_quantized(bits)) {
    const auto codes = quant::unpack_codes(r.take(quant::packed_size(total, bits)), total, bits);
    for (std::size_t i = 0; i < total; ++i) values[i] = delta * static_cast<double>(codes[i]);
  } else {
    r.f32s(values);
  }
  std::size_t offset = 0;
  for (std::size_t k = 0; k < plan.num_cores(); ++k) {
    const std::size_t n = plan.core_size(k);
    Tensor t(plan.core_shape(k), std::vector<double>(values.begin() + offset, values.begin() + offset + n));
    cores.push_back({name + ".core" + std::to_string(k), std::move(t)});
    offset += n;
  }
}

void write_linear(Writer& w, const model::LinearLayer& l) {
  w.put_string(l.name);
  if (!l.compressed) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(RecordKind::DenseLinear));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.out_features()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.in_features()));
    w.f32s(l.weight.value.data);
  } else {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(RecordKind::TTLinear));
    write_plan(w, l.plan);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.weight_bits));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.activation_bits));
    if (l.quantized()) {
      w.f32(l.weight_scale.value[0]);
      w.f32(l.activation_scale.value[0]);
      w.f32s(l.stage_scales);
    }
    write_cores(w, l.cores, l.weight_bits, l.quantized() ? l.weight_scale.value[0] : 1.0);
  }
  w.f32s(l.bias.value.data);
}

void read_linear(Reader& r, model::LinearLayer& l, RecordKind kind) {
  if (kind == RecordKind::DenseLinear) {
    if (l.compressed) throw IntegrityError(l.name + ": checkpoint has a dense layer where the config has a TT layer");
    const std::size_t rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
    if (rows != l.out_features() || cols != l.in_features()) throw IntegrityError(l.name + ": shape mismatch");
    r.f32s(l.weight.value.data);
  } else if (kind == RecordKind::TTLinear) {
    if (!l.compressed) throw IntegrityError(l.name + ": checkpoint has a TT layer where the config has a dense layer");
    auto plan = read_plan(r);
    if (plan.format != tt::Format::TT || plan.rows != l.out_features() || plan.cols != l.in_features())
      throw IntegrityError(l.name + ": plan does not match the layer");
    l.weight_bits = r.get<std::uint8_t>();
    l.activation_bits = r.get<std::uint8_t>();
    try {
      quant::check_bits(l.weight_bits);
      quant::check_bits(l.activation_bits);
    } catch (const Error&) {
      throw IntegrityError(l.name + ": invalid bit widths in checkpoint");
    }
    double delta = 1.0;
    if (l.quantized()) {
      delta = r.f32();
      l.weight_scale = {l.name + ".weight_scale", Tensor::scalar(delta), ad::ParamKind::Scale};
      l.activation_scale = {l.name + ".activation_scale", Tensor::scalar(r.f32()), ad::ParamKind::Scale};
      l.stage_scales.assign(plan.num_cores() - 1, 0.0);
      r.f32s(l.stage_scales);
    } else {
      l.stage_scales.clear();
    }
    read_cores(r, l.cores, l.name, plan, l.weight_bits, delta);
    l.plan = std::move(plan);
  } else {
    throw IntegrityError(l.name + ": unexpected record kind");
  }
  r.f32s(l.bias.value.data);
}

}  // namespace

std::vector<std::uint8_t> serialize(const model::TransformerModel& m, CheckpointLayout* layout) {
  Writer body;
  body.put_string(config::model_config_to_json(m.config()));

  std::uint32_t records = 0;
  Writer rec;
  // Embedding
  const auto& e = m.embedding;
  rec.put_string(e.name);
  if (e.compressed) {
    rec.put<std::uint8_t>(static_cast<std::uint8_t>(RecordKind::TTMEmbedding));
    write_plan(rec, e.plan);
    rec.put<std::uint8_t>(static_cast<std::uint8_t>(e.weight_bits));
    if (e.quantized()) rec.f32(e.weight_scale.value[0]);
    write_cores(rec, e.cores, e.weight_bits, e.quantized() ? e.weight_scale.value[0] : 1.0);
  } else {
    rec.put<std::uint8_t>(static_cast<std::uint8_t>(RecordKind::DenseEmbedding));
    rec.put<std::uint32_t>(static_cast<std::uint32_t>(e.vocab_size()));
    rec.put<std::uint32_t>(static_cast<std::uint32_t>(e.hidden()));
    rec.f32s(e.table.value.data);
  }
  ++records;
  auto plain = [&](const std::string& name, std::initializer_list<const Tensor*> parts) {
    rec.put_string(name);
    rec.put<std::uint8_t>(static_cast<std::uint8_t>(RecordKind::Plain));
    std::uint32_t n = 0;
    for (const Tensor* t : parts) n += static_cast<std::uint32_t>(t->size());
    rec.put<std::uint32_t>(n);
    for (const Tensor* t : parts) rec.f32s(t->data);
    ++records;
  };
  plain("position", {&m.position.value});
  for (const auto& b : m.encoders) {
    plain(b.ln1.name, {&b.ln1.gamma.value, &b.ln1.beta.value});
    plain(b.ln2.name, {&b.ln2.gamma.value, &b.ln2.beta.value});
  }
  for (const model::LinearLayer* l : m.linears()) {
    write_linear(rec, *l);
    ++records;
  }
  body.put<std::uint32_t>(records);
  body.bytes.insert(body.bytes.end(), rec.bytes.begin(), rec.bytes.end());

  Writer out;
  out.bytes.insert(out.bytes.end(), {'T', 'T', 'Q', '1'});
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put<std::uint64_t>(config::config_digest(m.config()));
  out.put<std::uint64_t>(body.bytes.size());
  out.put<std::uint32_t>(
      static_cast<std::uint32_t>(crc32(0L, body.bytes.data(), static_cast<uInt>(body.bytes.size()))));
  out.bytes.insert(out.bytes.end(), body.bytes.begin(), body.bytes.end());
  if (layout) {
    layout->file_bytes = out.bytes.size();
    layout->payload_bytes = rec.payload;
    layout->metadata_bytes = layout->file_bytes - layout->payload_bytes;
  }
  return out.bytes;
}

model::TransformerModel deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw IntegrityError("checkpoint shorter than its header");
  if (std::memcmp(bytes.data(), "TTQ1", 4) != 0) throw IntegrityError("bad checkpoint magic");
  Reader h(bytes.subspan(4, kHeaderBytes - 4));
  const auto version = h.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")");
  const auto digest = h.get<std::uint64_t>();
  const auto length = h.get<std::uint64_t>();
  const auto crc = h.get<std::uint32_t>();
  if (length != bytes.size() - kHeaderBytes)
    throw IntegrityError("checkpoint length mismatch: header says " + std::to_string(length) + " body bytes, file has " +
                         std::to_string(bytes.size() - kHeaderBytes));
  const auto body = bytes.subspan(kHeaderBytes);
  if (static_cast<std::uint32_t>(crc32(0L, body.data(), static_cast<uInt>(body.size()))) != crc)
    throw IntegrityError("checkpoint checksum mismatch");

  Reader r(body);
  model::ModelConfig cfg;
  try {
    cfg = config::model_config_from_json(r.get_string());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint config unreadable: ") + e.what());
  }
  if (config::config_digest(cfg) != digest) throw IntegrityError("checkpoint config digest mismatch");
  model::TransformerModel m(cfg);

  std::map<std::string, model::LinearLayer*> linears;
  for (model::LinearLayer* l : m.linears()) linears[l->name] = l;
  std::map<std::string, Tensor*> plains{{"position", &m.position.value}};
  std::map<std::string, model::LayerNorm*> norms;
  for (auto& b : m.encoders) {
    norms[b.ln1.name] = &b.ln1;
    norms[b.ln2.name] = &b.ln2;
  }

  const auto records = r.get<std::uint32_t>();
  std::size_t seen = 0;
  for (std::uint32_t i = 0; i < records; ++i) {
    const std::string name = r.get_string();
    const auto kind = static_cast<RecordKind>(r.get<std::uint8_t>());
    if (name == m.embedding.name) {
      auto& e = m.embedding;
      if (kind == RecordKind::TTMEmbedding) {
        if (!e.compressed) throw IntegrityError("embedding kind differs from the config");
        auto plan = read_plan(r);
        if (plan.format != tt::Format::TTM || plan.rows != e.vocab_size() || plan.cols != e.hidden())
          throw IntegrityError("embedding plan does not match the config");
        e.weight_bits = r.get<std::uint8_t>();
        double delta = 1.0;
        if (e.quantized()) {
          delta = r.f32();
          e.weight_scale = {e.name + ".weight_scale", Tensor::scalar(delta), ad::ParamKind::Scale};
        }
        read_cores(r, e.cores, e.name, plan, e.weight_bits, delta);
        e.plan = std::move(plan);
      } else if (kind == RecordKind::DenseEmbedding) {
        if (e.compressed) throw IntegrityError("embedding kind differs from the config");
        const std::size_t rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
        if (rows != e.vocab_size() || cols != e.hidden()) throw IntegrityError("embedding shape mismatch");
        r.f32s(e.table.value.data);
      } else {
        throw IntegrityError("embedding record has the wrong kind");
      }
    } else if (kind == RecordKind::Plain) {
      const std::size_t n = r.get<std::uint32_t>();
      if (auto it = plains.find(name); it != plains.end()) {
        if (n != it->second->size()) throw IntegrityError(name + ": size mismatch");
        r.f32s(it->second->data);
      } else if (auto nt = norms.find(name); nt != norms.end()) {
        auto& ln = *nt->second;
        if (n != ln.gamma.value.size() + ln.beta.value.size()) throw IntegrityError(name + ": size mismatch");
        r.f32s(ln.gamma.value.data);
        r.f32s(ln.beta.value.data);
      } else {
        throw IntegrityError("unknown record " + name);
      }
    } else if (auto it = linears.find(name); it != linears.end()) {
      read_linear(r, *it->second, kind);
    } else {
      throw IntegrityError("unknown record " + name);
    }
    ++seen;
  }
  if (!r.done()) throw IntegrityError("trailing bytes after the last checkpoint record");
  if (seen != 2 + 2 * m.encoders.size() + m.linears().size()) throw IntegrityError("checkpoint is missing records");
  return m;
}

CheckpointLayout save_checkpoint(const model::TransformerModel& model, const std::filesystem::path& path) {
  CheckpointLayout layout;
  const auto bytes = serialize(model, &layout);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
  return layout;
}

model::TransformerModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace ttq::io
