#include "casp/model_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <string>

#include <zlib.h>

#include "casp/error.hpp"
#include "casp/half.hpp"
#include "casp/quantizer.hpp"

namespace casp {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'C', 'A', 'S', 'P'};
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;

enum class SlotTag : std::uint8_t { dense = 0, low_rank = 1, quantized = 2 };

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) u8(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) u8(static_cast<std::uint8_t>(v >> s));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | static_cast<std::uint16_t>(u8()) << 8);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int s = 0; s < 32; s += 8) v |= static_cast<std::uint32_t>(u8()) << s;
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int s = 0; s < 64; s += 8) v |= static_cast<std::uint64_t>(u8()) << s;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() {
    const std::uint32_t n = u32();
    auto s = raw(n);
    return {s.begin(), s.end()};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("truncated file");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

void check_elements(std::uint64_t rows, std::uint64_t cols) {
  if (rows * cols > kMaxElements) throw Error("oversized tensor: more than 2^31 elements");
}

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint32_t>& values, int bits) {
  std::vector<std::uint8_t> out((values.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t bit = 0;
  for (const auto v : values) {
    for (int b = 0; b < bits; ++b, ++bit) {
      if ((v >> b) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
  return out;
}

std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
  if (bytes.size() != (count * static_cast<std::size_t>(bits) + 7) / 8) {
    throw Error("corrupt index stream: byte length mismatch");
  }
  std::vector<std::uint32_t> out(count, 0);
  std::size_t bit = 0;
  for (auto& v : out) {
    for (int b = 0; b < bits; ++b, ++bit) {
      if ((bytes[bit / 8] >> (bit % 8)) & 1u) v |= 1u << b;
    }
  }
  return out;
}

void write_dense(ByteWriter& out, const Weights& w) {
  check_elements(static_cast<std::uint64_t>(w.rows()), static_cast<std::uint64_t>(w.cols()));
  out.u32(static_cast<std::uint32_t>(w.rows()));
  out.u32(static_cast<std::uint32_t>(w.cols()));
  for (Eigen::Index i = 0; i < w.size(); ++i) out.f32(w.data()[i]);
}

Weights read_dense(ByteReader& in) {
  const std::uint32_t rows = in.u32();
  const std::uint32_t cols = in.u32();
  check_elements(rows, cols);
  if (in.remaining() < std::uint64_t{4} * rows * cols) throw Error("truncated file: dim/payload mismatch");
  Weights w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = in.f32();
  return w;
}

void write_quantized(ByteWriter& out, const QuantizedTensor& qt) {
  validate(qt);
  check_elements(static_cast<std::uint64_t>(qt.rows), static_cast<std::uint64_t>(qt.cols));
  out.u8(static_cast<std::uint8_t>(qt.scheme));
  out.u8(static_cast<std::uint8_t>(qt.n_bits));
  out.u32(static_cast<std::uint32_t>(qt.group_size));
  out.u32(static_cast<std::uint32_t>(qt.rows));
  out.u32(static_cast<std::uint32_t>(qt.cols));
  if (qt.scheme == QuantScheme::vq) {
    out.u32(static_cast<std::uint32_t>(qt.codebook.entry_count()));
    out.u32(static_cast<std::uint32_t>(qt.codebook.dim));
    for (auto h : qt.codebook.entries) out.u16(h);
  } else {
    out.u32(static_cast<std::uint32_t>(qt.group_count()));
    for (auto h : qt.scales) out.u16(h);
    for (auto h : qt.zeros) out.u16(h);
  }
  const auto packed = pack_bits(qt.indices, qt.index_bits());
  out.u32(static_cast<std::uint32_t>(qt.indices.size()));
  out.u8(static_cast<std::uint8_t>(qt.index_bits()));
  out.u64(packed.size());
  out.raw(packed);
}

QuantizedTensor read_quantized(ByteReader& in) {
  QuantizedTensor qt;
  const std::uint8_t scheme = in.u8();
  if (scheme > static_cast<std::uint8_t>(QuantScheme::vq)) throw Error("unknown quantization scheme tag");
  qt.scheme = static_cast<QuantScheme>(scheme);
  qt.n_bits = in.u8();
  qt.group_size = static_cast<int>(in.u32());
  qt.rows = in.u32();
  qt.cols = in.u32();
  check_elements(static_cast<std::uint64_t>(qt.rows), static_cast<std::uint64_t>(qt.cols));
  if (qt.scheme == QuantScheme::vq) {
    const std::uint32_t entries = in.u32();
    const std::uint32_t dim = in.u32();
    if (dim == 0 || dim > 16 || entries > (1u << 16)) throw Error("corrupt vq codebook header");
    qt.codebook.n_bits = qt.n_bits;
    qt.codebook.dim = static_cast<int>(dim);
    qt.codebook.entries.resize(static_cast<std::size_t>(entries) * dim);
    for (auto& h : qt.codebook.entries) h = in.u16();
  } else {
    const std::uint32_t groups = in.u32();
    if (groups != qt.group_count()) throw Error("dim/payload mismatch: group count");
    qt.scales.resize(groups);
    qt.zeros.resize(groups);
    for (auto& h : qt.scales) h = in.u16();
    for (auto& h : qt.zeros) h = in.u16();
  }
  const std::uint32_t count = in.u32();
  const std::uint8_t bits = in.u8();
  const std::uint64_t nbytes = in.u64();
  if (bits != qt.index_bits() || bits == 0 || bits > 32) throw Error("corrupt index stream: bit width");
  qt.indices = unpack_bits(in.raw(static_cast<std::size_t>(nbytes)), count, bits);
  validate(qt);
  return qt;
}

void write_factor(ByteWriter& out, const Factor& f) {
  if (const auto* w = std::get_if<Weights>(&f)) {
    out.u8(static_cast<std::uint8_t>(SlotTag::dense));
    write_dense(out, *w);
  } else {
    out.u8(static_cast<std::uint8_t>(SlotTag::quantized));
    write_quantized(out, std::get<QuantizedTensor>(f));
  }
}

Factor read_factor(ByteReader& in) {
  const auto tag = static_cast<SlotTag>(in.u8());
  if (tag == SlotTag::dense) return read_dense(in);
  if (tag == SlotTag::quantized) return read_quantized(in);
  throw Error("invalid low-rank factor representation tag");
}

void write_slot(ByteWriter& out, const WeightSlot& slot) {
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Weights>) {
          out.u8(static_cast<std::uint8_t>(SlotTag::dense));
          write_dense(out, s);
        } else if constexpr (std::is_same_v<T, LowRankWeight>) {
          out.u8(static_cast<std::uint8_t>(SlotTag::low_rank));
          out.u32(static_cast<std::uint32_t>(s.rank));
          write_factor(out, s.a);
          write_factor(out, s.b);
        } else {
          out.u8(static_cast<std::uint8_t>(SlotTag::quantized));
          write_quantized(out, s);
        }
      },
      slot);
}

WeightSlot read_slot(ByteReader& in) {
  const std::uint8_t tag = in.u8();
  switch (static_cast<SlotTag>(tag)) {
    case SlotTag::dense:
      return read_dense(in);
    case SlotTag::low_rank: {
      LowRankWeight lr;
      lr.rank = static_cast<int>(in.u32());
      lr.a = read_factor(in);
      lr.b = read_factor(in);
      return lr;
    }
    case SlotTag::quantized:
      return read_quantized(in);
  }
  throw Error("invalid representation tag " + std::to_string(tag));
}

std::string layer_tensor_name(std::size_t layer, std::string_view name) {
  return "layers." + std::to_string(layer) + "." + std::string(name);
}

bool finite_halves(const std::vector<std::uint16_t>& hs) {
  for (auto h : hs) {
    if ((h & 0x7c00u) == 0x7c00u) return false;
  }
  return true;
}

bool finite(const Factor& f) {
  if (const auto* w = std::get_if<Weights>(&f)) return w->allFinite();
  const auto& q = std::get<QuantizedTensor>(f);
  return finite_halves(q.scales) && finite_halves(q.zeros) && finite_halves(q.codebook.entries);
}

void check_slot(const WeightSlot& slot, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  const auto [r, c] = dims(slot);
  if (r != rows || c != cols) {
    throw Error("tensor " + name + " has dims " + std::to_string(r) + "x" + std::to_string(c) +
                ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  bool ok = true;
  if (const auto* lr = std::get_if<LowRankWeight>(&slot)) {
    const auto [ar, ac] = dims(lr->a);
    const auto [br, bc] = dims(lr->b);
    if (lr->rank < 1 || ac != lr->rank || br != lr->rank) {
      throw Error("tensor " + name + " has inconsistent low-rank factors");
    }
    (void)ar;
    (void)bc;
    ok = finite(lr->a) && finite(lr->b);
  } else if (const auto* w = std::get_if<Weights>(&slot)) {
    ok = w->allFinite();
  } else {
    const auto& q = std::get<QuantizedTensor>(slot);
    validate(q);
    ok = finite(Factor{q});
  }
  if (!ok) throw Error("tensor " + name + " has non-finite values");
}

}  // namespace

WeightSlot& LayerWeights::slot(std::size_t i) {
  return const_cast<WeightSlot&>(std::as_const(*this).slot(i));
}

const WeightSlot& LayerWeights::slot(std::size_t i) const {
  switch (i) {
    case 0:
      return w_q;
    case 1:
      return w_k;
    case 2:
      return w_v;
    case 3:
      return w_o;
    case 4:
      return mlp_up;
    case 5:
      return mlp_down;
  }
  throw Error("layer tensor index out of range");
}

std::size_t LayerWeights::param_count() const {
  std::size_t total = 0;
  for (std::size_t i = 0; i < kNames.size(); ++i) total += casp::param_count(slot(i));
  return total;
}

void validate(const ModelCheckpoint& model) {
  const auto& cfg = model.config;
  if (cfg.n_layers == 0 || model.layers.empty()) throw Error("empty model");
  if (model.layers.size() != cfg.n_layers) {
    throw Error("layer count " + std::to_string(model.layers.size()) + " does not match config n_layers " +
                std::to_string(cfg.n_layers));
  }
  if (cfg.d == 0 || cfg.n_heads == 0 || cfg.d % cfg.n_heads != 0) {
    throw Error("hidden dim must be a positive multiple of n_heads");
  }
  if (cfg.vocab_size == 0 || cfg.max_seq_len == 0 || cfg.d_ff == 0) throw Error("config has zero-sized dims");
  const auto d = static_cast<Eigen::Index>(cfg.d);
  check_slot(model.embed, cfg.vocab_size, d, "embed");
  check_slot(model.pos, cfg.max_seq_len, d, "pos");
  const std::array<std::pair<Eigen::Index, Eigen::Index>, 6> shapes{
      {{d, d}, {d, d}, {d, d}, {d, d}, {d, cfg.d_ff}, {cfg.d_ff, d}}};
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t t = 0; t < LayerWeights::kNames.size(); ++t) {
      check_slot(model.layers[l].slot(t), shapes[t].first, shapes[t].second,
                 layer_tensor_name(l, LayerWeights::kNames[t]));
    }
  }
}

ModelCheckpoint make_toy_model(const TransformerConfig& config, std::uint64_t seed) {
  if (config.n_layers == 0) throw Error("empty model");
  ModelCheckpoint model;
  model.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto randn = [&](Eigen::Index rows, Eigen::Index cols, float stddev) {
    Weights w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * normal(rng);
    return w;
  };
  const auto d = static_cast<Eigen::Index>(config.d);
  const auto ff = static_cast<Eigen::Index>(config.d_ff);
  const float in_scale = 1.0f / std::sqrt(static_cast<float>(d));
  const float residual_scale = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  model.embed = randn(config.vocab_size, d, 0.1f);
  model.pos = randn(config.max_seq_len, d, 0.02f);
  model.layers.resize(config.n_layers);
  for (auto& layer : model.layers) {
    layer.w_q = randn(d, d, in_scale);
    layer.w_k = randn(d, d, in_scale);
    layer.w_v = randn(d, d, in_scale);
    layer.w_o = randn(d, d, in_scale * residual_scale);
    layer.mlp_up = randn(d, ff, in_scale);
    layer.mlp_down = randn(ff, d, residual_scale / std::sqrt(static_cast<float>(ff)));
  }
  validate(model);
  return model;
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelCheckpoint& model) {
  validate(model);
  ByteWriter out;
  out.raw(kMagic);
  out.u32(model.format_version);
  const auto& c = model.config;
  for (auto v : {c.d, c.n_layers, c.n_heads, c.vocab_size, c.max_seq_len, c.d_ff}) out.u32(v);
  out.u32(static_cast<std::uint32_t>(2 + model.layers.size() * LayerWeights::kNames.size()));
  out.str("embed");
  write_slot(out, model.embed);
  out.str("pos");
  write_slot(out, model.pos);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t t = 0; t < LayerWeights::kNames.size(); ++t) {
      out.str(layer_tensor_name(l, LayerWeights::kNames[t]));
      write_slot(out, model.layers[l].slot(t));
    }
  }
  const std::uint32_t crc = crc_of(out.bytes());
  out.u32(crc);
  return std::move(out.bytes());
}

ModelCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size()) throw Error("truncated file");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw Error("not a CASP checkpoint");
  if (bytes.size() < 12) throw Error("truncated file");
  ByteReader header(bytes.subspan(4));
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) throw Error("unsupported version " + std::to_string(version));
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader trailer(bytes.last(4));
  if (crc_of(body) != trailer.u32()) throw Error("checksum mismatch: file is corrupt or truncated");

  ByteReader in(body.subspan(8));
  ModelCheckpoint model;
  model.format_version = version;
  auto& c = model.config;
  for (auto* v : {&c.d, &c.n_layers, &c.n_heads, &c.vocab_size, &c.max_seq_len, &c.d_ff}) *v = in.u32();
  const std::uint32_t count = in.u32();
  std::map<std::string, WeightSlot> slots;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.str();
    WeightSlot slot = read_slot(in);
    if (!slots.emplace(std::move(name), std::move(slot)).second) throw Error("duplicate tensor record");
  }
  if (in.remaining() != 0) throw Error("trailing bytes after tensor records");

  auto take = [&](const std::string& name) -> WeightSlot {
    auto it = slots.find(name);
    if (it == slots.end()) throw Error("missing tensor " + name);
    WeightSlot s = std::move(it->second);
    slots.erase(it);
    return s;
  };
  auto take_dense = [&](const std::string& name) {
    WeightSlot s = take(name);
    if (!std::holds_alternative<Weights>(s)) throw Error("tensor " + name + " must be dense");
    return std::get<Weights>(std::move(s));
  };
  if (c.n_layers == 0) throw Error("empty model");
  model.embed = take_dense("embed");
  model.pos = take_dense("pos");
  model.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t t = 0; t < LayerWeights::kNames.size(); ++t) {
      model.layers[l].slot(t) = take(layer_tensor_name(l, LayerWeights::kNames[t]));
    }
  }
  if (!slots.empty()) throw Error("unknown tensor " + slots.begin()->first);
  validate(model);
  return model;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(model));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

std::uint32_t vision_token_begin(std::uint32_t vocab_size) { return vocab_size - vocab_size / 8; }

TokenKind token_kind(std::uint32_t token, std::uint32_t vocab_size) {
  return token >= vision_token_begin(vocab_size) ? TokenKind::vision : TokenKind::text;
}

void validate(const CalibrationSet& calib, std::uint32_t vocab_size) {
  if (calib.sequences.empty()) throw Error("calibration set is empty");
  if (calib.seq_len == 0) throw Error("calibration seq_len is zero");
  for (const auto& seq : calib.sequences) {
    if (seq.size() != calib.seq_len) throw Error("calibration sequence length differs from seq_len");
    for (auto t : seq) {
      if (t >= vocab_size) {
        throw Error("token " + std::to_string(t) + " out of vocab (size " + std::to_string(vocab_size) + ")");
      }
    }
  }
}

std::vector<std::uint8_t> serialize_calibration(const CalibrationSet& calib) {
  ByteWriter out;
  out.u32(static_cast<std::uint32_t>(calib.sequences.size()));
  out.u32(calib.seq_len);
  for (const auto& seq : calib.sequences) {
    if (seq.size() != calib.seq_len) throw Error("calibration sequence length differs from seq_len");
    for (auto t : seq) out.u32(t);
  }
  return std::move(out.bytes());
}

CalibrationSet parse_calibration(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  CalibrationSet calib;
  const std::uint32_t count = in.u32();
  calib.seq_len = in.u32();
  const std::uint64_t expected = std::uint64_t{4} * count * calib.seq_len;
  if (in.remaining() < expected) throw Error("truncated file");
  if (in.remaining() > expected) throw Error("trailing bytes after calibration tokens");
  calib.sequences.assign(count, std::vector<std::uint32_t>(calib.seq_len));
  for (auto& seq : calib.sequences) {
    for (auto& t : seq) t = in.u32();
  }
  return calib;
}

void save_calibration(const CalibrationSet& calib, const std::filesystem::path& path) {
  write_file(path, serialize_calibration(calib));
}

CalibrationSet load_calibration(const std::filesystem::path& path) {
  return parse_calibration(read_file(path));
}

CalibrationSet generate_synthetic_corpus(const SyntheticCorpusOptions& options) {
  if (options.vision_ratio < 0.0 || options.vision_ratio >= 1.0) {
    throw Error("vision ratio must lie in [0, 1)");
  }
  if (options.seq_len == 0 || options.count == 0) throw Error("corpus needs count and seq_len > 0");
  const std::uint32_t text_end = vision_token_begin(options.vocab_size);
  const std::uint32_t vision_count = options.vocab_size - text_end;
  if (text_end == 0 || (options.vision_ratio > 0.0 && vision_count == 0)) {
    throw Error("vocabulary too small for the synthetic generator");
  }
  const std::uint32_t symbols = std::max(1u, std::min(options.vision_symbols, vision_count));
  if (options.topics == 0 || options.topics > text_end) throw Error("topic count must lie in [1, text vocabulary]");
  const std::uint32_t shift = text_end / options.topics;

  std::vector<double> weights(text_end);
  for (std::uint32_t k = 0; k < text_end; ++k) {
    weights[k] = 1.0 / std::pow(static_cast<double>(k + 1), options.zipf_exponent);
  }
  std::mt19937_64 rng(options.seed);
  std::discrete_distribution<std::uint32_t> zipf(weights.begin(), weights.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (options.copy_prob < 0.0 || options.copy_prob > 1.0) throw Error("copy probability must lie in [0, 1]");
  const auto block = static_cast<std::uint32_t>(std::lround(options.vision_ratio * options.seq_len));
  CalibrationSet calib;
  calib.seq_len = options.seq_len;
  calib.sequences.resize(options.count);
  for (auto& seq : calib.sequences) {
    seq.assign(options.seq_len, 0);
    const auto topic = std::min(options.topics - 1, static_cast<std::uint32_t>(unit(rng) * options.topics));
    std::uint32_t start = options.seq_len;
    if (block > 0) {
      start = std::min(options.seq_len - block,
                       static_cast<std::uint32_t>(unit(rng) * (options.seq_len - block + 1)));
      auto draw_symbol = [&] {
        return text_end + std::min(symbols - 1, static_cast<std::uint32_t>(unit(rng) * symbols));
      };
      std::uint32_t current = draw_symbol();
      for (std::uint32_t i = start; i < start + block; ++i) {
        if (i > start && unit(rng) >= 0.75) current = draw_symbol();
        seq[i] = current;
      }
    }
    auto is_text = [&](std::uint32_t i) { return i < start || i >= start + block; };
    for (std::uint32_t i = 0; i < options.seq_len; ++i) {
      if (!is_text(i)) continue;
      const std::uint32_t fresh = (zipf(rng) + topic * shift) % text_end;
      const bool copy = unit(rng) < options.copy_prob;
      if (copy && options.copy_lag > 0 && i >= options.copy_lag && is_text(i - options.copy_lag)) {
        seq[i] = seq[i - options.copy_lag];
      } else {
        seq[i] = fresh;
      }
    }
  }
  return calib;
}

}  // namespace casp
