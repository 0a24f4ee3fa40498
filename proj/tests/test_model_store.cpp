#include <cmath>
#include <cstring>
#include <vector>

#include <doctest.h>

#include "casp/error.hpp"
#include "casp/lowrank.hpp"
#include "casp/model_store.hpp"
#include "casp/quantizer.hpp"
#include "test_util.hpp"

using namespace casp;

namespace {

TransformerConfig small_config() {
  TransformerConfig c;
  c.d = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 6;
  c.d_ff = 12;
  return c;
}

void check_same(const WeightSlot& a, const WeightSlot& b) {
  REQUIRE(a.index() == b.index());
  CHECK(materialize(a) == materialize(b));
  CHECK(param_count(a) == param_count(b));
  CHECK(storage_bits(a) == storage_bits(b));
}

void write_u32(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

// Scalar re-implementation of one pre-norm block on a short sequence.
std::vector<std::vector<double>> scalar_block(const ModelCheckpoint& m, std::size_t layer,
                                              const std::vector<std::vector<double>>& x) {
  const auto d = static_cast<int>(m.config.d);
  const auto ff = static_cast<int>(m.config.d_ff);
  const auto heads = static_cast<int>(m.config.n_heads);
  const int dh = d / heads;
  const int n = static_cast<int>(x.size());
  const Weights& wq = std::get<Weights>(m.layers[layer].w_q);
  const Weights& wk = std::get<Weights>(m.layers[layer].w_k);
  const Weights& wv = std::get<Weights>(m.layers[layer].w_v);
  const Weights& wo = std::get<Weights>(m.layers[layer].w_o);
  const Weights& up = std::get<Weights>(m.layers[layer].mlp_up);
  const Weights& down = std::get<Weights>(m.layers[layer].mlp_down);
  auto norm = [&](const std::vector<double>& v) {
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= d;
    double var = 0.0;
    for (double e : v) var += (e - mean) * (e - mean);
    var /= d;
    std::vector<double> out(v.size());
    for (int i = 0; i < d; ++i) out[i] = (v[i] - mean) / std::sqrt(var + 1e-5);
    return out;
  };
  auto matvec = [](const std::vector<double>& v, const Weights& w) {
    std::vector<double> out(static_cast<std::size_t>(w.cols()), 0.0);
    for (int c = 0; c < w.cols(); ++c) {
      for (int r = 0; r < w.rows(); ++r) out[c] += v[r] * w(r, c);
    }
    return out;
  };
  std::vector<std::vector<double>> q(n), k(n), v(n), out(n);
  for (int t = 0; t < n; ++t) {
    const auto a = norm(x[t]);
    q[t] = matvec(a, wq);
    k[t] = matvec(a, wk);
    v[t] = matvec(a, wv);
  }
  for (int t = 0; t < n; ++t) {
    std::vector<double> ctx(d, 0.0);
    for (int h = 0; h < heads; ++h) {
      std::vector<double> logit(t + 1);
      double mx = -1e300;
      for (int s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (int i = h * dh; i < (h + 1) * dh; ++i) dot += q[t][i] * k[s][i];
        logit[s] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logit[s]);
      }
      double z = 0.0;
      for (int s = 0; s <= t; ++s) z += std::exp(logit[s] - mx);
      for (int s = 0; s <= t; ++s) {
        const double p = std::exp(logit[s] - mx) / z;
        for (int i = h * dh; i < (h + 1) * dh; ++i) ctx[i] += p * v[s][i];
      }
    }
    const auto o = matvec(ctx, wo);
    std::vector<double> h1(d);
    for (int i = 0; i < d; ++i) h1[i] = x[t][i] + o[i];
    auto hidden = matvec(norm(h1), up);
    for (int j = 0; j < ff; ++j) {
      const double u = hidden[j];
      hidden[j] = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
    }
    const auto mlp = matvec(hidden, down);
    out[t].resize(d);
    for (int i = 0; i < d; ++i) out[t][i] = h1[i] + mlp[i];
  }
  return out;
}

}  // namespace

TEST_CASE("save then load is the identity for a fresh seed-42 model") {
  const ModelCheckpoint m = make_toy_model(TransformerConfig{}, 42);
  const auto dir = casp::testing::scratch_dir("roundtrip");
  save_checkpoint(m, dir / "m.caspkpt");
  const ModelCheckpoint back = load_checkpoint(dir / "m.caspkpt");
  CHECK(back.config == m.config);
  CHECK(back.embed == m.embed);
  CHECK(back.pos == m.pos);
  REQUIRE(back.layers.size() == m.layers.size());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    for (std::size_t i = 0; i < LayerWeights::kNames.size(); ++i) check_same(m.layers[l].slot(i), back.layers[l].slot(i));
  }
}

TEST_CASE("round trip preserves low-rank and quantized representations") {
  ModelCheckpoint m = make_toy_model(small_config(), 3);
  auto& layer = m.layers[0];
  const Weights wq = std::get<Weights>(layer.w_q);
  const auto f = truncated_svd<double>(wq.cast<double>(), 2);
  layer.w_q = LowRankWeight{Weights(f.a.cast<float>()), quantize_rtn(f.b.cast<float>(), 3, 5), 2};
  layer.w_k = quantize_vq(std::get<Weights>(layer.w_k), 1, 4, 7);
  layer.mlp_up = quantize_rtn(std::get<Weights>(layer.mlp_up), 2, 128);
  layer.mlp_down = quantize_greedy(std::get<Weights>(layer.mlp_down), casp::testing::randn(40, 12, 1), 4, 7);
  const ModelCheckpoint back = parse_checkpoint(serialize_checkpoint(m));
  for (std::size_t i = 0; i < LayerWeights::kNames.size(); ++i) check_same(m.layers[0].slot(i), back.layers[0].slot(i));
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(m));
}

TEST_CASE("param counts follow the active representation") {
  ModelCheckpoint m = make_toy_model(small_config(), 3);
  CHECK(param_count(m.layers[0].w_q) == 64);
  CHECK(param_count(m.layers[0].mlp_up) == 96);
  m.layers[0].w_q = LowRankWeight{Weights::Zero(8, 3), Weights::Zero(3, 8), 3};
  CHECK(param_count(m.layers[0].w_q) == 3 * (8 + 8));
  CHECK(m.layers[0].param_count() == 48 + 3 * 64 + 2 * 96);
}

TEST_CASE("a flipped payload byte trips the checksum") {
  auto bytes = serialize_checkpoint(make_toy_model(small_config(), 5));
  bytes[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("checksum"), Error);
}

TEST_CASE("bad magic, unknown version and truncation are rejected") {
  const auto good = serialize_checkpoint(make_toy_model(small_config(), 5));
  auto bad_magic = good;
  std::memcpy(bad_magic.data(), "XXXX", 4);
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad_magic), "not a CASP checkpoint", Error);
  auto bad_version = good;
  write_u32(bad_version, 4, 999);
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad_version), doctest::Contains("unsupported version"), Error);
  const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + 20);
  CHECK_THROWS_AS(parse_checkpoint(truncated), Error);
  CHECK_THROWS_AS(parse_checkpoint(std::vector<std::uint8_t>{'C', 'A'}), Error);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/m.caspkpt"), Error);
}

TEST_CASE("models without layers are rejected") {
  TransformerConfig c = small_config();
  c.n_layers = 0;
  CHECK_THROWS_WITH_AS(make_toy_model(c, 1), "empty model", Error);
  ModelCheckpoint m = make_toy_model(small_config(), 1);
  m.layers.clear();
  m.config.n_layers = 0;
  CHECK_THROWS_WITH_AS(serialize_checkpoint(m), "empty model", Error);
}

TEST_CASE("validate catches wrong dims and non-finite weights") {
  ModelCheckpoint m = make_toy_model(small_config(), 1);
  m.layers[1].w_v = Weights::Zero(8, 7);
  CHECK_THROWS_AS(validate(m), Error);
  m = make_toy_model(small_config(), 1);
  std::get<Weights>(m.layers[0].w_o)(0, 0) = std::nanf("");
  CHECK_THROWS_WITH_AS(validate(m), doctest::Contains("non-finite"), Error);
}

TEST_CASE("calibration files round trip and are validated") {
  SyntheticCorpusOptions gen;
  gen.count = 5;
  gen.seq_len = 9;
  gen.vocab_size = 16;
  gen.vision_ratio = 0.5;
  gen.seed = 4;
  const CalibrationSet calib = generate_synthetic_corpus(gen);
  const auto dir = casp::testing::scratch_dir("calib");
  save_calibration(calib, dir / "c.casptok");
  const CalibrationSet back = load_calibration(dir / "c.casptok");
  CHECK(back.seq_len == 9);
  CHECK(back.sequences == calib.sequences);
  CHECK(serialize_calibration(calib).size() == 8 + 4 * 5 * 9);
  CHECK_THROWS_AS(validate(calib, 8), Error);
  auto bytes = serialize_calibration(calib);
  bytes.pop_back();
  CHECK_THROWS_AS(parse_calibration(bytes), Error);
}

TEST_CASE("synthetic corpus: one contiguous vision block of the requested length") {
  for (double ratio : {0.0, 0.25, 0.5, 0.75}) {
    SyntheticCorpusOptions gen;
    gen.count = 20;
    gen.vision_ratio = ratio;
    gen.seed = 9;
    const CalibrationSet calib = generate_synthetic_corpus(gen);
    const auto expected = static_cast<long>(std::lround(ratio * gen.seq_len));
    for (const auto& seq : calib.sequences) {
      long first = -1, last = -1, count = 0;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (token_kind(seq[i], gen.vocab_size) == TokenKind::vision) {
          if (first < 0) first = static_cast<long>(i);
          last = static_cast<long>(i);
          ++count;
        }
      }
      CHECK(count == expected);
      if (count > 0) CHECK(last - first + 1 == count);
    }
  }
  SyntheticCorpusOptions bad;
  bad.vision_ratio = 1.0;
  CHECK_THROWS_AS(generate_synthetic_corpus(bad), Error);
}

TEST_CASE("forward_collect: determinism and shapes") {
  const ModelCheckpoint m = make_toy_model(small_config(), 7);
  CalibrationSet calib;
  calib.seq_len = 4;
  calib.sequences = {{1, 2, 3, 15}};
  const auto a = forward_collect(m, calib);
  const auto b = forward_collect(m, calib);
  REQUIRE(a.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(a[l].x_in.x.rows() == 4);
    CHECK(a[l].x_in.x.cols() == 8);
    CHECK(a[l].x_out.x.rows() == 4);
    CHECK(a[l].x_out.x.cols() == 8);
    CHECK(a[l].x_out.x == b[l].x_out.x);
    CHECK(a[l].attn_in == b[l].attn_in);
  }
  CHECK(a[1].x_in.x == a[0].x_out.x);
  CHECK(a[0].x_in.token_kinds[3] == TokenKind::vision);
  calib.sequences = {{1, 2, 3, 16}};
  CHECK_THROWS_AS(forward_collect(m, calib), Error);
}

TEST_CASE("forward_collect matches a scalar block on a single token (seed 7)") {
  const ModelCheckpoint m = make_toy_model(small_config(), 7);
  CalibrationSet calib;
  calib.seq_len = 1;
  calib.sequences = {{5}};
  const auto acts = forward_collect(m, calib);
  std::vector<double> x0(8);
  for (int i = 0; i < 8; ++i) x0[i] = static_cast<double>(m.embed(5, i)) + static_cast<double>(m.pos(0, i));
  const auto out = scalar_block(m, 0, {x0});
  for (int i = 0; i < 8; ++i) CHECK(acts[0].x_out.x(0, i) == doctest::Approx(out[0][i]).epsilon(1e-5));
}

TEST_CASE("forward_collect matches a scalar block with causal multi-head attention") {
  const ModelCheckpoint m = make_toy_model(small_config(), 8);
  CalibrationSet calib;
  calib.seq_len = 5;
  calib.sequences = {{3, 1, 4, 1, 5}};
  const auto acts = forward_collect(m, calib);
  std::vector<std::vector<double>> x(5, std::vector<double>(8));
  for (int t = 0; t < 5; ++t) {
    for (int i = 0; i < 8; ++i) x[t][i] = acts[1].x_in.x(t, i);
  }
  const auto out = scalar_block(m, 1, x);
  for (int t = 0; t < 5; ++t) {
    for (int i = 0; i < 8; ++i) CHECK(acts[1].x_out.x(t, i) == doctest::Approx(out[t][i]).epsilon(1e-5));
  }
}
