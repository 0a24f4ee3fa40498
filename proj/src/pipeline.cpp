#include "casp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "casp/attention_analysis.hpp"
#include "casp/error.hpp"
#include "casp/lowrank.hpp"
#include "casp/quantizer.hpp"
#include "casp/toy_transformer.hpp"

namespace casp {

namespace {

template <typename Fn>
auto run_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
  for (std::uint64_t v : {a, b}) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  }
  return h;
}

QuantizedTensor quantize_matrix(const Weights& w, const Eigen::MatrixXd* inputs, QuantScheme scheme, int bits,
                                int group_size, std::uint64_t seed) {
  switch (scheme) {
    case QuantScheme::rtn:
      return quantize_rtn(w, bits, group_size);
    case QuantScheme::greedy:
      if (inputs == nullptr) throw Error("greedy quantization needs calibration activations");
      return quantize_greedy(w, *inputs, bits, group_size);
    case QuantScheme::vq:
      return quantize_vq(w, bits, group_size, seed);
  }
  throw Error("unknown quantization scheme");
}

const Eigen::MatrixXd* tensor_inputs(const LayerActivations* acts, std::size_t tensor) {
  if (acts == nullptr) return nullptr;
  switch (tensor) {
    case 0:
    case 1:
    case 2:
      return &acts->attn_in;
    case 3:
      return &acts->attn_ctx;
    case 4:
      return &acts->mlp_in;
    default:
      return &acts->mlp_hidden;
  }
}

}  // namespace

void validate(const CompressionRecipe& recipe) {
  if (recipe.lowrank && !(recipe.rank_keep > 0.0 && recipe.rank_keep <= 1.0)) {
    throw Error("rank_keep must lie in (0, 1]");
  }
  if (!(recipe.b_avg > 0.0)) throw Error("b_avg must be positive");
  if (recipe.mu && !(*recipe.mu > 0.0)) throw Error("mu must be positive");
  if (recipe.allowed_bits.empty()) throw Error("allowed bit set is empty");
  if (recipe.group_size < 1) throw Error("group size must be positive");
  if (recipe.eta < 0.0 || recipe.eta >= 1.0) throw Error("eta must lie in (0, 1), or 0 for the default");
  for (int b : recipe.allowed_bits) {
    if (!recipe.scheme) continue;
    if (*recipe.scheme == QuantScheme::vq) {
      if (b < 1 || b * recipe.group_size > 16) {
        throw Error("vq needs bits * group <= 16; got bits " + std::to_string(b) + ", group " +
                    std::to_string(recipe.group_size));
      }
    } else if (b != 2 && b != 3 && b != 4 && b != 8) {
      throw Error("allowed bits must be drawn from {2, 3, 4, 8}");
    }
  }
}

std::size_t original_block_params(const TransformerConfig& config) {
  return config.block_params() * config.n_layers;
}

double layer_effective_bits(const LayerWeights& layer) {
  std::uint64_t bits = 0;
  for (std::size_t t = 0; t < LayerWeights::kNames.size(); ++t) bits += storage_bits(layer.slot(t));
  return static_cast<double>(bits) / static_cast<double>(layer.param_count());
}

double average_effective_bits(const ModelCheckpoint& model) {
  std::uint64_t bits = 0;
  for (const auto& layer : model.layers) {
    for (std::size_t t = 0; t < LayerWeights::kNames.size(); ++t) bits += storage_bits(layer.slot(t));
  }
  return static_cast<double>(bits) / static_cast<double>(original_block_params(model.config));
}

void quantize_block(LayerWeights& layer, const LayerActivations* acts, QuantScheme scheme, int bits,
                    int group_size, std::uint64_t seed) {
  for (std::size_t t = 0; t < LayerWeights::kNames.size(); ++t) {
    WeightSlot& slot = layer.slot(t);
    const Eigen::MatrixXd* inputs = scheme == QuantScheme::greedy ? tensor_inputs(acts, t) : nullptr;
    if (auto* w = std::get_if<Weights>(&slot)) {
      slot = quantize_matrix(*w, inputs, scheme, bits, group_size, mix_seed(seed, t, 0));
    } else if (auto* lr = std::get_if<LowRankWeight>(&slot)) {
      const auto* a = std::get_if<Weights>(&lr->a);
      const auto* b = std::get_if<Weights>(&lr->b);
      if (a == nullptr || b == nullptr) throw Error("low-rank factors are already quantized");
      QuantizedTensor qa = quantize_matrix(*a, inputs, scheme, bits, group_size, mix_seed(seed, t, 1));
      Eigen::MatrixXd mid;
      if (inputs != nullptr) mid = *inputs * dequantize(qa).cast<double>();
      QuantizedTensor qb = quantize_matrix(*b, inputs != nullptr ? &mid : nullptr, scheme, bits, group_size,
                                           mix_seed(seed, t, 2));
      lr->a = std::move(qa);
      lr->b = std::move(qb);
    } else {
      throw Error("tensor " + std::string(LayerWeights::kNames[t]) + " is already quantized");
    }
  }
}

std::vector<LayerAttentionSummary> analyze_attention(const ModelCheckpoint& original,
                                                     const ModelCheckpoint& compressed,
                                                     std::span<const LayerActivations> acts, double eta,
                                                     bool causal) {
  if (!(original.config == compressed.config)) throw Error("models have different configs");
  if (acts.size() != original.layers.size()) throw Error("activation count does not match layer count");
  const auto heads = static_cast<Eigen::Index>(original.config.n_heads);
  const auto dh = static_cast<Eigen::Index>(original.config.head_dim());
  std::vector<LayerAttentionSummary> out(acts.size());
  for (std::size_t l = 0; l < acts.size(); ++l) {
    const Eigen::MatrixXd wq = materialize(original.layers[l].w_q);
    const Eigen::MatrixXd wk = materialize(original.layers[l].w_k);
    const Eigen::MatrixXd wq2 = materialize(compressed.layers[l].w_q);
    const Eigen::MatrixXd wk2 = materialize(compressed.layers[l].w_k);
    const auto n = static_cast<Eigen::Index>(acts[l].seq_len);
    const Eigen::Index sequences = acts[l].attn_in.rows() / n;
    const double threshold = eta > 0.0 ? eta : default_eta(n);
    LayerAttentionSummary& sum = out[l];
    sum.n_tokens = acts[l].seq_len;
    for (Eigen::Index s = 0; s < sequences; ++s) {
      const Eigen::MatrixXd x = acts[l].attn_in.middleRows(s * n, n);
      for (Eigen::Index h = 0; h < heads; ++h) {
        const Eigen::MatrixXd q = wq.middleCols(h * dh, dh), k = wk.middleCols(h * dh, dh);
        const Eigen::MatrixXd q2 = wq2.middleCols(h * dh, dh), k2 = wk2.middleCols(h * dh, dh);
        const ErrorReport r = compression_error<double>(x, q, k, q2, k2, dh, threshold, causal);
        sum.density += r.density;
        sum.e += r.e;
        sum.e_row_sum += r.e_row_sum;
        sum.delta_y_norm += r.delta_y_norm;
        sum.bound_exact += r.bound_exact;
        sum.bound_density += r.bound_density;
        sum.taylor_residual += r.taylor_residual_estimate;
      }
    }
    const double count = static_cast<double>(sequences * heads);
    for (double* v : {&sum.density, &sum.e, &sum.e_row_sum, &sum.delta_y_norm, &sum.bound_exact,
                      &sum.bound_density, &sum.taylor_residual}) {
      *v /= count;
    }
    sum.sparsity = 1.0 - sum.density;
  }
  return out;
}

CompressionResult compress_casp(const ModelCheckpoint& model, const CalibrationSet& calib,
                                const CalibrationSet& heldout, const CompressionRecipe& recipe) {
  run_stage("recipe", [&] {
    validate(recipe);
    validate(model);
    validate(calib, model.config.vocab_size);
    validate(heldout, model.config.vocab_size);
    return 0;
  });
  const auto acts = run_stage("forward_collect", [&] { return forward_collect(model, calib); });

  ModelCheckpoint out = model;
  if (recipe.lowrank) {
    out = run_stage("lowrank", [&] {
      return apply_lowrank_qk(model, acts, LowRankOptions{recipe.rank_keep, 0.0});
    });
  }
  const LayerImportance importance = run_stage("block_influence", [&] { return layer_importance(acts); });

  const double original = static_cast<double>(original_block_params(model.config));
  Eigen::VectorXd params(static_cast<Eigen::Index>(out.layers.size()));
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    params[static_cast<Eigen::Index>(l)] = static_cast<double>(out.layers[l].param_count());
  }
  // Bits freed by the factorization are spent on the remaining weights so the
  // budget stays b_avg per original weight.
  const double target = recipe.b_avg * original / params.sum();
  BitPlan plan = run_stage("allocate", [&] {
    const double mu = recipe.mu.value_or(default_mu(importance.scores, params));
    BitPlan p = round_bits(allocate_bits(importance, params, target, mu), recipe.allowed_bits);
    const int lo = *std::min_element(p.bits_int.begin(), p.bits_int.end());
    if (recipe.allocation == AllocationMode::uniform) {
      std::fill(p.bits_int.begin(), p.bits_int.end(), lo);
    } else if (recipe.allocation == AllocationMode::random) {
      std::vector<int> widths = p.bits_int;
      std::sort(widths.begin(), widths.end());
      std::vector<std::size_t> order(widths.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(mix_seed(recipe.seed, 0x72616e64ull, 0));
      std::shuffle(order.begin(), order.end(), rng);
      // Same multiset of widths, randomly placed.
      for (std::size_t i = 0; i < order.size(); ++i) p.bits_int[order[i]] = widths[widths.size() - 1 - i];
    }
    return p;
  });

  if (recipe.scheme) {
    run_stage("quantize", [&] {
      std::vector<LayerActivations> qacts;
      if (*recipe.scheme == QuantScheme::greedy) qacts = forward_collect(out, calib);
      for (std::size_t l = 0; l < out.layers.size(); ++l) {
        quantize_block(out.layers[l], qacts.empty() ? nullptr : &qacts[l], *recipe.scheme, plan.bits_int[l],
                       recipe.group_size, mix_seed(recipe.seed, l, 0x7175616eull));
      }
      validate(out);
      return 0;
    });
  }

  CompressionResult result{std::move(out), {}, plan};
  run_stage("evaluate", [&] {
    EvalReport& r = result.report;
    r.ppl_before = evaluate_ppl(model, heldout);
    r.ppl = evaluate_ppl(result.model, heldout);
    r.model_size_bytes = serialize_checkpoint(result.model).size();
    r.avg_effective_bits = average_effective_bits(result.model);
    r.allocation_target = target;
    r.mu = plan.mu;
    r.lambda = plan.lambda;
    const auto attention = analyze_attention(model, result.model, acts, recipe.eta, recipe.causal_maps);
    for (std::size_t l = 0; l < result.model.layers.size(); ++l) {
      const auto li = static_cast<Eigen::Index>(l);
      r.layers.push_back({l, attention[l], plan.scores[li], plan.params[li], plan.bits_cont[li], plan.bits_int[l],
                          layer_effective_bits(result.model.layers[l])});
    }
    return 0;
  });
  return result;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("spearman needs two equal-length series of >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    Eigen::VectorXd r(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[static_cast<Eigen::Index>(idx[k])] = avg;
      i = j + 1;
    }
    return r;
  };
  const Eigen::VectorXd rx = ranks(x), ry = ranks(y);
  const Eigen::VectorXd cx = rx.array() - rx.mean(), cy = ry.array() - ry.mean();
  const double denom = cx.norm() * cy.norm();
  if (denom == 0.0) return 0.0;
  return cx.dot(cy) / denom;
}

std::vector<SweepRow> sweep_vision_ratio(const ModelCheckpoint& model, std::span<const double> ratios,
                                         const SweepOptions& options) {
  validate(model);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double ratio = ratios[i];
    if (!(ratio >= 0.0 && ratio < 1.0)) throw Error("vision ratio must lie in [0, 1)");
    SyntheticCorpusOptions gen;
    gen.seq_len = model.config.max_seq_len;
    gen.vocab_size = model.config.vocab_size;
    gen.vision_ratio = ratio;
    gen.count = options.calib_count;
    gen.seed = mix_seed(options.seed, 0x63616c69ull, 0);
    const CalibrationSet calib = generate_synthetic_corpus(gen);
    gen.count = options.heldout_count;
    gen.seed = mix_seed(options.seed, 0x68656c64ull, 0);
    const CalibrationSet heldout = generate_synthetic_corpus(gen);

    const auto acts = forward_collect(model, calib);
    const ModelCheckpoint compressed = apply_lowrank_qk(model, acts, LowRankOptions{options.rank_keep, 0.0});
    const auto layers = analyze_attention(model, compressed, acts, options.eta, options.causal_maps);

    SweepRow row;
    row.ratio = ratio;
    for (const auto& s : layers) {
      row.attention.density += s.density;
      row.attention.e += s.e;
      row.attention.e_row_sum += s.e_row_sum;
      row.attention.delta_y_norm += s.delta_y_norm;
      row.attention.bound_exact += s.bound_exact;
      row.attention.bound_density += s.bound_density;
      row.attention.taylor_residual += s.taylor_residual;
    }
    const double count = static_cast<double>(layers.size());
    for (double* v : {&row.attention.density, &row.attention.e, &row.attention.e_row_sum,
                      &row.attention.delta_y_norm, &row.attention.bound_exact, &row.attention.bound_density,
                      &row.attention.taylor_residual}) {
      *v /= count;
    }
    row.attention.sparsity = 1.0 - row.attention.density;
    row.attention.n_tokens = model.config.max_seq_len;
    row.ppl_base = evaluate_ppl(model, heldout);
    row.ppl_lowrank = evaluate_ppl(compressed, heldout);
    row.rel_degradation = (row.ppl_lowrank - row.ppl_base) / row.ppl_base;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace casp
