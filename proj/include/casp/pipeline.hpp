#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "casp/bit_alloc.hpp"
#include "casp/model_store.hpp"
#include "casp/tensor.hpp"

namespace casp {

enum class AllocationMode { optimal, random, uniform };

struct CompressionRecipe {
  double rank_keep = 0.25;
  /// Skip the Q/K low-rank stage entirely (quantization-only baseline).
  bool lowrank = true;
  /// nullopt keeps block tensors dense (passthrough).
  std::optional<QuantScheme> scheme = QuantScheme::rtn;
  double b_avg = 2.0;
  /// Defaults to default_mu() of the measured scores.
  std::optional<double> mu;
  std::vector<int> allowed_bits{2, 3};
  /// Group size for rtn/greedy, vector dimension for vq.
  int group_size = 128;
  std::uint64_t seed = 0;
  /// Sparsity threshold; 0 selects 0.01 / N.
  double eta = 0.0;
  /// Analyze the maps the model actually uses (lower triangular).
  bool causal_maps = true;
  AllocationMode allocation = AllocationMode::optimal;
};

void validate(const CompressionRecipe& recipe);

/// Attention-map comparison of one block, averaged over sequences and heads.
struct LayerAttentionSummary {
  std::uint32_t n_tokens = 0;
  double sparsity = 0.0;
  double density = 0.0;
  double e = 0.0;
  double e_row_sum = 0.0;
  double delta_y_norm = 0.0;
  double bound_exact = 0.0;
  double bound_density = 0.0;
  double taylor_residual = 0.0;
};

/// Compares the attention maps of `original` and `compressed` on the
/// normalized attention inputs `acts` (collected from `original`).
std::vector<LayerAttentionSummary> analyze_attention(const ModelCheckpoint& original,
                                                     const ModelCheckpoint& compressed,
                                                     std::span<const LayerActivations> acts, double eta = 0.0,
                                                     bool causal = true);

struct LayerReport {
  std::size_t layer = 0;
  LayerAttentionSummary attention;
  double score = 0.0;
  double params = 0.0;
  double bits_cont = 0.0;
  int bits_int = 0;
  /// Stored bits of the block per stored weight.
  double effective_bits = 0.0;
};

struct EvalReport {
  double ppl_before = 0.0;
  double ppl = 0.0;
  std::uint64_t model_size_bytes = 0;
  /// Stored block bits per weight of the original dense blocks.
  double avg_effective_bits = 0.0;
  /// b_avg rescaled to the parameters left after low-rank factorization.
  double allocation_target = 0.0;
  double mu = 0.0;
  double lambda = 0.0;
  std::vector<LayerReport> layers;
};

struct CompressionResult {
  ModelCheckpoint model;
  EvalReport report;
  BitPlan plan;
};

/// forward_collect -> whitening + Q/K low-rank -> block influence ->
/// allocate_bits -> round_bits -> per-block quantization -> evaluation.
/// Failures are rethrown as StageError tagged with the failing stage.
CompressionResult compress_casp(const ModelCheckpoint& model, const CalibrationSet& calib,
                                const CalibrationSet& heldout, const CompressionRecipe& recipe);

/// Dense parameter count of all transformer blocks.
std::size_t original_block_params(const TransformerConfig& config);

/// Stored bits of all block tensors divided by original_block_params.
double average_effective_bits(const ModelCheckpoint& model);

/// Bits per stored weight of one block.
double layer_effective_bits(const LayerWeights& layer);

/// Quantizes every tensor of one block at `bits`. `acts` supplies the
/// inputs for the greedy scheme and may be null otherwise.
void quantize_block(LayerWeights& layer, const LayerActivations* acts, QuantScheme scheme, int bits,
                    int group_size, std::uint64_t seed);

struct SweepOptions {
  double rank_keep = 0.25;
  std::uint32_t calib_count = 32;
  std::uint32_t heldout_count = 32;
  std::uint64_t seed = 0;
  double eta = 0.0;
  bool causal_maps = true;
};

struct SweepRow {
  double ratio = 0.0;
  LayerAttentionSummary attention;  // averaged over layers
  double ppl_base = 0.0;
  double ppl_lowrank = 0.0;
  double rel_degradation = 0.0;  // (ppl_lowrank - ppl_base) / ppl_base
};

/// For every ratio, regenerates calibration and held-out data with that
/// vision-token fraction, applies the Q/K low-rank stage and records the
/// attention error and perplexity degradation.
std::vector<SweepRow> sweep_vision_ratio(const ModelCheckpoint& model, std::span<const double> ratios,
                                         const SweepOptions& options);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace casp
