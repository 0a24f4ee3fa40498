#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "casp/tensor.hpp"

namespace casp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TransformerConfig {
  std::uint32_t d = 32;
  std::uint32_t n_layers = 6;
  std::uint32_t n_heads = 1;
  std::uint32_t vocab_size = 64;
  std::uint32_t max_seq_len = 32;
  std::uint32_t d_ff = 128;

  std::uint32_t head_dim() const { return d / n_heads; }
  /// Dense parameter count of one transformer block.
  std::size_t block_params() const { return 4ull * d * d + 2ull * d * d_ff; }
  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

/// Block tensors use the `x * W` convention: rows index input features.
/// w_q, w_k, w_v, w_o: d x d; mlp_up: d x d_ff; mlp_down: d_ff x d.
struct LayerWeights {
  WeightSlot w_q, w_k, w_v, w_o, mlp_up, mlp_down;

  static constexpr std::array<std::string_view, 6> kNames{"w_q", "w_k", "w_v",
                                                          "w_o", "mlp_up", "mlp_down"};

  WeightSlot& slot(std::size_t i);
  const WeightSlot& slot(std::size_t i) const;
  /// Parameter count of the active representations.
  std::size_t param_count() const;
};

struct ModelCheckpoint {
  TransformerConfig config;
  Weights embed;  // vocab_size x d, tied with the output head
  Weights pos;    // max_seq_len x d
  std::vector<LayerWeights> layers;
  std::uint32_t format_version = kCheckpointVersion;
};

/// Throws casp::Error naming the first violated invariant.
void validate(const ModelCheckpoint& model);

/// Seeded random initialization of the toy transformer.
ModelCheckpoint make_toy_model(const TransformerConfig& config, std::uint64_t seed);

// .caspkpt: "CASP", u32 version, u32 x6 config, u32 tensor count, tensor
// records, trailing u32 CRC32 of every preceding byte. All little-endian.
std::vector<std::uint8_t> serialize_checkpoint(const ModelCheckpoint& model);
ModelCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

enum class TokenKind : std::uint8_t { text = 0, vision = 1 };

/// The top eighth of the vocabulary is reserved for vision tokens.
std::uint32_t vision_token_begin(std::uint32_t vocab_size);
TokenKind token_kind(std::uint32_t token, std::uint32_t vocab_size);

struct CalibrationSet {
  std::uint32_t seq_len = 0;
  std::vector<std::vector<std::uint32_t>> sequences;

  std::size_t sample_count() const { return sequences.size(); }
};

void validate(const CalibrationSet& calib, std::uint32_t vocab_size);

// .casptok: u32 count, u32 seq_len, then count*seq_len u32 token ids.
std::vector<std::uint8_t> serialize_calibration(const CalibrationSet& calib);
CalibrationSet parse_calibration(std::span<const std::uint8_t> bytes);
void save_calibration(const CalibrationSet& calib, const std::filesystem::path& path);
CalibrationSet load_calibration(const std::filesystem::path& path);

struct SyntheticCorpusOptions {
  std::uint32_t count = 64;
  std::uint32_t seq_len = 32;
  std::uint32_t vocab_size = 64;
  /// Fraction of each sequence taken by one contiguous vision block.
  double vision_ratio = 0.0;
  double zipf_exponent = 1.1;
  /// Distinct ids a vision block draws from.
  std::uint32_t vision_symbols = 1;
  /// Each sequence draws one topic; the topic rotates the Zipf ranking over
  /// the text ids, so earlier text predicts later text. 1 disables it.
  std::uint32_t topics = 4;
  /// A text token repeats the text token `copy_lag` positions back with this
  /// probability, which only attention can exploit.
  double copy_prob = 0.5;
  std::uint32_t copy_lag = 2;
  std::uint64_t seed = 0;
};

/// Zipf-distributed text tokens plus an optional low-entropy vision block.
CalibrationSet generate_synthetic_corpus(const SyntheticCorpusOptions& options);

struct ActivationBatch {
  Eigen::MatrixXd x;  // N x d
  std::vector<TokenKind> token_kinds;
};

/// Everything a block sees, stacked over calibration sequences
/// (rows [s*seq_len, (s+1)*seq_len) belong to sequence s).
struct LayerActivations {
  ActivationBatch x_in;       // block input
  ActivationBatch x_out;      // block output
  Eigen::MatrixXd attn_in;    // normalized input feeding w_q, w_k, w_v
  Eigen::MatrixXd attn_ctx;   // attention context feeding w_o
  Eigen::MatrixXd mlp_in;     // normalized input feeding mlp_up
  Eigen::MatrixXd mlp_hidden; // activation feeding mlp_down
  std::uint32_t seq_len = 0;
};

/// Runs the toy transformer over the calibration set and records per-layer
/// activations. Pure function of (model, calib).
std::vector<LayerActivations> forward_collect(const ModelCheckpoint& model,
                                              const CalibrationSet& calib);

}  // namespace casp
