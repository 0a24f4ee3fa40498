#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "casp/model_store.hpp"

namespace casp {

// Pre-norm decoder-only transformer: learned token and position embeddings,
// causal multi-head attention, GELU MLP, parameter-free LayerNorm, output
// head tied to the token embedding.

struct DenseLayer {
  Eigen::MatrixXd w_q, w_k, w_v, w_o, mlp_up, mlp_down;
};

/// Double-precision view of a checkpoint with every representation expanded.
struct DenseModel {
  TransformerConfig config;
  Eigen::MatrixXd embed;
  Eigen::MatrixXd pos;
  std::vector<DenseLayer> layers;
};

DenseModel materialize(const ModelCheckpoint& model);

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x);
Eigen::MatrixXd gelu(const Eigen::MatrixXd& z);

/// Intermediate values of one block on one sequence.
struct BlockTrace {
  Eigen::MatrixXd x_in, attn_in, q, k, v, ctx, h1, mlp_in, pre_act, mlp_hidden, x_out;
  std::vector<Eigen::MatrixXd> probs;  // per head, causal attention weights
};

BlockTrace block_forward(const DenseLayer& layer, const Eigen::MatrixXd& x, std::uint32_t n_heads);

Eigen::MatrixXd embed_tokens(const DenseModel& model, std::span<const std::uint32_t> tokens);

/// N x vocab next-token logits for one sequence.
Eigen::MatrixXd sequence_logits(const DenseModel& model, std::span<const std::uint32_t> tokens);

/// Mean next-token negative log-likelihood over every position of every sequence.
double mean_nll(const DenseModel& model, const CalibrationSet& data);

/// exp(mean NLL) with a causal shift by one. Sequences need >= 2 tokens.
double evaluate_ppl(const ModelCheckpoint& model, const CalibrationSet& heldout);
double evaluate_ppl(const DenseModel& model, const CalibrationSet& heldout);

/// Loss of one sequence; accumulates d(loss)/d(param) into `grad` when given
/// (grad must be shaped like `model`).
double sequence_loss(const DenseModel& model, std::span<const std::uint32_t> tokens, DenseModel* grad);

DenseModel zeros_like(const DenseModel& model);

struct TrainOptions {
  std::uint32_t steps = 600;
  std::uint32_t batch = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Adam on next-token loss over `corpus`. Requires an all-dense model; the
/// trained weights are rounded to float32 on write-back.
TrainReport train_toy_model(ModelCheckpoint& model, const CalibrationSet& corpus,
                            const TrainOptions& options);

}  // namespace casp

namespace casp {

/// Synthetic corpus whose sequences cycle through vision ratios 0, 0.25, 0.5, 0.75.
CalibrationSet mixed_vision_corpus(std::uint32_t count, std::uint32_t seq_len, std::uint32_t vocab_size,
                                   std::uint64_t seed);

struct ToyModelOptions {
  TransformerConfig config;
  std::uint64_t seed = 1;
  std::uint32_t corpus_count = 4096;
  TrainOptions train;
};

/// Seeded init followed by training on a mixed-vision synthetic corpus.
ModelCheckpoint build_toy_model(const ToyModelOptions& options, TrainReport* report = nullptr);

}  // namespace casp
