#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "casp/tensor.hpp"

namespace casp {

/// Per-group asymmetric min-max grid with 2^n levels, round to nearest.
/// n_bits must be one of {2, 3, 4, 8}.
QuantizedTensor quantize_rtn(const Weights& w, int n_bits, int group_size);

/// Data-aware variant on the same grid as quantize_rtn.
///
/// `w` maps activations to outputs as `acts * w`, so each row of `w`
/// belongs to one input feature. Rows are quantized in order and the
/// rounding error of row i is pushed onto rows i+1.. through the upper
/// Cholesky factor of the inverse damped Gram matrix of `acts`, which
/// greedily minimizes ||acts*w - acts*w_hat||_F.
QuantizedTensor quantize_greedy(const Weights& w, const Eigen::MatrixXd& acts, int n_bits,
                                int group_size);

/// k-means codebook quantization of `vec_dim`-dimensional weight vectors,
/// k = 2^(n_bits * vec_dim). Requires n_bits * vec_dim <= 16.
QuantizedTensor quantize_vq(const Weights& w, int n_bits, int vec_dim, std::uint64_t seed = 0);

Weights dequantize(const QuantizedTensor& qt);

/// Throws casp::Error if any index or parameter array is inconsistent.
void validate(const QuantizedTensor& qt);

/// Exact bit accounting, kept as integers so the ratio is a rational.
struct EffectiveBits {
  std::uint64_t index_bits = 0;
  std::uint64_t overhead_bits = 0;
  std::uint64_t weight_count = 0;
  /// Set when the codebook holds more scalars than the tensor has weights.
  bool codebook_larger_than_tensor = false;

  std::uint64_t total_bits() const { return index_bits + overhead_bits; }
  double bits_per_weight() const {
    return weight_count == 0 ? 0.0
                             : static_cast<double>(total_bits()) / static_cast<double>(weight_count);
  }
};

EffectiveBits effective_bits(const QuantizedTensor& qt);

}  // namespace casp
