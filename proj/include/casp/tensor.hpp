#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace casp {

/// Stored weight matrix. Row-major float32, the on-disk layout.
using Weights = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class QuantScheme : std::uint8_t { rtn = 0, greedy = 1, vq = 2 };

std::string_view to_string(QuantScheme scheme);
QuantScheme parse_scheme(std::string_view name);

/// 2^(n*g) x g table of half-precision vectors.
struct Codebook {
  int n_bits = 0;
  int dim = 0;
  std::vector<std::uint16_t> entries;  // entry_count() * dim halves, row-major

  std::size_t entry_count() const { return dim > 0 ? entries.size() / static_cast<std::size_t>(dim) : 0; }
  Eigen::VectorXf entry(std::size_t i) const;
};

/// Quantized weight matrix.
///
/// rtn/greedy: one index per weight into a per-group affine grid
/// `zero + q * scale` with both parameters stored as binary16; groups are
/// `group_size` consecutive weights of the row-major flattened tensor, the
/// last group may be shorter.
///
/// vq: one index per `group_size`-dimensional vector of consecutive
/// weights (zero-padded at the tail) into `codebook`.
struct QuantizedTensor {
  QuantScheme scheme = QuantScheme::rtn;
  int n_bits = 0;
  int group_size = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<std::uint32_t> indices;
  std::vector<std::uint16_t> scales;
  std::vector<std::uint16_t> zeros;
  Codebook codebook;

  std::size_t weight_count() const { return static_cast<std::size_t>(rows * cols); }
  std::size_t group_count() const;
  /// Bits per stored index: n for grid schemes, n*g for vq.
  int index_bits() const;
};

/// A low-rank factor is either dense or quantized.
using Factor = std::variant<Weights, QuantizedTensor>;

/// W ~= a * b with a: d_in x rank, b: rank x d_out.
struct LowRankWeight {
  Factor a;
  Factor b;
  int rank = 0;
};

/// Exactly one representation is active per tensor.
using WeightSlot = std::variant<Weights, LowRankWeight, QuantizedTensor>;

std::pair<Eigen::Index, Eigen::Index> dims(const Factor& factor);
std::pair<Eigen::Index, Eigen::Index> dims(const WeightSlot& slot);

/// Number of stored weights of the active representation.
std::size_t param_count(const Factor& factor);
std::size_t param_count(const WeightSlot& slot);

/// Dense reconstruction in double precision.
Eigen::MatrixXd materialize(const Factor& factor);
Eigen::MatrixXd materialize(const WeightSlot& slot);

/// Exact storage cost in bits of the active representation
/// (32 per dense float, index bits plus per-group or codebook overhead
/// for quantized tensors).
std::uint64_t storage_bits(const Factor& factor);
std::uint64_t storage_bits(const WeightSlot& slot);

}  // namespace casp
