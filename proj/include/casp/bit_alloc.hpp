#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "casp/model_store.hpp"

namespace casp {

struct BlockInfluence {
  double score = 0.0;
  /// Rows skipped because the input or output row had zero norm.
  std::size_t skipped_rows = 0;
};

/// 1 - mean over tokens of cos(x_in row, x_out row).
BlockInfluence block_influence_detail(const ActivationBatch& x_in, const ActivationBatch& x_out);
double block_influence(const ActivationBatch& x_in, const ActivationBatch& x_out);

struct LayerImportance {
  Eigen::VectorXd scores;

  std::size_t layer_count() const { return static_cast<std::size_t>(scores.size()); }
};

LayerImportance layer_importance(std::span<const LayerActivations> acts);

struct BitPlan {
  Eigen::VectorXd scores;     // s_l
  Eigen::VectorXd params;     // p_l
  Eigen::VectorXd bits_cont;  // b_l
  std::vector<int> bits_int;  // filled by round_bits
  double total_params = 0.0;  // P = sum p_l
  double target = 0.0;        // B_avg
  double mu = 0.0;
  double lambda = 0.0;
  double objective_value = 0.0;
};

/// sum s_l b_l p_l + mu sum -b_l log b_l, with 0 log 0 = 0.
double allocation_objective(const Eigen::VectorXd& scores, const Eigen::VectorXd& params, double mu,
                            const Eigen::VectorXd& bits);

/// 0.1 * population stddev of s_l p_l; 1.0 when that is zero.
double default_mu(const Eigen::VectorXd& scores, const Eigen::VectorXd& params);

/// Maximizer of the entropic-regularized importance objective subject to
/// sum b_l p_l / P = b_avg. Equal p_l use the softmax closed form
/// b_l = (P b_avg / p_l) softmax(s_l p_l / mu); otherwise the multiplier is
/// found by bisection and b_l = exp((s_l p_l - mu - lambda p_l / P) / mu).
BitPlan allocate_bits(const LayerImportance& importance, const Eigen::VectorXd& params, double b_avg,
                      double mu);

/// Integer plan over `allowed`: the layers with the largest continuous bits
/// take the next allowed width above the budget floor while the weighted
/// average stays within b_avg; ties break by layer index.
BitPlan round_bits(const BitPlan& plan, std::span<const int> allowed);

/// Exhaustive grid maximizer (L <= 6) used to certify allocate_bits: b_1..b_{L-1}
/// range over multiples of grid_step (zero included) and b_L closes the budget. p_l must be
/// integral; the search runs as an exact dynamic program over the budget.
BitPlan alloc_oracle(const LayerImportance& importance, const Eigen::VectorXd& params, double b_avg,
                     double mu, double grid_step);

}  // namespace casp
