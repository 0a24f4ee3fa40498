#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "casp/error.hpp"

namespace casp {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Row-stochastic attention map S = softmax(Y) and its logits Y.
template <typename Scalar>
struct AttentionMap {
  MatrixX<Scalar> s;
  MatrixX<Scalar> y;
  Eigen::Index n_tokens = 0;
  Eigen::Index d = 0;
  bool causal = false;
};

/// Row-wise softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> row_softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = logits.colwise() - logits.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

/// Y = (X W_q)(X W_k)^T / sqrt(d), S = softmax(Y) row-wise. With `causal`,
/// entries above the diagonal are excluded: S is zero there and Y is stored
/// as zero.
template <typename Scalar>
AttentionMap<Scalar> attention_map(const MatrixX<Scalar>& x, const MatrixX<Scalar>& w_q,
                                   const MatrixX<Scalar>& w_k, Eigen::Index d, bool causal = false) {
  if (x.rows() < 1) throw Error("attention map needs at least one token");
  if (w_q.rows() != x.cols() || w_k.rows() != x.cols() || w_q.cols() != w_k.cols()) {
    throw Error("attention weights are not conformable with the activations");
  }
  if (d < 1) throw Error("attention scale dim must be positive");
  if (!x.allFinite() || !w_q.allFinite() || !w_k.allFinite()) {
    throw Error("non-finite input to attention map");
  }
  AttentionMap<Scalar> map;
  map.y = (x * w_q) * (x * w_k).transpose() / std::sqrt(static_cast<Scalar>(d));
  if (causal) {
    MatrixX<Scalar> masked = map.y;
    masked.template triangularView<Eigen::StrictlyUpper>().setConstant(-std::numeric_limits<Scalar>::infinity());
    map.s = row_softmax(masked);
    // vectorized exp(-inf) can come back as a denormal
    map.s.template triangularView<Eigen::StrictlyUpper>().setZero();
    map.y.template triangularView<Eigen::StrictlyUpper>().setZero();
  } else {
    map.s = row_softmax(map.y);
  }
  map.n_tokens = x.rows();
  map.d = d;
  map.causal = causal;
  return map;
}

/// Default activity threshold: 1% of a uniform row's entry.
inline double default_eta(Eigen::Index n_tokens) { return 0.01 / static_cast<double>(n_tokens); }

struct SparsityStats {
  double eta = 0.0;
  /// Fraction of entries at or below eta.
  double sparsity = 0.0;
  /// Fraction of entries strictly above eta.
  double density = 0.0;
  std::size_t active_count = 0;
};

template <typename Scalar>
SparsityStats sparsity_stats(const AttentionMap<Scalar>& map, double eta) {
  if (!(eta > 0.0 && eta < 1.0)) throw Error("eta must lie in (0, 1)");
  SparsityStats stats;
  stats.eta = eta;
  stats.active_count = static_cast<std::size_t>((map.s.array() > static_cast<Scalar>(eta)).count());
  const auto total = static_cast<double>(map.s.size());
  stats.density = static_cast<double>(stats.active_count) / total;
  stats.sparsity = 1.0 - stats.density;
  return stats;
}

/// Frobenius norm of diag(z) - z z^T for every row z of the map:
/// ||J||_F^2 = sum_j z_j^2 (sum_{m!=j} z_m)^2 + sum_j z_j^2 sum_{m!=j} z_m^2,
/// with the leave-one-out sums built from prefix and suffix sums so that
/// concentrated rows do not cancel.
template <typename Scalar>
VectorX<Scalar> softmax_jacobian_norms(const AttentionMap<Scalar>& map) {
  const Eigen::Index n = map.s.cols();
  VectorX<Scalar> norms(map.s.rows());
  VectorX<Scalar> suffix1(n + 1), suffix2(n + 1);
  for (Eigen::Index i = 0; i < map.s.rows(); ++i) {
    const auto z = map.s.row(i);
    suffix1[n] = suffix2[n] = Scalar(0);
    for (Eigen::Index j = n; j-- > 0;) {
      suffix1[j] = suffix1[j + 1] + z[j];
      suffix2[j] = suffix2[j + 1] + z[j] * z[j];
    }
    Scalar prefix1(0), prefix2(0), f2(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Scalar others1 = prefix1 + suffix1[j + 1];
      const Scalar others2 = prefix2 + suffix2[j + 1];
      const Scalar zj2 = z[j] * z[j];
      f2 += zj2 * (others1 * others1 + others2);
      prefix1 += z[j];
      prefix2 += zj2;
    }
    norms[i] = std::sqrt(f2);
  }
  return norms;
}

/// Dense Jacobian of softmax at row z.
template <typename Scalar>
MatrixX<Scalar> softmax_jacobian(const VectorX<Scalar>& z) {
  MatrixX<Scalar> j = -z * z.transpose();
  j.diagonal() += z;
  return j;
}

struct ErrorReport {
  /// ||S' - S||_F over the whole map.
  double e = 0.0;
  /// sum_i ||S'_i - S_i|| over rows.
  double e_row_sum = 0.0;
  double delta_y_norm = 0.0;
  /// sum_i ||J_i||_F ||dY_i||.
  double bound_exact = 0.0;
  /// (1 - 1/(N D))^2 ||dY||_F with D the map density.
  double bound_density = 0.0;
  /// ||[J_i dY_i]_i||_F, the linearized error.
  double first_order = 0.0;
  /// e - first_order.
  double taylor_residual_estimate = 0.0;
  double density = 0.0;
  Eigen::Index n_tokens = 0;
};

template <typename Scalar>
ErrorReport compression_error(const MatrixX<Scalar>& x, const MatrixX<Scalar>& w_q, const MatrixX<Scalar>& w_k,
                              const MatrixX<Scalar>& w_q_approx, const MatrixX<Scalar>& w_k_approx,
                              Eigen::Index d, double eta, bool causal = false) {
  if (w_q_approx.rows() != w_q.rows() || w_q_approx.cols() != w_q.cols() ||
      w_k_approx.rows() != w_k.rows() || w_k_approx.cols() != w_k.cols()) {
    throw Error("shape mismatch between original and approximated weights");
  }
  const AttentionMap<Scalar> base = attention_map(x, w_q, w_k, d, causal);
  const AttentionMap<Scalar> approx = attention_map(x, w_q_approx, w_k_approx, d, causal);
  const MatrixX<Scalar> delta_s = approx.s - base.s;
  const MatrixX<Scalar> delta_y = approx.y - base.y;
  const VectorX<Scalar> jac = softmax_jacobian_norms(base);

  ErrorReport r;
  r.n_tokens = base.n_tokens;
  r.e = static_cast<double>(delta_s.norm());
  r.e_row_sum = static_cast<double>(delta_s.rowwise().norm().sum());
  r.delta_y_norm = static_cast<double>(delta_y.norm());
  r.bound_exact = static_cast<double>(jac.dot(delta_y.rowwise().norm()));
  double linear_sq = 0.0;
  for (Eigen::Index i = 0; i < base.s.rows(); ++i) {
    const VectorX<Scalar> z = base.s.row(i).transpose();
    linear_sq += static_cast<double>((softmax_jacobian(z) * delta_y.row(i).transpose()).squaredNorm());
  }
  r.first_order = std::sqrt(linear_sq);
  r.taylor_residual_estimate = r.e - r.first_order;
  r.density = sparsity_stats(base, eta).density;
  const double nd = static_cast<double>(base.n_tokens) * r.density;
  const double factor = 1.0 - 1.0 / nd;
  r.bound_density = factor * factor * r.delta_y_norm;
  return r;
}

template <typename Scalar>
ErrorReport compression_error(const MatrixX<Scalar>& x, const MatrixX<Scalar>& w_q, const MatrixX<Scalar>& w_k,
                              const MatrixX<Scalar>& w_q_approx, const MatrixX<Scalar>& w_k_approx,
                              Eigen::Index d) {
  return compression_error(x, w_q, w_k, w_q_approx, w_k_approx, d, default_eta(x.rows()));
}

struct BoundVerdict {
  bool satisfied_exact = false;
  bool satisfied_density = false;
  double margin_exact = 0.0;  // bound_exact - e
  double margin_density = 0.0;  // bound_density + |taylor residual| - e
};

/// Checks E against the linearized bound and the density heuristic. The
/// stats must come from the same map as the report.
inline BoundVerdict check_error_bound(const ErrorReport& report, const SparsityStats& stats,
                                         double tol = 1e-6) {
  if (std::abs(stats.density - report.density) > 1e-12) {
    throw Error("sparsity stats and error report come from different maps");
  }
  BoundVerdict v;
  v.margin_exact = report.bound_exact - report.e;
  v.margin_density = report.bound_density + std::abs(report.taylor_residual_estimate) - report.e;
  v.satisfied_exact = v.margin_exact + tol >= 0.0;
  v.satisfied_density = v.margin_density + tol >= 0.0;
  return v;
}

}  // namespace casp
