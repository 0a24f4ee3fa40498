#pragma once

#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "casp/attention_analysis.hpp"
#include "casp/error.hpp"
#include "casp/model_store.hpp"

namespace casp {

/// Mergeable second-moment accumulator: sum of x x^T and a row count.
template <typename Scalar>
class CovarianceAccumulator {
 public:
  explicit CovarianceAccumulator(Eigen::Index dim) : sum_(MatrixX<Scalar>::Zero(dim, dim)) {}

  template <typename Derived>
  void add(const Eigen::MatrixBase<Derived>& rows) {
    if (rows.cols() != sum_.cols()) throw Error("activation width does not match accumulator");
    sum_.noalias() += rows.transpose() * rows;
    count_ += rows.rows();
  }

  void merge(const CovarianceAccumulator& other) {
    if (other.sum_.rows() != sum_.rows()) throw Error("cannot merge accumulators of different width");
    sum_ += other.sum_;
    count_ += other.count_;
  }

  Eigen::Index dim() const { return sum_.rows(); }
  Eigen::Index count() const { return count_; }

  /// C = (1/M) sum x x^T, symmetrized.
  MatrixX<Scalar> covariance() const {
    if (count_ == 0) throw Error("covariance of an empty activation set");
    MatrixX<Scalar> c = sum_ / static_cast<Scalar>(count_);
    return (c + c.transpose()) / Scalar(2);
  }

 private:
  MatrixX<Scalar> sum_;
  Eigen::Index count_ = 0;
};

template <typename Scalar>
struct WhiteningTransform {
  MatrixX<Scalar> cov;    // C
  MatrixX<Scalar> chol;   // L, L L^T = C + damping I
  MatrixX<Scalar> white;  // L^-1
  Scalar damping = 0;
};

template <typename Scalar>
struct LowRankFactors {
  MatrixX<Scalar> a;  // d_in x rank
  MatrixX<Scalar> b;  // rank x d_out
  Eigen::Index rank = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  double kept_energy = 0.0;

  MatrixX<Scalar> reconstruct() const { return a * b; }
  Eigen::Index param_count() const { return rank * (rows + cols); }
};

namespace detail {

// Cholesky counts as failed when a pivot is numerically zero relative to the
// mean diagonal.
template <typename Scalar>
bool try_cholesky(const MatrixX<Scalar>& m, Scalar mean_diag, MatrixX<Scalar>& lower) {
  Eigen::LLT<MatrixX<Scalar>> llt(m);
  if (llt.info() != Eigen::Success) return false;
  lower = llt.matrixL();
  const Scalar floor = std::sqrt(Scalar(1e-12) * std::max(mean_diag, std::numeric_limits<Scalar>::min()));
  return lower.diagonal().minCoeff() > floor;
}

}  // namespace detail

/// Whitening from an accumulated covariance. With `escalate`, damping is
/// retried on the ladder {damping, +1e-6 tr(C)/d, +1e-4 tr(C)/d}.
template <typename Scalar>
WhiteningTransform<Scalar> fit_whitening(const CovarianceAccumulator<Scalar>& acc, Scalar damping,
                                         bool escalate = false) {
  if (damping < 0) throw Error("damping must be non-negative");
  WhiteningTransform<Scalar> wt;
  wt.cov = acc.covariance();
  if (!wt.cov.allFinite()) throw Error("non-finite calibration covariance");
  const Eigen::Index d = wt.cov.rows();
  const Scalar mean_diag = wt.cov.trace() / static_cast<Scalar>(d);
  std::vector<Scalar> ladder{damping};
  if (escalate) {
    ladder.push_back(damping + Scalar(1e-6) * mean_diag);
    ladder.push_back(damping + Scalar(1e-4) * mean_diag);
  }
  const MatrixX<Scalar> identity = MatrixX<Scalar>::Identity(d, d);
  for (const Scalar rung : ladder) {
    if (detail::try_cholesky<Scalar>(wt.cov + rung * identity, mean_diag + rung, wt.chol)) {
      wt.damping = rung;
      wt.white = wt.chol.template triangularView<Eigen::Lower>().solve(identity);
      return wt;
    }
  }
  std::ostringstream msg;
  msg << "Cholesky of the calibration covariance failed; damping tried:";
  for (const Scalar rung : ladder) msg << ' ' << rung;
  throw Error(msg.str());
}

template <typename Scalar>
WhiteningTransform<Scalar> fit_whitening(std::span<const ActivationBatch> acts, Scalar damping,
                                         bool escalate = false) {
  if (acts.empty()) throw Error("no activation batches to whiten");
  CovarianceAccumulator<Scalar> acc(acts.front().x.cols());
  for (const auto& batch : acts) acc.add(batch.x.template cast<Scalar>());
  return fit_whitening(acc, damping, escalate);
}

/// Identity whitening: decompose_whitened then reduces to a plain truncated SVD.
template <typename Scalar>
WhiteningTransform<Scalar> identity_whitening(Eigen::Index d) {
  WhiteningTransform<Scalar> wt;
  wt.cov = wt.chol = wt.white = MatrixX<Scalar>::Identity(d, d);
  return wt;
}

/// Rank-r factors minimizing ||L^T (W - A B)||_F, i.e. the activation-space
/// error ||X W - X A B||_F under the (damped) calibration covariance L L^T.
/// Singular values are split evenly: A = L^-T U_r sqrt(S_r), B = sqrt(S_r) V_r^T.
/// Each left singular vector is signed so its first nonzero entry is >= 0.
template <typename Scalar>
LowRankFactors<Scalar> decompose_whitened(const MatrixX<Scalar>& w, const WhiteningTransform<Scalar>& wt,
                                          Eigen::Index rank) {
  if (wt.chol.rows() != w.rows()) throw Error("whitening transform does not match weight rows");
  const Eigen::Index max_rank = std::min(w.rows(), w.cols());
  if (rank < 1 || rank >= max_rank) {
    throw Error("rank " + std::to_string(rank) + " out of range [1, " + std::to_string(max_rank - 1) + "]");
  }
  const MatrixX<Scalar> seen = wt.chol.transpose() * w;
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(seen, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw Error("SVD did not converge");
  MatrixX<Scalar> u = svd.matrixU().leftCols(rank);
  MatrixX<Scalar> v = svd.matrixV().leftCols(rank);
  const VectorX<Scalar> sigma = svd.singularValues();
  for (Eigen::Index c = 0; c < rank; ++c) {
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      if (u(r, c) != Scalar(0)) {
        if (u(r, c) < Scalar(0)) {
          u.col(c) = -u.col(c);
          v.col(c) = -v.col(c);
        }
        break;
      }
    }
  }
  const VectorX<Scalar> root = sigma.head(rank).cwiseSqrt();
  LowRankFactors<Scalar> f;
  f.rank = rank;
  f.rows = w.rows();
  f.cols = w.cols();
  f.a = wt.chol.transpose().template triangularView<Eigen::Upper>().solve(u * root.asDiagonal());
  f.b = root.asDiagonal() * v.transpose();
  const Scalar total = sigma.squaredNorm();
  f.kept_energy = total > Scalar(0) ? static_cast<double>(sigma.head(rank).squaredNorm() / total) : 1.0;
  return f;
}

template <typename Scalar>
LowRankFactors<Scalar> truncated_svd(const MatrixX<Scalar>& w, Eigen::Index rank) {
  return decompose_whitened(w, identity_whitening<Scalar>(w.rows()), rank);
}

/// Rank whose factor pair stores rank_keep * d_in * d_out parameters,
/// floor(rank_keep * d_in * d_out / (d_in + d_out)); d/2 * rank_keep for square.
Eigen::Index rank_for_keep(double rank_keep, Eigen::Index d_in, Eigen::Index d_out);

struct LowRankOptions {
  double rank_keep = 0.25;
  double damping = 0.0;
};

/// Replaces every layer's w_q and w_k by whitened low-rank factors fitted on
/// the normalized attention inputs collected from `calib`.
ModelCheckpoint apply_lowrank_qk(const ModelCheckpoint& model, const CalibrationSet& calib,
                                 const LowRankOptions& options);

/// Same, from already collected activations of `model`.
ModelCheckpoint apply_lowrank_qk(const ModelCheckpoint& model, std::span<const LayerActivations> acts,
                                 const LowRankOptions& options);

}  // namespace casp
