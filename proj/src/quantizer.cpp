#include "casp/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "casp/error.hpp"
#include "casp/half.hpp"

namespace casp {

namespace {

struct Grid {
  float zero = 0.0f;
  float scale = 0.0f;
  std::uint32_t levels = 0;  // largest index

  float value(std::uint32_t q) const { return zero + static_cast<float>(q) * scale; }

  std::uint32_t nearest(double w) const {
    if (scale == 0.0f) return 0;
    const double t = std::round((w - zero) / scale);
    const auto q0 = static_cast<std::uint32_t>(std::clamp(t, 0.0, static_cast<double>(levels)));
    std::uint32_t best = q0;
    double best_err = std::abs(w - value(q0));
    for (std::uint32_t q : {q0 > 0 ? q0 - 1 : q0, std::min(q0 + 1, levels)}) {
      const double err = std::abs(w - value(q));
      if (err < best_err || (err == best_err && q < best)) {
        best = q;
        best_err = err;
      }
    }
    return best;
  }
};

void check_grid_bits(int n_bits) {
  if (n_bits != 2 && n_bits != 3 && n_bits != 4 && n_bits != 8) {
    throw Error("n_bits must be one of {2, 3, 4, 8}, got " + std::to_string(n_bits));
  }
}

void check_group(int group_size) {
  if (group_size < 1) throw Error("group size must be positive");
}

// The grid covers [lo, hi] after both parameters are rounded to binary16:
// the offset is rounded down and the step rounded up.
std::pair<std::uint16_t, std::uint16_t> fit_grid(float lo, float hi, std::uint32_t levels) {
  if (!(hi > lo)) return {float_to_half(lo), 0};
  const std::uint16_t zero_h = half_round_down(lo);
  const float zero = half_to_float(zero_h);
  std::uint16_t scale_h = half_round_up((hi - zero) / static_cast<float>(levels));
  for (int guard = 0; guard < 8; ++guard) {
    const float scale = half_to_float(scale_h);
    if (zero + static_cast<float>(levels) * scale >= hi) break;
    scale_h = half_round_up(std::nextafter(scale, std::numeric_limits<float>::infinity()));
  }
  return {zero_h, scale_h};
}

Grid grid_of(const QuantizedTensor& qt, std::size_t group) {
  return {half_to_float(qt.zeros[group]), half_to_float(qt.scales[group]),
          (1u << qt.n_bits) - 1u};
}

// Static per-group grids of a tensor, shared by the rtn and greedy schemes.
QuantizedTensor grid_skeleton(const Weights& w, int n_bits, int group_size, QuantScheme scheme) {
  check_grid_bits(n_bits);
  check_group(group_size);
  if (w.size() == 0) throw Error("cannot quantize an empty tensor");
  if (!w.allFinite()) throw Error("cannot quantize a tensor with non-finite values");

  QuantizedTensor qt;
  qt.scheme = scheme;
  qt.n_bits = n_bits;
  qt.group_size = group_size;
  qt.rows = w.rows();
  qt.cols = w.cols();
  const std::size_t total = qt.weight_count();
  const std::size_t groups = qt.group_count();
  const auto levels = (1u << n_bits) - 1u;
  qt.scales.resize(groups);
  qt.zeros.resize(groups);
  qt.indices.assign(total, 0);
  const float* data = w.data();
  const auto g = static_cast<std::size_t>(group_size);
  for (std::size_t k = 0; k < groups; ++k) {
    const std::size_t begin = k * g;
    const std::size_t end = std::min(total, begin + g);
    const auto [lo, hi] = std::minmax_element(data + begin, data + end);
    const auto [zero_h, scale_h] = fit_grid(*lo, *hi, levels);
    qt.zeros[k] = zero_h;
    qt.scales[k] = scale_h;
  }
  return qt;
}

// Returns L with L*L^T = gram + damping*I, escalating the damping ladder.
Eigen::MatrixXd inverse_gram(const Eigen::MatrixXd& gram) {
  const auto d = static_cast<double>(gram.rows());
  const double trace = gram.trace();
  if (!(trace > 0.0) || !std::isfinite(trace)) throw Error("degenerate calibration");
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(gram.rows(), gram.cols());
  for (const double rung : {0.0, 1e-6, 1e-4}) {
    Eigen::LLT<Eigen::MatrixXd> llt(gram + rung * trace / d * identity);
    if (llt.info() != Eigen::Success) continue;
    const Eigen::VectorXd pivots = llt.matrixLLT().diagonal();
    if (pivots.minCoeff() <= std::sqrt(1e-12 * trace / d)) continue;
    return llt.solve(identity);
  }
  throw Error("degenerate calibration: Gram matrix singular after damping");
}

}  // namespace

QuantizedTensor quantize_rtn(const Weights& w, int n_bits, int group_size) {
  QuantizedTensor qt = grid_skeleton(w, n_bits, group_size, QuantScheme::rtn);
  const float* data = w.data();
  const auto g = static_cast<std::size_t>(group_size);
  for (std::size_t i = 0; i < qt.indices.size(); ++i) {
    qt.indices[i] = grid_of(qt, i / g).nearest(data[i]);
  }
  return qt;
}

QuantizedTensor quantize_greedy(const Weights& w, const Eigen::MatrixXd& acts, int n_bits,
                                int group_size) {
  if (acts.rows() < 1) throw Error("degenerate calibration: no activation rows");
  if (acts.cols() != w.rows()) {
    throw Error("activation width " + std::to_string(acts.cols()) + " does not match weight rows " +
                std::to_string(w.rows()));
  }
  if (!acts.allFinite()) throw Error("degenerate calibration: non-finite activations");
  QuantizedTensor qt = grid_skeleton(w, n_bits, group_size, QuantScheme::greedy);

  const Eigen::MatrixXd gram = acts.transpose() * acts;
  const Eigen::MatrixXd hinv = inverse_gram(gram);
  // Upper factor U with U^T U = H^-1.
  const Eigen::MatrixXd upper = Eigen::LLT<Eigen::MatrixXd>(hinv).matrixU();

  Eigen::MatrixXd work = w.cast<double>();
  const Eigen::Index d_in = w.rows();
  const Eigen::Index d_out = w.cols();
  const auto g = static_cast<std::size_t>(group_size);
  Eigen::RowVectorXd err(d_out);
  for (Eigen::Index i = 0; i < d_in; ++i) {
    for (Eigen::Index c = 0; c < d_out; ++c) {
      const auto flat = static_cast<std::size_t>(i * d_out + c);
      const Grid grid = grid_of(qt, flat / g);
      const std::uint32_t q = grid.nearest(work(i, c));
      qt.indices[flat] = q;
      err[c] = (work(i, c) - grid.value(q)) / upper(i, i);
    }
    for (Eigen::Index j = i + 1; j < d_in; ++j) {
      work.row(j) -= upper(i, j) * err;
    }
  }
  return qt;
}

QuantizedTensor quantize_vq(const Weights& w, int n_bits, int vec_dim, std::uint64_t seed) {
  if (n_bits < 1 || vec_dim < 1) throw Error("vq needs n_bits >= 1 and vec_dim >= 1");
  if (n_bits * vec_dim > 16) {
    throw Error("vq codebook too large: n*g = " + std::to_string(n_bits * vec_dim) + " > 16");
  }
  if (w.size() == 0) throw Error("cannot quantize an empty tensor");
  if (!w.allFinite()) throw Error("cannot quantize a tensor with non-finite values");

  QuantizedTensor qt;
  qt.scheme = QuantScheme::vq;
  qt.n_bits = n_bits;
  qt.group_size = vec_dim;
  qt.rows = w.rows();
  qt.cols = w.cols();

  const std::size_t total = qt.weight_count();
  const auto g = static_cast<Eigen::Index>(vec_dim);
  const auto count = static_cast<Eigen::Index>((total + static_cast<std::size_t>(vec_dim) - 1) /
                                               static_cast<std::size_t>(vec_dim));
  // One data vector per column.
  Eigen::MatrixXd vecs = Eigen::MatrixXd::Zero(g, count);
  for (std::size_t i = 0; i < total; ++i) {
    vecs(static_cast<Eigen::Index>(i) % g, static_cast<Eigen::Index>(i) / g) = w.data()[i];
  }

  const std::size_t k = std::size_t{1} << (n_bits * vec_dim);

  // Distinct vectors in first-occurrence order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto lex_less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index r = 0; r < g; ++r) {
      if (vecs(r, a) != vecs(r, b)) return vecs(r, a) < vecs(r, b);
    }
    return a < b;
  };
  std::sort(order.begin(), order.end(), lex_less);
  std::vector<Eigen::Index> distinct;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i == 0 || vecs.col(order[i]) != vecs.col(order[i - 1])) distinct.push_back(order[i]);
  }
  std::sort(distinct.begin(), distinct.end());

  Eigen::MatrixXd centroids(g, static_cast<Eigen::Index>(k));
  auto nearest = [](const Eigen::MatrixXd& table, const auto& v, Eigen::Index limit) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < limit; ++c) {
      const double dist = (table.col(c) - v).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    return std::pair{best, best_d};
  };

  if (distinct.size() <= k) {
    for (std::size_t c = 0; c < k; ++c) {
      centroids.col(static_cast<Eigen::Index>(c)) =
          vecs.col(distinct[c < distinct.size() ? c : 0]);
    }
  } else {
    const auto kk = static_cast<Eigen::Index>(k);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    // k-means++ seeding by D^2 sampling.
    Eigen::VectorXd d2 = Eigen::VectorXd::Constant(count, std::numeric_limits<double>::infinity());
    Eigen::Index first = static_cast<Eigen::Index>(unit(rng) * static_cast<double>(count));
    first = std::min(first, count - 1);
    centroids.col(0) = vecs.col(first);
    for (Eigen::Index c = 1; c < kk; ++c) {
      for (Eigen::Index i = 0; i < count; ++i) {
        d2[i] = std::min(d2[i], (vecs.col(i) - centroids.col(c - 1)).squaredNorm());
      }
      const double target = unit(rng) * d2.sum();
      double acc = 0.0;
      Eigen::Index pick = count - 1;
      for (Eigen::Index i = 0; i < count; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      centroids.col(c) = vecs.col(pick);
    }

    std::vector<Eigen::Index> assign(static_cast<std::size_t>(count));
    constexpr int kMaxIterations = 25;
    constexpr double kShiftTolerance = 1e-6;
    for (int iter = 0; iter < kMaxIterations; ++iter) {
      for (Eigen::Index i = 0; i < count; ++i) {
        assign[static_cast<std::size_t>(i)] = nearest(centroids, vecs.col(i), kk).first;
      }
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(g, kk);
      std::vector<Eigen::Index> sizes(k, 0);
      for (Eigen::Index i = 0; i < count; ++i) {
        const auto c = assign[static_cast<std::size_t>(i)];
        sums.col(c) += vecs.col(i);
        ++sizes[static_cast<std::size_t>(c)];
      }
      Eigen::MatrixXd next = centroids;
      for (Eigen::Index c = 0; c < kk; ++c) {
        if (sizes[static_cast<std::size_t>(c)] > 0) {
          next.col(c) = sums.col(c) / static_cast<double>(sizes[static_cast<std::size_t>(c)]);
        }
      }
      // Empty clusters take the worst-fit point of the largest cluster.
      for (Eigen::Index c = 0; c < kk; ++c) {
        if (sizes[static_cast<std::size_t>(c)] > 0) continue;
        const auto largest = static_cast<Eigen::Index>(
            std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
        Eigen::Index far = -1;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < count; ++i) {
          if (assign[static_cast<std::size_t>(i)] != largest) continue;
          const double dist = (vecs.col(i) - next.col(largest)).squaredNorm();
          if (dist > far_d) {
            far_d = dist;
            far = i;
          }
        }
        next.col(c) = vecs.col(far);
        assign[static_cast<std::size_t>(far)] = c;
        --sizes[static_cast<std::size_t>(largest)];
        sizes[static_cast<std::size_t>(c)] = 1;
      }
      const double base = std::max(centroids.norm(), std::numeric_limits<double>::min());
      const double shift = (next - centroids).norm() / base;
      centroids = std::move(next);
      if (shift < kShiftTolerance) break;
    }
  }

  qt.codebook.n_bits = n_bits;
  qt.codebook.dim = vec_dim;
  qt.codebook.entries.resize(k * static_cast<std::size_t>(vec_dim));
  Eigen::MatrixXd rounded(g, static_cast<Eigen::Index>(k));
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(k); ++c) {
    for (Eigen::Index r = 0; r < g; ++r) {
      const std::uint16_t h = float_to_half(static_cast<float>(centroids(r, c)));
      qt.codebook.entries[static_cast<std::size_t>(c * g + r)] = h;
      rounded(r, c) = half_to_float(h);
    }
  }
  // Only the first `limit` entries can be distinct; duplicates never win.
  const auto limit = static_cast<Eigen::Index>(std::min(k, distinct.size()));
  qt.indices.resize(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) {
    qt.indices[static_cast<std::size_t>(i)] =
        static_cast<std::uint32_t>(nearest(rounded, vecs.col(i), limit).first);
  }
  return qt;
}

void validate(const QuantizedTensor& qt) {
  if (qt.rows < 1 || qt.cols < 1) throw Error("quantized tensor has empty dims");
  if (qt.group_size < 1) throw Error("quantized tensor has invalid group size");
  if (qt.scheme == QuantScheme::vq) {
    const auto& cb = qt.codebook;
    if (cb.dim != qt.group_size || qt.n_bits * qt.group_size > 16 || qt.n_bits < 1) {
      throw Error("corrupt vq codebook header");
    }
    if (cb.entry_count() != (std::size_t{1} << (qt.n_bits * qt.group_size)) ||
        cb.entries.size() != cb.entry_count() * static_cast<std::size_t>(cb.dim)) {
      throw Error("corrupt vq codebook: entry count must be 2^(n*g)");
    }
    if (qt.indices.size() != qt.group_count()) throw Error("corrupt index stream: wrong length");
    for (auto idx : qt.indices) {
      if (idx >= cb.entry_count()) throw Error("corrupt index stream: index out of codebook");
    }
    return;
  }
  check_grid_bits(qt.n_bits);
  if (qt.indices.size() != qt.weight_count()) throw Error("corrupt index stream: wrong length");
  if (qt.scales.size() != qt.group_count() || qt.zeros.size() != qt.group_count()) {
    throw Error("corrupt quantized tensor: group parameter count mismatch");
  }
  const auto levels = (1u << qt.n_bits) - 1u;
  for (auto idx : qt.indices) {
    if (idx > levels) throw Error("corrupt index stream: index exceeds 2^n - 1");
  }
}

Weights dequantize(const QuantizedTensor& qt) {
  validate(qt);
  Weights out(qt.rows, qt.cols);
  float* data = out.data();
  const std::size_t total = qt.weight_count();
  const auto g = static_cast<std::size_t>(qt.group_size);
  if (qt.scheme == QuantScheme::vq) {
    for (std::size_t i = 0; i < total; ++i) {
      const std::size_t entry = qt.indices[i / g];
      data[i] = half_to_float(qt.codebook.entries[entry * g + i % g]);
    }
  } else {
    for (std::size_t i = 0; i < total; ++i) {
      data[i] = grid_of(qt, i / g).value(qt.indices[i]);
    }
  }
  return out;
}

EffectiveBits effective_bits(const QuantizedTensor& qt) {
  EffectiveBits eb;
  eb.weight_count = qt.weight_count();
  if (qt.scheme == QuantScheme::vq) {
    eb.index_bits = static_cast<std::uint64_t>(qt.index_bits()) * qt.group_count();
    eb.overhead_bits = 16ull * qt.codebook.entries.size();
    eb.codebook_larger_than_tensor = qt.codebook.entries.size() > eb.weight_count;
  } else {
    eb.index_bits = static_cast<std::uint64_t>(qt.n_bits) * eb.weight_count;
    eb.overhead_bits = 32ull * qt.group_count();
  }
  return eb;
}

}  // namespace casp
