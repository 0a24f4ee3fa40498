#include "casp/bit_alloc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "casp/error.hpp"

namespace casp {

namespace {

void check_inputs(const LayerImportance& importance, const Eigen::VectorXd& params, double b_avg, double mu) {
  if (importance.scores.size() == 0) throw Error("no layers to allocate");
  if (importance.scores.size() != params.size()) throw Error("score and parameter counts differ");
  if (!(mu > 0.0) || !std::isfinite(mu)) throw Error("mu must be positive");
  if (!(b_avg > 0.0) || !std::isfinite(b_avg)) throw Error("b_avg must be positive");
  if (!importance.scores.allFinite()) throw Error("non-finite layer score");
  if (!params.allFinite() || params.minCoeff() <= 0.0) throw Error("parameter counts must be positive");
}

double entropy_term(double b) { return b > 0.0 ? -b * std::log(b) : 0.0; }

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

BlockInfluence block_influence_detail(const ActivationBatch& x_in, const ActivationBatch& x_out) {
  if (x_in.x.rows() != x_out.x.rows() || x_in.x.cols() != x_out.x.cols()) {
    throw Error("block influence needs matching input/output shapes");
  }
  BlockInfluence bi;
  double cos_sum = 0.0;
  std::size_t used = 0;
  for (Eigen::Index i = 0; i < x_in.x.rows(); ++i) {
    const double na = x_in.x.row(i).norm();
    const double nb = x_out.x.row(i).norm();
    if (na == 0.0 || nb == 0.0) {
      ++bi.skipped_rows;
      continue;
    }
    cos_sum += x_in.x.row(i).dot(x_out.x.row(i)) / (na * nb);
    ++used;
  }
  if (used == 0) throw Error("block influence undefined: all rows are zero");
  bi.score = 1.0 - cos_sum / static_cast<double>(used);
  return bi;
}

double block_influence(const ActivationBatch& x_in, const ActivationBatch& x_out) {
  return block_influence_detail(x_in, x_out).score;
}

LayerImportance layer_importance(std::span<const LayerActivations> acts) {
  LayerImportance imp;
  imp.scores.resize(static_cast<Eigen::Index>(acts.size()));
  for (std::size_t l = 0; l < acts.size(); ++l) {
    imp.scores[static_cast<Eigen::Index>(l)] = block_influence(acts[l].x_in, acts[l].x_out);
  }
  return imp;
}

double allocation_objective(const Eigen::VectorXd& scores, const Eigen::VectorXd& params, double mu,
                            const Eigen::VectorXd& bits) {
  double value = 0.0;
  for (Eigen::Index l = 0; l < bits.size(); ++l) {
    value += scores[l] * bits[l] * params[l] + mu * entropy_term(bits[l]);
  }
  return value;
}

double default_mu(const Eigen::VectorXd& scores, const Eigen::VectorXd& params) {
  const Eigen::ArrayXd sp = scores.array() * params.array();
  const double mean = sp.mean();
  const double stddev = std::sqrt((sp - mean).square().mean());
  return stddev > 0.0 ? 0.1 * stddev : 1.0;
}

BitPlan allocate_bits(const LayerImportance& importance, const Eigen::VectorXd& params, double b_avg,
                      double mu) {
  check_inputs(importance, params, b_avg, mu);
  const Eigen::VectorXd& s = importance.scores;
  BitPlan plan;
  plan.scores = s;
  plan.params = params;
  plan.total_params = params.sum();
  plan.target = b_avg;
  plan.mu = mu;
  const double total = plan.total_params;

  const bool equal_params = (params.array() == params[0]).all();
  if (equal_params) {
    const double p = params[0];
    const Eigen::VectorXd z = s * (p / mu);
    const double lse = log_sum_exp(z);
    const double log_scale = std::log(total * b_avg / p);
    Eigen::VectorXd log_b = (z.array() - lse + log_scale).matrix();
    plan.bits_cont = log_b.array().exp().matrix();
    // Stationarity: s p - mu log b - mu - lambda p / P = 0.
    plan.lambda = total * (s[0] * p - mu - mu * log_b[0]) / p;
  } else {
    // Solve LSE(c_l - t p_l) = log b_avg for t = lambda / (P mu).
    const Eigen::VectorXd c = (params.array() / total).log() + s.array() * params.array() / mu - 1.0;
    const double log_target = std::log(b_avg);
    auto f = [&](double t) { return log_sum_exp(c - t * params); };
    const double log_l = std::log(static_cast<double>(params.size()));
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index l = 0; l < params.size(); ++l) {
      lo = std::min(lo, (c[l] - log_target) / params[l]);
      hi = std::max(hi, (c[l] - log_target + log_l) / params[l]);
    }
    const double bracket_lo = lo;
    const double bracket_hi = hi;
    for (int iter = 0; iter < 400; ++iter) {
      const double mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      (f(mid) > log_target ? lo : hi) = mid;
    }
    const double t = 0.5 * (lo + hi);
    const double residual = f(t) - log_target;
    if (!std::isfinite(residual) || std::abs(residual) > 1e-6) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "multiplier bisection did not converge: bracket [" << bracket_lo << ", " << bracket_hi
          << "], residual " << residual;
      throw Error(msg.str());
    }
    plan.bits_cont = (s.array() * params.array() / mu - 1.0 - t * params.array()).exp().matrix();
    plan.lambda = total * mu * t;
  }
  // Close the budget exactly.
  const double achieved = plan.bits_cont.dot(params) / total;
  plan.bits_cont *= b_avg / achieved;
  plan.objective_value = allocation_objective(s, params, mu, plan.bits_cont);
  return plan;
}

BitPlan round_bits(const BitPlan& plan, std::span<const int> allowed_in) {
  if (allowed_in.empty()) throw Error("allowed bit set is empty");
  std::vector<int> allowed(allowed_in.begin(), allowed_in.end());
  std::sort(allowed.begin(), allowed.end());
  allowed.erase(std::unique(allowed.begin(), allowed.end()), allowed.end());
  const auto n = static_cast<std::size_t>(plan.bits_cont.size());
  const double total = plan.total_params;
  const double budget = plan.target * (1.0 + 1e-12);
  BitPlan out = plan;
  out.bits_int.assign(n, 0);

  // A continuous plan that already sits on allowed widths within budget is kept.
  bool on_grid = true;
  double used = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    const double b = plan.bits_cont[static_cast<Eigen::Index>(l)];
    const long r = std::lround(b);
    on_grid = on_grid && std::abs(b - static_cast<double>(r)) <= 1e-9 &&
              std::binary_search(allowed.begin(), allowed.end(), static_cast<int>(r));
    out.bits_int[l] = static_cast<int>(r);
    used += static_cast<double>(r) * plan.params[static_cast<Eigen::Index>(l)];
  }
  if (on_grid && used / total <= budget) return out;

  auto floor_it = std::upper_bound(allowed.begin(), allowed.end(), budget);
  if (floor_it == allowed.begin()) {
    throw Error("infeasible rounding: smallest allowed bit " + std::to_string(allowed.front()) +
                " exceeds b_avg " + std::to_string(plan.target));
  }
  const int lo = *std::prev(floor_it);
  const int hi = floor_it == allowed.end() ? lo : *floor_it;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return plan.bits_cont[static_cast<Eigen::Index>(a)] > plan.bits_cont[static_cast<Eigen::Index>(b)];
  });
  std::fill(out.bits_int.begin(), out.bits_int.end(), lo);
  double bits_used = static_cast<double>(lo) * total;
  for (const std::size_t l : order) {
    const double extra = static_cast<double>(hi - lo) * plan.params[static_cast<Eigen::Index>(l)];
    if (hi == lo || (bits_used + extra) / total > budget) break;
    bits_used += extra;
    out.bits_int[l] = hi;
  }
  return out;
}

BitPlan alloc_oracle(const LayerImportance& importance, const Eigen::VectorXd& params, double b_avg,
                     double mu, double grid_step) {
  check_inputs(importance, params, b_avg, mu);
  const Eigen::Index layers = params.size();
  if (layers > 6) throw Error("alloc_oracle supports at most 6 layers");
  if (!(grid_step > 0.0)) throw Error("grid step must be positive");
  const Eigen::VectorXd& s = importance.scores;

  BitPlan plan;
  plan.scores = s;
  plan.params = params;
  plan.total_params = params.sum();
  plan.target = b_avg;
  plan.mu = mu;
  if (layers == 1) {
    plan.bits_cont = Eigen::VectorXd::Constant(1, b_avg);
    plan.objective_value = allocation_objective(s, params, mu, plan.bits_cont);
    return plan;
  }

  std::vector<long long> units(static_cast<std::size_t>(layers));
  long long g = 0;
  for (Eigen::Index l = 0; l < layers; ++l) {
    const double r = std::round(params[l]);
    if (std::abs(params[l] - r) > 1e-9) throw Error("alloc_oracle needs integral parameter counts");
    units[static_cast<std::size_t>(l)] = static_cast<long long>(r);
    g = std::gcd(g, units[static_cast<std::size_t>(l)]);
  }
  for (auto& u : units) u /= g;
  const double total_units = std::accumulate(units.begin(), units.end(), 0.0);
  // Budget in (unit x step) quanta: sum_l units_l * k_l = budget_units.
  const double budget_units = total_units * b_avg / grid_step;
  constexpr double kMaxStates = 2e5;
  if (budget_units > kMaxStates) throw Error("alloc_oracle grid too large");
  const auto smax = static_cast<long long>(std::ceil(budget_units));

  auto f = [&](Eigen::Index l, double b) { return s[l] * b * params[l] + mu * entropy_term(b); };
  constexpr double kNone = -std::numeric_limits<double>::infinity();
  const auto width = static_cast<std::size_t>(smax + 1);
  std::vector<std::vector<double>> best(static_cast<std::size_t>(layers), std::vector<double>(width, kNone));
  std::vector<std::vector<long long>> choice(static_cast<std::size_t>(layers), std::vector<long long>(width, 0));
  std::vector<double> prev(width, kNone);
  prev[0] = 0.0;
  for (Eigen::Index l = 0; l + 1 < layers; ++l) {
    const long long u = units[static_cast<std::size_t>(l)];
    auto& cur = best[static_cast<std::size_t>(l)];
    auto& pick = choice[static_cast<std::size_t>(l)];
    for (long long from = 0; from <= smax; ++from) {
      if (prev[static_cast<std::size_t>(from)] == kNone) continue;
      for (long long k = 0; from + u * k <= smax; ++k) {
        const long long to = from + u * k;
        const double v = prev[static_cast<std::size_t>(from)] + f(l, static_cast<double>(k) * grid_step);
        if (v > cur[static_cast<std::size_t>(to)]) {
          cur[static_cast<std::size_t>(to)] = v;
          pick[static_cast<std::size_t>(to)] = k;
        }
      }
    }
    prev = cur;
  }
  const Eigen::Index last = layers - 1;
  const auto last_units = static_cast<double>(units[static_cast<std::size_t>(last)]);
  double best_value = kNone;
  long long best_state = -1;
  for (long long st = 0; st <= smax; ++st) {
    if (prev[static_cast<std::size_t>(st)] == kNone) continue;
    const double remaining = budget_units - static_cast<double>(st);
    if (remaining <= 0.0) continue;
    const double v = prev[static_cast<std::size_t>(st)] + f(last, remaining * grid_step / last_units);
    if (v > best_value) {
      best_value = v;
      best_state = st;
    }
  }
  if (best_state < 0) throw Error("alloc_oracle: no budget-feasible grid point");

  plan.bits_cont.resize(layers);
  plan.bits_cont[last] = (budget_units - static_cast<double>(best_state)) * grid_step / last_units;
  long long st = best_state;
  for (Eigen::Index l = last - 1; l >= 0; --l) {
    const long long k = choice[static_cast<std::size_t>(l)][static_cast<std::size_t>(st)];
    plan.bits_cont[l] = static_cast<double>(k) * grid_step;
    st -= units[static_cast<std::size_t>(l)] * k;
  }
  plan.objective_value = allocation_objective(s, params, mu, plan.bits_cont);
  return plan;
}

}  // namespace casp
