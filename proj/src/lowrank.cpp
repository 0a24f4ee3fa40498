#include "casp/lowrank.hpp"

#include "casp/toy_transformer.hpp"

namespace casp {

Eigen::Index rank_for_keep(double rank_keep, Eigen::Index d_in, Eigen::Index d_out) {
  if (!(rank_keep > 0.0 && rank_keep <= 1.0)) throw Error("rank_keep must lie in (0, 1]");
  const double target = rank_keep * static_cast<double>(d_in) * static_cast<double>(d_out) /
                        static_cast<double>(d_in + d_out);
  const auto rank = static_cast<Eigen::Index>(std::floor(target + 1e-9));
  if (rank < 1) {
    throw Error("rank_keep " + std::to_string(rank_keep) + " gives rank < 1 for " + std::to_string(d_in) +
                "x" + std::to_string(d_out));
  }
  return rank;
}

ModelCheckpoint apply_lowrank_qk(const ModelCheckpoint& model, std::span<const LayerActivations> acts,
                                 const LowRankOptions& options) {
  validate(model);
  if (acts.size() != model.layers.size()) throw Error("activation count does not match layer count");
  const auto d = static_cast<Eigen::Index>(model.config.d);
  const Eigen::Index rank = rank_for_keep(options.rank_keep, d, d);
  ModelCheckpoint out = model;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    CovarianceAccumulator<double> acc(d);
    acc.add(acts[l].attn_in);
    const auto wt = fit_whitening(acc, options.damping, true);
    for (WeightSlot* slot : {&out.layers[l].w_q, &out.layers[l].w_k}) {
      if (!std::holds_alternative<Weights>(*slot)) {
        throw Error("layer " + std::to_string(l) + ": w_q/w_k must be dense before low-rank decomposition");
      }
      const auto f = decompose_whitened<double>(materialize(*slot), wt, rank);
      *slot = LowRankWeight{Weights(f.a.cast<float>()), Weights(f.b.cast<float>()), static_cast<int>(rank)};
    }
  }
  validate(out);
  return out;
}

ModelCheckpoint apply_lowrank_qk(const ModelCheckpoint& model, const CalibrationSet& calib,
                                 const LowRankOptions& options) {
  const auto acts = forward_collect(model, calib);
  return apply_lowrank_qk(model, acts, options);
}

}  // namespace casp
