#include "casp/report.hpp"

#include <json.hpp>

namespace casp {

namespace {

using nlohmann::ordered_json;

ordered_json attention_json(const LayerAttentionSummary& s) {
  return ordered_json{{"n_tokens", s.n_tokens},         {"sparsity", s.sparsity},
                      {"density", s.density},           {"e", s.e},
                      {"e_row_sum", s.e_row_sum},       {"delta_y_norm", s.delta_y_norm},
                      {"bound_exact", s.bound_exact},   {"bound_density", s.bound_density},
                      {"taylor_residual", s.taylor_residual}};
}

void append(std::string& out, const ordered_json& j) {
  out += j.dump();
  out += '\n';
}

}  // namespace

std::string to_jsonl(const EvalReport& report, const CompressionRecipe& recipe) {
  std::string out;
  ordered_json summary{{"record", "summary"},
                       {"rank_keep", recipe.lowrank ? recipe.rank_keep : 1.0},
                       {"lowrank", recipe.lowrank},
                       {"scheme", recipe.scheme ? std::string(to_string(*recipe.scheme)) : "none"},
                       {"b_avg", recipe.b_avg},
                       {"allowed_bits", recipe.allowed_bits},
                       {"group_size", recipe.group_size},
                       {"seed", recipe.seed},
                       {"causal_maps", recipe.causal_maps},
                       {"allocation_target", report.allocation_target},
                       {"mu", report.mu},
                       {"lambda", report.lambda},
                       {"ppl_before", report.ppl_before},
                       {"ppl", report.ppl},
                       {"model_size_bytes", report.model_size_bytes},
                       {"avg_effective_bits", report.avg_effective_bits}};
  append(out, summary);
  for (const auto& layer : report.layers) {
    ordered_json j{{"record", "layer"}, {"layer", layer.layer}};
    j.update(attention_json(layer.attention));
    j["score"] = layer.score;
    j["params"] = layer.params;
    j["bits_cont"] = layer.bits_cont;
    j["bits_int"] = layer.bits_int;
    j["effective_bits"] = layer.effective_bits;
    append(out, j);
  }
  return out;
}

std::string to_jsonl(std::span<const LayerAttentionSummary> layers) {
  std::string out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    ordered_json j{{"record", "attention"}, {"layer", l}};
    j.update(attention_json(layers[l]));
    append(out, j);
  }
  return out;
}

std::string to_jsonl(const BitPlan& plan) {
  std::string out;
  append(out, ordered_json{{"record", "allocation"},
                           {"target", plan.target},
                           {"total_params", plan.total_params},
                           {"mu", plan.mu},
                           {"lambda", plan.lambda},
                           {"objective", plan.objective_value}});
  for (Eigen::Index l = 0; l < plan.bits_cont.size(); ++l) {
    ordered_json j{{"record", "layer"},
                   {"layer", l},
                   {"score", plan.scores[l]},
                   {"params", plan.params[l]},
                   {"bits_cont", plan.bits_cont[l]}};
    if (static_cast<std::size_t>(l) < plan.bits_int.size()) j["bits_int"] = plan.bits_int[static_cast<std::size_t>(l)];
    append(out, j);
  }
  return out;
}

std::string to_jsonl(std::span<const SweepRow> rows, double spearman_rho) {
  std::string out;
  for (const auto& row : rows) {
    ordered_json j{{"record", "sweep"}, {"ratio", row.ratio}};
    j.update(attention_json(row.attention));
    j["ppl_base"] = row.ppl_base;
    j["ppl_lowrank"] = row.ppl_lowrank;
    j["rel_degradation"] = row.rel_degradation;
    append(out, j);
  }
  append(out, ordered_json{{"record", "sweep_summary"}, {"spearman_ratio_e", spearman_rho}});
  return out;
}

}  // namespace casp
