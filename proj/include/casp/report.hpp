#pragma once

#include <span>
#include <string>

#include "casp/bit_alloc.hpp"
#include "casp/pipeline.hpp"

namespace casp {

// Line-delimited JSON reports: one object per line, each tagged by "record".

std::string to_jsonl(const EvalReport& report, const CompressionRecipe& recipe);
std::string to_jsonl(std::span<const LayerAttentionSummary> layers);
std::string to_jsonl(const BitPlan& plan);
std::string to_jsonl(std::span<const SweepRow> rows, double spearman_rho);

}  // namespace casp
