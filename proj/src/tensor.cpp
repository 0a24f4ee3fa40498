#include "casp/tensor.hpp"

#include <string>

#include "casp/error.hpp"
#include "casp/half.hpp"
#include "casp/quantizer.hpp"

namespace casp {

std::string_view to_string(QuantScheme scheme) {
  switch (scheme) {
    case QuantScheme::rtn:
      return "rtn";
    case QuantScheme::greedy:
      return "greedy";
    case QuantScheme::vq:
      return "vq";
  }
  return "unknown";
}

QuantScheme parse_scheme(std::string_view name) {
  if (name == "rtn") return QuantScheme::rtn;
  if (name == "greedy") return QuantScheme::greedy;
  if (name == "vq") return QuantScheme::vq;
  throw Error("unknown quantization scheme '" + std::string(name) + "'");
}

Eigen::VectorXf Codebook::entry(std::size_t i) const {
  Eigen::VectorXf v(dim);
  for (int j = 0; j < dim; ++j) {
    v[j] = half_to_float(entries[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)]);
  }
  return v;
}

std::size_t QuantizedTensor::group_count() const {
  if (group_size <= 0) return 0;
  const auto g = static_cast<std::size_t>(group_size);
  return (weight_count() + g - 1) / g;
}

int QuantizedTensor::index_bits() const {
  return scheme == QuantScheme::vq ? n_bits * group_size : n_bits;
}

std::pair<Eigen::Index, Eigen::Index> dims(const Factor& factor) {
  return std::visit(
      [](const auto& f) -> std::pair<Eigen::Index, Eigen::Index> {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, Weights>) {
          return {f.rows(), f.cols()};
        } else {
          return {f.rows, f.cols};
        }
      },
      factor);
}

std::pair<Eigen::Index, Eigen::Index> dims(const WeightSlot& slot) {
  return std::visit(
      [](const auto& s) -> std::pair<Eigen::Index, Eigen::Index> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Weights>) {
          return {s.rows(), s.cols()};
        } else if constexpr (std::is_same_v<T, LowRankWeight>) {
          return {dims(s.a).first, dims(s.b).second};
        } else {
          return {s.rows, s.cols};
        }
      },
      slot);
}

std::size_t param_count(const Factor& factor) {
  const auto [r, c] = dims(factor);
  return static_cast<std::size_t>(r * c);
}

std::size_t param_count(const WeightSlot& slot) {
  if (const auto* lr = std::get_if<LowRankWeight>(&slot)) {
    return param_count(lr->a) + param_count(lr->b);
  }
  const auto [r, c] = dims(slot);
  return static_cast<std::size_t>(r * c);
}

Eigen::MatrixXd materialize(const Factor& factor) {
  if (const auto* w = std::get_if<Weights>(&factor)) return w->cast<double>();
  return dequantize(std::get<QuantizedTensor>(factor)).cast<double>();
}

Eigen::MatrixXd materialize(const WeightSlot& slot) {
  return std::visit(
      [](const auto& s) -> Eigen::MatrixXd {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Weights>) {
          return s.template cast<double>();
        } else if constexpr (std::is_same_v<T, LowRankWeight>) {
          return materialize(s.a) * materialize(s.b);
        } else {
          return dequantize(s).template cast<double>();
        }
      },
      slot);
}

std::uint64_t storage_bits(const Factor& factor) {
  if (const auto* w = std::get_if<Weights>(&factor)) return 32ull * static_cast<std::uint64_t>(w->size());
  return effective_bits(std::get<QuantizedTensor>(factor)).total_bits();
}

std::uint64_t storage_bits(const WeightSlot& slot) {
  return std::visit(
      [](const auto& s) -> std::uint64_t {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Weights>) {
          return 32ull * static_cast<std::uint64_t>(s.size());
        } else if constexpr (std::is_same_v<T, LowRankWeight>) {
          return storage_bits(s.a) + storage_bits(s.b);
        } else {
          return effective_bits(s).total_bits();
        }
      },
      slot);
}

}  // namespace casp
