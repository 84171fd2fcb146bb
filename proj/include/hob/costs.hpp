#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hob/nn_ops.hpp"
#include "hob/tensor.hpp"

namespace hob {

// One layer's contribution to a cost report. Multiply-accumulates are kept apart from
// per-element work so the FLOP convention can be applied afterwards.
struct CostRow {
  std::string name;
  Shape5 output;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
};

using CostRows = std::vector<CostRow>;

inline CostRow conv_cost(std::string name, const ConvSpec& spec, Shape5 in) {
  const Shape5 out = spec.output_shape(in);
  return {std::move(name), out, spec.param_count(),
          static_cast<std::uint64_t>(out.numel()) * (spec.in_channels / spec.groups) * spec.grid.size(),
          spec.bias ? out.numel() : 0};
}

inline CostRow elementwise_cost(std::string name, Shape5 out, std::uint64_t params = 0) {
  return {std::move(name), out, params, 0, out.numel()};
}

}  // namespace hob
