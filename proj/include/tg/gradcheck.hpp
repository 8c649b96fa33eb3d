#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tg/tensor.hpp"

namespace tg {

struct GradcheckOptions {
  double epsilon = 1e-5;
  /// Inputs are drawn uniform in [-input_range, input_range].
  double input_range = 1.0;
  /// Drawn inputs are pushed at least this far from zero (for relu/elu kinks).
  double kink_margin = 0.0;
  /// Denominator floor: err = |a - n| / max(|a|, |n|, floor).
  double relative_floor = 1e-3;
  /// Cap on checked elements per tensor; a seeded subset is used above it.
  std::size_t max_elements_per_tensor = 0;  // 0 = all
};

using GradcheckFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Draws inputs of the given shapes, reduces the op's output with a seeded
/// random-weight sum head, and compares reverse-mode gradients of every input
/// with central finite differences. Returns the max relative error.
double gradcheck(const GradcheckFn& op, const std::vector<Shape>& input_shapes, std::uint64_t seed,
                 const GradcheckOptions& options = {});

/// Same comparison over caller-supplied tensors (all of which are perturbed).
/// Useful for checking a whole model's parameters.
double gradcheck_tensors(const std::function<Tensor()>& forward, std::vector<Tensor> wrt,
                         std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace tg
