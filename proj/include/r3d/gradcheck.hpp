#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "r3d/graph.hpp"

namespace r3d {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed = false;

  double worst_rel_error() const;
};

// Builds a scalar loss from freshly bound parameters (same order as given).
using LossFn = std::function<Var(Graph&, std::span<const Var>)>;

// Compares reverse-mode gradients with central differences
// (f(x+eps) - f(x-eps)) / 2eps for every scalar of every parameter. The
// relative error of one entry is |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-6); passes iff every entry is within tol.
GradCheckReport grad_check(const LossFn& fn, std::span<const NamedTensor> params,
                           double eps = 1e-5, double tol = 1e-4);

}  // namespace r3d
