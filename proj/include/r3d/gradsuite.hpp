#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace r3d {

struct GradSuiteCase {
  std::string module;
  std::uint64_t seed = 0;
  double tolerance = 0.0;
  double worst_rel_error = 0.0;
  std::size_t scalars = 0;
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradSuiteCase> cases;
  bool passed = false;
  double seconds = 0.0;
};

// Module names exercised by run_grad_suite, in order.
std::vector<std::string> grad_suite_modules();

// Central-difference checks of every differentiable module on small random
// instances, one case per (module, seed). Elementwise ops use tolerance
// 1e-4, composite modules 1e-3.
GradSuiteReport run_grad_suite(std::span<const std::uint64_t> seeds);

}  // namespace r3d
