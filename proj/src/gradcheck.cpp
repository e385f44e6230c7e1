#include "r3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace r3d {
namespace {

double evaluate(const LossFn& fn, const std::vector<Tensor>& values) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(values.size());
  for (const auto& v : values) vars.push_back(g.constant(v));
  return fn(g, vars).value().item();
}

}  // namespace

double GradCheckReport::worst_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

GradCheckReport grad_check(const LossFn& fn, std::span<const NamedTensor> params, double eps,
                           double tol) {
  std::vector<Tensor> values;
  for (const auto& p : params) values.push_back(p.value);

  Graph g;
  std::vector<Var> vars;
  for (const auto& v : values) vars.push_back(g.parameter(v));
  Var loss = fn(g, vars);
  g.backward(loss);

  GradCheckReport report;
  report.tolerance = tol;
  report.passed = true;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = g.grad(vars[p]);
    GradCheckEntry entry{params[p].name};
    for (std::size_t i = 0; i < values[p].size(); ++i) {
      const double saved = values[p].data[i];
      values[p].data[i] = saved + eps;
      const double up = evaluate(fn, values);
      values[p].data[i] = saved - eps;
      const double down = evaluate(fn, values);
      values[p].data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.data[i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-6});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel_err);
    }
    if (!(entry.max_rel_error <= tol)) report.passed = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace r3d
