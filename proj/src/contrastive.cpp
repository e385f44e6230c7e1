#include "r3d/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace r3d {

RelationPrior relation_prior(std::span<const int> assignment) {
  const std::size_t m = assignment.size();
  RelationPrior prior{Tensor::matrix(m, m), {assignment.begin(), assignment.end()}};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (i == j || (assignment[i] >= 0 && assignment[i] == assignment[j])) prior.matrix(i, j) = 1.0;
  return prior;
}

RelationPrior relation_prior(const Scene& scene) {
  return relation_prior(superpoint_instance_assignment(scene));
}

Var cosine_similarity_matrix(const Var& features, SimilarityDiagnostics* diag) {
  std::size_t zero_rows = 0;
  const Var unit = row_l2_normalize(features, 1e-12, &zero_rows);
  if (diag) diag->zero_norm_rows += zero_rows;
  return matmul_nt(unit, unit);
}

Var contrastive_loss(const Var& similarity, const RelationPrior& prior, const ContrastiveOptions& opt) {
  require_matrix(similarity.value(), "contrastive_loss");
  if (similarity.shape() != prior.matrix.shape) {
    throw ShapeError("contrastive_loss: similarity " + shape_str(similarity.shape()) + " vs prior " +
                     shape_str(prior.matrix.shape));
  }
  const Tensor& s = similarity.value();
  const std::size_t n = s.size();
  if (n == 0) throw ShapeError("contrastive_loss: empty similarity matrix");

  // Per-entry weights sum to one.
  auto weights = std::make_shared<Tensor>(prior.matrix.shape, 1.0 / static_cast<double>(n));
  if (opt.balance_classes) {
    std::size_t pos = 0;
    for (double r : prior.matrix.data) pos += r > 0.5;
    const std::size_t neg = n - pos;
    for (std::size_t i = 0; i < n; ++i) {
      const bool is_pos = prior.matrix.data[i] > 0.5;
      const std::size_t count = is_pos ? pos : neg;
      const double share = (pos == 0 || neg == 0) ? 1.0 : 0.5;
      weights->data[i] = share / static_cast<double>(count);
    }
  }

  const double lo = opt.clamp, hi = 1.0 - opt.clamp;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(0.5 * (s.data[i] + 1.0), lo, hi);
    const double r = prior.matrix.data[i];
    loss -= weights->data[i] * (r * std::log(p) + (1.0 - r) * std::log(1.0 - p));
  }
  auto target = std::make_shared<Tensor>(prior.matrix);
  return similarity.graph().record(Tensor::scalar(loss), {similarity},
                                   [similarity, weights, target, lo, hi](Graph& g, const Tensor& gy) {
                                     const Tensor& s = similarity.value();
                                     Tensor& gs = g.grad_buffer(similarity);
                                     const double up = gy.item();
                                     for (std::size_t i = 0; i < s.size(); ++i) {
                                       const double raw = 0.5 * (s.data[i] + 1.0);
                                       if (raw < lo || raw > hi) continue;
                                       const double r = target->data[i];
                                       const double dp = -r / raw + (1.0 - r) / (1.0 - raw);
                                       gs.data[i] += up * weights->data[i] * dp * 0.5;
                                     }
                                   });
}

}  // namespace r3d
