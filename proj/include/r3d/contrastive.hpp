#pragma once

#include <span>
#include <vector>

#include "r3d/ops.hpp"
#include "r3d/scene.hpp"

namespace r3d {

// Pairwise same-instance matrix over superpoints. R(i, j) = 1 iff i == j or
// both superpoints are assigned to the same instance (background never
// pairs with anything but itself).
struct RelationPrior {
  Tensor matrix;                // [M x M]
  std::vector<int> assignment;  // per superpoint, -1 = background
};

RelationPrior relation_prior(std::span<const int> assignment);
RelationPrior relation_prior(const Scene& scene);

struct SimilarityDiagnostics {
  std::size_t zero_norm_rows = 0;
};

// Cosine similarity of every pair of rows: [M x C] -> [M x M]. Zero rows are
// normalised by a 1e-12 floor and counted in diag.
Var cosine_similarity_matrix(const Var& features, SimilarityDiagnostics* diag = nullptr);

struct ContrastiveOptions {
  // Reweights positive and negative pairs so each class carries half the
  // loss. Off by default.
  bool balance_classes = false;
  double clamp = 1e-7;
};

// Mean binary cross-entropy between (S + 1) / 2 and R over all M^2 entries,
// probabilities clamped to [clamp, 1 - clamp].
Var contrastive_loss(const Var& similarity, const RelationPrior& prior, const ContrastiveOptions& opt = {});

}  // namespace r3d
