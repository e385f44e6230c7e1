#pragma once

#include <span>
#include <vector>

#include "r3d/kernels.hpp"
#include "r3d/params.hpp"

namespace r3d {

// Grouping of N points into M superpoints, kept both as a per-point index
// and as ascending CSR member lists.
class SuperpointPartition {
 public:
  SuperpointPartition() = default;
  // ids must cover [0, M) with no empty superpoint.
  static SuperpointPartition from_ids(std::span<const int> ids);

  std::size_t points() const { return point_to_superpoint_.size(); }
  std::size_t superpoints() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::span<const int> point_to_superpoint() const { return point_to_superpoint_; }
  std::span<const int> members(std::size_t s) const {
    return {members_.data() + offsets_[s], static_cast<std::size_t>(offsets_[s + 1] - offsets_[s])};
  }
  kernels::Segments segments() const { return {point_to_superpoint_, offsets_, members_}; }

 private:
  std::vector<int> point_to_superpoint_;
  std::vector<int> offsets_;
  std::vector<int> members_;
};

enum class PoolMode : std::uint8_t { kMax, kMean };

// Channel-wise max or mean of each superpoint's point rows: [N x C] -> [M x C].
// Max routes its gradient to the first point attaining the maximum.
Var scatter_pool(const Var& features, const SuperpointPartition& part, PoolMode mode);

// Each point receives its superpoint's row: [M x C] -> [N x C].
Var broadcast(const Var& superpoint_features, const SuperpointPartition& part);

// Softmax of an [N x 1] score column within each superpoint.
Var superpoint_softmax(const Var& scores, const SuperpointPartition& part);

// sum over members of weight[i] * features[i]: ([N x C], [N x 1]) -> [M x C].
Var weighted_pool(const Var& features, const Var& weights, const SuperpointPartition& part);

struct AsamParams {
  MlpParams max_branch;   // C -> C -> 1, scores from (F_max - F)
  MlpParams mean_branch;  // C -> C -> 1, scores from (F_mean - F)
  LinearParams fuse;      // 2C -> C
};

void init_asam(ParamStore& store, const std::string& prefix, std::size_t width, Rng& rng);
AsamParams bind_asam(const BoundParams& p, const std::string& prefix);

struct AsamOutput {
  Var features;      // [M x C]
  Var max_weights;   // [N x 1], sums to 1 per superpoint
  Var mean_weights;  // [N x 1]
};

// Adaptive aggregation: per-point scores from the deviation to the max- and
// mean-pooled superpoint features, normalised within each superpoint, used
// to re-pool the point features; the two pooled maps are fused back to C.
AsamOutput asam_forward(const Var& features, const SuperpointPartition& part, const AsamParams& p);

}  // namespace r3d
