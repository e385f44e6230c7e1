#pragma once

#include <span>
#include <vector>

#include "r3d/asam.hpp"
#include "r3d/scene.hpp"

namespace r3d {

inline constexpr double kBoxEpsilon = 1e-4;

struct BBox {
  Vec3 center{0, 0, 0};
  Vec3 extent{kBoxEpsilon, kBoxEpsilon, kBoxEpsilon};
};

// Axis-aligned bounds of the points of every superpoint with probability
// above threshold; extents are floored at kBoxEpsilon. An empty selection
// yields a minimal box at fallback_center.
BBox mask_to_bbox(std::span<const double> mask_prob, const SuperpointPartition& part, const Scene& scene,
                  double threshold, const Vec3& fallback_center);

// [K x K x 6]: for boxes i, j the positional channels
// log(|c_i - c_j| / e_i + 1) per axis, then the geometric channels
// log(e_i / e_j) per axis.
Tensor relation_tensor(std::span<const BBox> boxes);

struct RsaParams {
  LinearParams query, key, value, output;  // C -> C
  LinearParams relation;                   // 6d -> H
  NormParams norm;
  std::size_t heads = 1;
  std::size_t sincos_dim = 8;
};

void init_rsa(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t heads,
              std::size_t sincos_dim, Rng& rng);
RsaParams bind_rsa(const BoundParams& p, const std::string& prefix, std::size_t heads, std::size_t sincos_dim);

// Per-head additive attention bias [H x K x K]: every relation channel is
// lifted to sincos_dim values, then projected to one value per head.
Var relation_bias(const Tensor& relations, const RsaParams& p);

// LayerNorm(Q + W_o MHA(Q; bias)). Without a bias this is plain multi-head
// self-attention. probs, when given, receives the [H x K x K] weights.
Var rsa_forward(const Var& queries, const Var* bias, const RsaParams& p, Tensor* probs = nullptr);
Var rsa_forward(const Var& queries, std::span<const BBox> boxes, const RsaParams& p, Tensor* probs = nullptr);

}  // namespace r3d
