#include "r3d/rsa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace r3d {

BBox mask_to_bbox(std::span<const double> mask_prob, const SuperpointPartition& part, const Scene& scene,
                  double threshold, const Vec3& fallback_center) {
  if (mask_prob.size() != part.superpoints()) {
    throw ShapeError("mask_to_bbox: " + std::to_string(mask_prob.size()) + " probabilities for " +
                     std::to_string(part.superpoints()) + " superpoints");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  Vec3 lo{inf, inf, inf}, hi{-inf, -inf, -inf};
  bool any = false;
  for (std::size_t s = 0; s < part.superpoints(); ++s) {
    if (!(mask_prob[s] > threshold)) continue;
    for (int p : part.members(s)) {
      const Vec3 x = scene.position(static_cast<std::size_t>(p));
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], x[a]);
        hi[a] = std::max(hi[a], x[a]);
      }
      any = true;
    }
  }
  BBox box;
  if (!any) {
    box.center = fallback_center;
    return box;
  }
  for (int a = 0; a < 3; ++a) {
    box.center[a] = 0.5 * (lo[a] + hi[a]);
    box.extent[a] = std::max(hi[a] - lo[a], kBoxEpsilon);
  }
  return box;
}

Tensor relation_tensor(std::span<const BBox> boxes) {
  const std::size_t k = boxes.size();
  Tensor t({k, k, 6});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double* out = t.data.data() + (i * k + j) * 6;
      if (i == j) continue;
      const BBox& a = boxes[i];
      const BBox& b = boxes[j];
      for (int ax = 0; ax < 3; ++ax) {
        out[ax] = std::log(std::abs(a.center[ax] - b.center[ax]) / a.extent[ax] + 1.0);
        out[3 + ax] = std::log(a.extent[ax] / b.extent[ax]);
      }
    }
  return t;
}

void init_rsa(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t heads,
              std::size_t sincos_dim, Rng& rng) {
  if (heads == 0 || width % heads != 0) throw ConfigError("rsa: heads must divide the model width");
  for (const char* name : {".query", ".key", ".value", ".output"}) init_linear(store, prefix + name, width, width, rng);
  init_linear(store, prefix + ".relation", 6 * sincos_dim, heads, rng);
  init_norm(store, prefix + ".norm", width);
}

RsaParams bind_rsa(const BoundParams& p, const std::string& prefix, std::size_t heads, std::size_t sincos_dim) {
  return {bind_linear(p, prefix + ".query"),    bind_linear(p, prefix + ".key"),
          bind_linear(p, prefix + ".value"),    bind_linear(p, prefix + ".output"),
          bind_linear(p, prefix + ".relation"), bind_norm(p, prefix + ".norm"),
          heads,                                sincos_dim};
}

Var relation_bias(const Tensor& relations, const RsaParams& p) {
  if (relations.rank() != 3 || relations.shape[0] != relations.shape[1] || relations.shape[2] != 6) {
    throw ShapeError("relation_bias: expected [K x K x 6], got " + shape_str(relations.shape));
  }
  const std::size_t k = relations.shape[0];
  Tensor lifted = sincos_encode(relations, p.sincos_dim);
  lifted.shape = {k * k, 6 * p.sincos_dim};
  Graph& g = p.relation.weight.graph();
  const Var per_pair = p.relation(g.constant(std::move(lifted)));  // [K*K x H]
  return channels_first(reshape(per_pair, {k, k, p.heads}));
}

Var rsa_forward(const Var& queries, const Var* bias, const RsaParams& p, Tensor* probs) {
  require_matrix(queries.value(), "rsa_forward");
  if (queries.cols() % p.heads != 0) throw ShapeError("rsa_forward: heads must divide the query width");
  const Var q = split_heads(p.query(queries), p.heads);
  const Var k = split_heads(p.key(queries), p.heads);
  const Var v = split_heads(p.value(queries), p.heads);
  const Var attended = merge_heads(attention_core(q, k, v, bias, nullptr, probs));
  return p.norm(queries + p.output(attended));
}

Var rsa_forward(const Var& queries, std::span<const BBox> boxes, const RsaParams& p, Tensor* probs) {
  if (boxes.size() != queries.rows()) {
    throw ShapeError("rsa_forward: " + std::to_string(boxes.size()) + " boxes for " +
                     std::to_string(queries.rows()) + " queries");
  }
  const Var bias = relation_bias(relation_tensor(boxes), p);
  return rsa_forward(queries, &bias, p, probs);
}

}  // namespace r3d
