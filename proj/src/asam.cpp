#include "r3d/asam.hpp"

#include <memory>

namespace r3d {

SuperpointPartition SuperpointPartition::from_ids(std::span<const int> ids) {
  SuperpointPartition part;
  part.point_to_superpoint_.assign(ids.begin(), ids.end());
  int m = 0;
  for (int s : ids) {
    if (s < 0) throw ShapeError("superpoint partition: negative superpoint id");
    m = std::max(m, s + 1);
  }
  part.offsets_.assign(static_cast<std::size_t>(m) + 1, 0);
  for (int s : ids) ++part.offsets_[static_cast<std::size_t>(s) + 1];
  for (int s = 0; s < m; ++s) {
    if (part.offsets_[static_cast<std::size_t>(s) + 1] == 0) {
      throw ShapeError("superpoint partition: superpoint " + std::to_string(s) + " is empty");
    }
    part.offsets_[static_cast<std::size_t>(s) + 1] += part.offsets_[static_cast<std::size_t>(s)];
  }
  part.members_.resize(ids.size());
  std::vector<int> fill(part.offsets_.begin(), part.offsets_.end() - 1);
  for (std::size_t i = 0; i < ids.size(); ++i)
    part.members_[static_cast<std::size_t>(fill[static_cast<std::size_t>(ids[i])]++)] = static_cast<int>(i);
  return part;
}

namespace {

void require_points(const Var& x, const SuperpointPartition& part, const char* what) {
  require_matrix(x.value(), what);
  if (x.rows() != part.points()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(x.rows()) + " rows for a partition of " +
                     std::to_string(part.points()) + " points");
  }
}

}  // namespace

Var scatter_pool(const Var& features, const SuperpointPartition& part, PoolMode mode) {
  require_points(features, part, "scatter_pool");
  const std::size_t c = features.cols(), m = part.superpoints();
  Tensor y = Tensor::matrix(m, c);
  const auto seg = part.segments();
  if (mode == PoolMode::kMean) {
    kernels::scatter_mean(features.value().data.data(), c, seg, y.data.data());
    return features.graph().record(std::move(y), {features}, [features, part, c](Graph& g, const Tensor& gy) {
      Tensor& gf = g.grad_buffer(features);
      for (std::size_t s = 0; s < part.superpoints(); ++s) {
        const auto mem = part.members(s);
        const double inv = 1.0 / static_cast<double>(mem.size());
        for (int p : mem)
          for (std::size_t j = 0; j < c; ++j) gf(static_cast<std::size_t>(p), j) += gy(s, j) * inv;
      }
    });
  }
  auto argmax = std::make_shared<std::vector<int>>(m * c);
  kernels::scatter_max(features.value().data.data(), c, seg, y.data.data(), argmax->data());
  return features.graph().record(std::move(y), {features}, [features, argmax, m, c](Graph& g, const Tensor& gy) {
    Tensor& gf = g.grad_buffer(features);
    for (std::size_t s = 0; s < m; ++s)
      for (std::size_t j = 0; j < c; ++j)
        gf(static_cast<std::size_t>((*argmax)[s * c + j]), j) += gy(s, j);
  });
}

Var broadcast(const Var& superpoint_features, const SuperpointPartition& part) {
  require_matrix(superpoint_features.value(), "broadcast");
  if (superpoint_features.rows() != part.superpoints()) {
    throw ShapeError("broadcast: " + std::to_string(superpoint_features.rows()) + " rows for " +
                     std::to_string(part.superpoints()) + " superpoints");
  }
  return gather_rows(superpoint_features, part.point_to_superpoint());
}

Var superpoint_softmax(const Var& scores, const SuperpointPartition& part) {
  require_points(scores, part, "superpoint_softmax");
  if (scores.cols() != 1) throw ShapeError("superpoint_softmax: expected one score per point");
  Tensor y(scores.shape());
  kernels::segment_softmax(scores.value().data.data(), part.segments(), y.data.data());
  auto out = std::make_shared<Tensor>(y);
  return scores.graph().record(std::move(y), {scores}, [scores, out, part](Graph& g, const Tensor& gy) {
    Tensor& gs = g.grad_buffer(scores);
    for (std::size_t s = 0; s < part.superpoints(); ++s) {
      double dot = 0.0;
      for (int p : part.members(s)) dot += gy.data[static_cast<std::size_t>(p)] * out->data[static_cast<std::size_t>(p)];
      for (int p : part.members(s)) {
        const auto i = static_cast<std::size_t>(p);
        gs.data[i] += out->data[i] * (gy.data[i] - dot);
      }
    }
  });
}

Var weighted_pool(const Var& features, const Var& weights, const SuperpointPartition& part) {
  require_points(features, part, "weighted_pool");
  require_points(weights, part, "weighted_pool");
  if (weights.cols() != 1) throw ShapeError("weighted_pool: expected one weight per point");
  const std::size_t c = features.cols(), m = part.superpoints();
  Tensor y = Tensor::matrix(m, c);
  const Tensor& f = features.value();
  const Tensor& w = weights.value();
  for (std::size_t s = 0; s < m; ++s)
    for (int p : part.members(s)) {
      const auto i = static_cast<std::size_t>(p);
      for (std::size_t j = 0; j < c; ++j) y(s, j) += w.data[i] * f(i, j);
    }
  return features.graph().record(std::move(y), {features, weights},
                                 [features, weights, part, c](Graph& g, const Tensor& gy) {
                                   const Tensor& f = features.value();
                                   const Tensor& w = weights.value();
                                   Tensor* gf = features.requires_grad() ? &g.grad_buffer(features) : nullptr;
                                   Tensor* gw = weights.requires_grad() ? &g.grad_buffer(weights) : nullptr;
                                   for (std::size_t s = 0; s < part.superpoints(); ++s)
                                     for (int p : part.members(s)) {
                                       const auto i = static_cast<std::size_t>(p);
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < c; ++j) {
                                         if (gf) (*gf)(i, j) += w.data[i] * gy(s, j);
                                         dot += f(i, j) * gy(s, j);
                                       }
                                       if (gw) gw->data[i] += dot;
                                     }
                                 });
}

void init_asam(ParamStore& store, const std::string& prefix, std::size_t width, Rng& rng) {
  init_mlp(store, prefix + ".max_branch", {width, width, 1}, rng);
  init_mlp(store, prefix + ".mean_branch", {width, width, 1}, rng);
  init_linear(store, prefix + ".fuse", 2 * width, width, rng);
}

AsamParams bind_asam(const BoundParams& p, const std::string& prefix) {
  return {bind_mlp(p, prefix + ".max_branch", 2), bind_mlp(p, prefix + ".mean_branch", 2),
          bind_linear(p, prefix + ".fuse")};
}

AsamOutput asam_forward(const Var& features, const SuperpointPartition& part, const AsamParams& p) {
  require_points(features, part, "asam_forward");
  const Var f_max = scatter_pool(features, part, PoolMode::kMax);
  const Var f_mean = scatter_pool(features, part, PoolMode::kMean);
  const Var w_max = superpoint_softmax(p.max_branch(broadcast(f_max, part) - features), part);
  const Var w_mean = superpoint_softmax(p.mean_branch(broadcast(f_mean, part) - features), part);
  const Var pooled_max = weighted_pool(features, w_max, part);
  const Var pooled_mean = weighted_pool(features, w_mean, part);
  return {p.fuse(concat_cols(pooled_max, pooled_mean)), w_max, w_mean};
}

}  // namespace r3d
