#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "r3d/params.hpp"
#include "r3d/tensor.hpp"

namespace r3d::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) return INFINITY;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data[i] - b.data[i]));
  return d;
}

// Plain-loop references for composing layer oracles.
inline Tensor oracle_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = Tensor::matrix(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t o = 0; o < w.cols(); ++o) {
      double acc = b.data[o];
      for (std::size_t k = 0; k < x.cols(); ++k) acc += x(i, k) * w(k, o);
      y(i, o) = acc;
    }
  return y;
}

inline Tensor oracle_layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  Tensor y = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t e = 0; e < c; ++e) mean += x(i, e);
    mean /= static_cast<double>(c);
    for (std::size_t e = 0; e < c; ++e) var += (x(i, e) - mean) * (x(i, e) - mean);
    var /= static_cast<double>(c);
    for (std::size_t e = 0; e < c; ++e) y(i, e) = (x(i, e) - mean) / std::sqrt(var + 1e-5) * gain.data[e] + bias.data[e];
  }
  return y;
}

// Multi-head softmax(q k^T / sqrt(d)) v over [n x C] / [m x C] inputs.
inline Tensor oracle_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t n = q.rows(), m = k.rows(), c = q.cols(), dh = c / heads;
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(m);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < dh; ++e) dot += q(i, h * dh + e) * k(j, h * dh + e);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t e = 0; e < dh; ++e) out(i, h * dh + e) += s[j] / z * v(j, h * dh + e);
    }
  return out;
}

inline Tensor oracle_add(Tensor a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
  return a;
}

}  // namespace r3d::testing
