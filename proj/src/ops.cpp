#include "r3d/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "r3d/kernels.hpp"

namespace r3d {
namespace {

using kernels::GemmArgs;
using kernels::Trans;

void same_shape(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_matrix(const Var& v, const char* what) { r3d::require_matrix(v.value(), what); }

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Elementwise unary op with derivative computed from (input, output).
template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = f(xv.data[i]);
  return x.graph().record(std::move(y), {x}, [x, dfdx](Graph& g, const Tensor& gy) {
    if (!x.requires_grad()) return;
    const Tensor& xv = x.value();
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx.data[i] += gy.data[i] * dfdx(xv.data[i]);
  });
}

}  // namespace

// ------------------------------------------------------------- matmuls

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor y = Tensor::matrix(n, m);
  kernels::gemm({a.value().data.data(), b.value().data.data(), y.data.data(), n, k, m});
  return a.graph().record(std::move(y), {a, b}, [a, b, n, k, m](Graph& g, const Tensor& gy) {
    if (a.requires_grad()) {
      kernels::gemm({gy.data.data(), b.value().data.data(), g.grad_buffer(a).data.data(), n,
                     m, k, Trans::kNo, Trans::kYes, true});
    }
    if (b.requires_grad()) {
      kernels::gemm({a.value().data.data(), gy.data.data(), g.grad_buffer(b).data.data(), k,
                     n, m, Trans::kYes, Trans::kNo, true});
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) +
                     "^T");
  }
  Tensor y = Tensor::matrix(n, m);
  kernels::gemm({a.value().data.data(), b.value().data.data(), y.data.data(), n, k, m,
                 Trans::kNo, Trans::kYes});
  return a.graph().record(std::move(y), {a, b}, [a, b, n, k, m](Graph& g, const Tensor& gy) {
    if (a.requires_grad()) {
      kernels::gemm({gy.data.data(), b.value().data.data(), g.grad_buffer(a).data.data(), n,
                     m, k, Trans::kNo, Trans::kNo, true});
    }
    if (b.requires_grad()) {
      kernels::gemm({gy.data.data(), a.value().data.data(), g.grad_buffer(b).data.data(), m,
                     n, k, Trans::kYes, Trans::kNo, true});
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const std::size_t n = x.rows(), cin = x.cols(), cout = weight.cols();
  if (weight.rows() != cin || bias.value().size() != cout) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  Tensor y = Tensor::matrix(n, cout);
  const auto& bv = bias.value().data;
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), y.data.begin() + i * cout);
  kernels::gemm({x.value().data.data(), weight.value().data.data(), y.data.data(), n, cin, cout,
                 Trans::kNo, Trans::kNo, true});
  return x.graph().record(
      std::move(y), {x, weight, bias}, [x, weight, bias, n, cin, cout](Graph& g, const Tensor& gy) {
        if (x.requires_grad()) {
          kernels::gemm({gy.data.data(), weight.value().data.data(),
                         g.grad_buffer(x).data.data(), n, cout, cin, Trans::kNo, Trans::kYes,
                         true});
        }
        if (weight.requires_grad()) {
          kernels::gemm({x.value().data.data(), gy.data.data(),
                         g.grad_buffer(weight).data.data(), cin, n, cout, Trans::kYes,
                         Trans::kNo, true});
        }
        if (bias.requires_grad()) {
          Tensor& gb = g.grad_buffer(bias);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < cout; ++j) gb.data[j] += gy.data[i * cout + j];
        }
      });
}

// ---------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i];
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& gy) {
    g.accumulate(a, gy);
    g.accumulate(b, gy);
  });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= b.value().data[i];
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& gy) {
    g.accumulate(a, gy);
    if (b.requires_grad()) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] -= gy.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b.value().data[i];
  return a.graph().record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& gy) {
    if (a.requires_grad()) {
      Tensor& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * b.value().data[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] += gy.data[i] * a.value().data[i];
    }
  });
}

Var scale(const Var& x, double s) { return affine(x, s, 0.0); }

Var affine(const Var& x, double a, double b) {
  Tensor y = x.value();
  for (double& v : y.data) v = a * v + b;
  return x.graph().record(std::move(y), {x}, [x, a](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += a * gy.data[i];
  });
}

Var add_row(const Var& x, const Var& row) {
  require_matrix(x, "add_row");
  const std::size_t n = x.rows(), c = x.cols();
  if (row.value().size() != c) {
    throw ShapeError("add_row: row " + shape_str(row.shape()) + " vs " + shape_str(x.shape()));
  }
  Tensor y = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y.data[i * c + j] += row.value().data[j];
  return x.graph().record(std::move(y), {x, row}, [x, row, n, c](Graph& g, const Tensor& gy) {
    g.accumulate(x, gy);
    if (row.requires_grad()) {
      Tensor& gr = g.grad_buffer(row);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gr.data[j] += gy.data[i * c + j];
    }
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(x, sigmoid_scalar, [](double v) {
    const double s = sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

Var softmax_rows(const Var& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor y = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    auto r = y.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : r) v /= total;
  }
  auto out = std::make_shared<Tensor>(y);
  return x.graph().record(std::move(y), {x}, [x, out, n, m](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += gy(i, j) * (*out)(i, j);
      for (std::size_t j = 0; j < m; ++j) gx(i, j) += (*out)(i, j) * (gy(i, j) - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), c = x.cols();
  if (gain.value().size() != c || bias.value().size() != c) {
    throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(c));
  }
  auto xhat = std::make_shared<Tensor>(Tensor::matrix(n, c));
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor y = Tensor::matrix(n, c);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(c);
    (*inv_std)[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      (*xhat)(i, j) = (xv(i, j) - mean) * (*inv_std)[i];
      y(i, j) = (*xhat)(i, j) * gain.value().data[j] + bias.value().data[j];
    }
  }
  return x.graph().record(
      std::move(y), {x, gain, bias}, [x, gain, bias, xhat, inv_std, n, c](Graph& g, const Tensor& gy) {
        if (gain.requires_grad()) {
          Tensor& gg = g.grad_buffer(gain);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gg.data[j] += gy(i, j) * (*xhat)(i, j);
        }
        if (bias.requires_grad()) {
          Tensor& gb = g.grad_buffer(bias);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb.data[j] += gy(i, j);
        }
        if (!x.requires_grad()) return;
        Tensor& gx = g.grad_buffer(x);
        std::vector<double> gh(c);
        for (std::size_t i = 0; i < n; ++i) {
          double mean_gh = 0.0, mean_ghx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            gh[j] = gy(i, j) * gain.value().data[j];
            mean_gh += gh[j];
            mean_ghx += gh[j] * (*xhat)(i, j);
          }
          mean_gh /= static_cast<double>(c);
          mean_ghx /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j)
            gx(i, j) += (*inv_std)[i] * (gh[j] - mean_gh - (*xhat)(i, j) * mean_ghx);
        }
      });
}

// ---------------------------------------------------------- structural

Var concat_cols(const Var& a, const Var& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor y = Tensor::matrix(n, ca + cb);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data.begin() + i * ca, ca, y.data.begin() + i * (ca + cb));
    std::copy_n(b.value().data.begin() + i * cb, cb, y.data.begin() + i * (ca + cb) + ca);
  }
  return a.graph().record(std::move(y), {a, b}, [a, b, n, ca, cb](Graph& g, const Tensor& gy) {
    if (a.requires_grad()) {
      Tensor& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga(i, j) += gy.data[i * (ca + cb) + j];
    }
    if (b.requires_grad()) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb(i, j) += gy.data[i * (ca + cb) + ca + j];
    }
  });
}

Var gather_rows(const Var& x, std::span<const int> index) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<int> idx(index.begin(), index.end());
  Tensor y = Tensor::matrix(idx.size(), c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range " +
                       std::to_string(n));
    }
    std::copy_n(x.value().data.begin() + idx[i] * c, c, y.data.begin() + i * c);
  }
  return x.graph().record(std::move(y), {x}, [x, idx, c](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx.data[idx[i] * c + j] += gy.data[i * c + j];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y(std::move(shape), x.value().data);
  return x.graph().record(std::move(y), {x}, [x](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += gy.data[i];
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return x.graph().record(Tensor::scalar(s), {x}, [x](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (double& v : gx.data) v += gy.data[0];
  });
}

Var mean_all(const Var& x) {
  const double count = static_cast<double>(std::max<std::size_t>(x.value().size(), 1));
  return scale(sum_all(x), 1.0 / count);
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw ShapeError("weighted_sum: need matching, nonempty terms and weights");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].value().item();
  std::vector<Var> parents(terms.begin(), terms.end());
  std::vector<double> w(weights.begin(), weights.end());
  return terms[0].graph().record(Tensor::scalar(s), parents,
                                 [parents, w](Graph& g, const Tensor& gy) {
                                   for (std::size_t i = 0; i < parents.size(); ++i) {
                                     if (!parents[i].requires_grad()) continue;
                                     g.grad_buffer(parents[i]).data[0] += w[i] * gy.data[0];
                                   }
                                 });
}

Var row_l2_normalize(const Var& x, double eps, std::size_t* zero_rows) {
  require_matrix(x, "row_l2_normalize");
  const std::size_t n = x.rows(), c = x.cols();
  auto norms = std::make_shared<std::vector<double>>(n);
  Tensor y = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += y(i, j) * y(i, j);
    double nrm = std::sqrt(s);
    if (nrm <= eps) {
      nrm = eps;
      (*norms)[i] = -eps;  // negative marks the guarded branch for backward
      if (zero_rows) ++*zero_rows;
    } else {
      (*norms)[i] = nrm;
    }
    for (std::size_t j = 0; j < c; ++j) y(i, j) /= nrm;
  }
  auto out = std::make_shared<Tensor>(y);
  return x.graph().record(std::move(y), {x}, [x, norms, out, n, c](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) {
      const double nrm = (*norms)[i];
      if (nrm < 0) {
        for (std::size_t j = 0; j < c; ++j) gx(i, j) += gy(i, j) / -nrm;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gy(i, j) * (*out)(i, j);
      for (std::size_t j = 0; j < c; ++j) gx(i, j) += (gy(i, j) - (*out)(i, j) * dot) / nrm;
    }
  });
}

Var clamp_cols(const Var& x, std::span<const double> lo, std::span<const double> hi) {
  require_matrix(x, "clamp_cols");
  const std::size_t n = x.rows(), c = x.cols();
  if (lo.size() != c || hi.size() != c) throw ShapeError("clamp_cols: bounds width mismatch");
  std::vector<double> l(lo.begin(), lo.end()), h(hi.begin(), hi.end());
  Tensor y = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) = std::clamp(y(i, j), l[j], h[j]);
  return x.graph().record(std::move(y), {x}, [x, l, h, n, c](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (xv(i, j) >= l[j] && xv(i, j) <= h[j]) gx(i, j) += gy(i, j);
  });
}

Tensor sincos_encode(const Tensor& v, std::size_t d, double base) {
  if (d == 0 || d % 2 != 0) {
    throw ConfigError("sincos_encode: channel count must be even and positive, got " +
                      std::to_string(d));
  }
  if (!(base > 1.0)) throw ConfigError("sincos_encode: base must exceed 1");
  Shape shape = v.shape.empty() ? Shape{1} : v.shape;
  shape.back() *= d;
  Tensor y(shape);
  const std::size_t half = d / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t j = 0; j < half; ++j)
    inv_freq[j] = 1.0 / std::pow(base, static_cast<double>(2 * j) / static_cast<double>(d));
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      const double a = v.data[i] * inv_freq[j];
      y.data[i * d + 2 * j] = std::sin(a);
      y.data[i * d + 2 * j + 1] = std::cos(a);
    }
  }
  return y;
}

Var sincos_encode(const Var& v, std::size_t d, double base) {
  Tensor y = sincos_encode(v.value(), d, base);
  return v.graph().record(std::move(y), {v}, [v, d, base](Graph& g, const Tensor& gy) {
    Tensor& gv = g.grad_buffer(v);
    const std::size_t half = d / 2;
    for (std::size_t i = 0; i < gv.size(); ++i) {
      for (std::size_t j = 0; j < half; ++j) {
        const double f =
            1.0 / std::pow(base, static_cast<double>(2 * j) / static_cast<double>(d));
        const double a = v.value().data[i] * f;
        gv.data[i] += f * (gy.data[i * d + 2 * j] * std::cos(a) -
                           gy.data[i * d + 2 * j + 1] * std::sin(a));
      }
    }
  });
}

Var split_heads(const Var& x, std::size_t heads) {
  require_matrix(x, "split_heads");
  const std::size_t n = x.rows(), width = x.cols();
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("split_heads: " + std::to_string(heads) + " heads do not divide width " +
                     std::to_string(width));
  }
  const std::size_t c = width / heads;
  Tensor y(Shape{heads, n, c});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < c; ++t)
        y.data[(h * n + i) * c + t] = x.value().data[i * width + h * c + t];
  return x.graph().record(std::move(y), {x}, [x, heads, n, c, width](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < c; ++t)
          gx.data[i * width + h * c + t] += gy.data[(h * n + i) * c + t];
  });
}

Var merge_heads(const Var& x) {
  if (x.value().rank() != 3) throw ShapeError("merge_heads: expected [h x n x c]");
  const std::size_t heads = x.shape()[0], n = x.shape()[1], c = x.shape()[2];
  const std::size_t width = heads * c;
  Tensor y = Tensor::matrix(n, width);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < c; ++t)
        y.data[i * width + h * c + t] = x.value().data[(h * n + i) * c + t];
  return x.graph().record(std::move(y), {x}, [x, heads, n, c, width](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < c; ++t)
          gx.data[(h * n + i) * c + t] += gy.data[i * width + h * c + t];
  });
}

Var channels_first(const Var& x) {
  if (x.value().rank() != 3) throw ShapeError("channels_first: expected [a x b x h]");
  const std::size_t a = x.shape()[0], b = x.shape()[1], h = x.shape()[2];
  Tensor y(Shape{h, a, b});
  for (std::size_t i = 0; i < a * b; ++i)
    for (std::size_t t = 0; t < h; ++t) y.data[t * a * b + i] = x.value().data[i * h + t];
  return x.graph().record(std::move(y), {x}, [x, a, b, h](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < a * b; ++i)
      for (std::size_t t = 0; t < h; ++t) gx.data[i * h + t] += gy.data[t * a * b + i];
  });
}

// ------------------------------------------------------------ attention

Var attention_core(const Var& q, const Var& k, const Var& v, const Var* bias,
                   const std::vector<std::uint8_t>* allowed, Tensor* probs) {
  if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3) {
    throw ShapeError("attention_core: q, k, v must be [heads x rows x channels]");
  }
  const std::size_t heads = q.shape()[0], n = q.shape()[1], c = q.shape()[2];
  const std::size_t m = k.shape()[1];
  if (k.shape() != Shape{heads, m, c} || v.shape() != Shape{heads, m, c}) {
    throw ShapeError("attention_core: q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  if (bias && bias->shape() != Shape{heads, n, m}) {
    throw ShapeError("attention_core: bias " + shape_str(bias->shape()) + ", expected " +
                     shape_str(Shape{heads, n, m}));
  }
  if (allowed && allowed->size() != n * m) {
    throw ShapeError("attention_core: mask size " + std::to_string(allowed->size()) +
                     ", expected " + std::to_string(n * m));
  }
  if (m == 0) throw ShapeError("attention_core: no keys");

  Tensor out(Shape{heads, n, c});
  auto p = std::make_shared<Tensor>(Shape{heads, n, m});
  kernels::attention({q.value().data.data(), k.value().data.data(), v.value().data.data(),
                      bias ? bias->value().data.data() : nullptr,
                      allowed ? allowed->data() : nullptr, heads, n, m, c, out.data.data(),
                      p->data.data()});
  if (probs) *probs = *p;

  std::vector<Var> parents{q, k, v};
  Var b;
  if (bias) {
    b = *bias;
    parents.push_back(b);
  }
  return q.graph().record(std::move(out), parents, [q, k, v, b, p, heads, n, m, c](
                                                       Graph& g, const Tensor& gy) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    const auto& qv = q.value().data;
    const auto& kv = k.value().data;
    const auto& vv = v.value().data;
    double* gq = q.requires_grad() ? g.grad_buffer(q).data.data() : nullptr;
    double* gk = k.requires_grad() ? g.grad_buffer(k).data.data() : nullptr;
    double* gv = v.requires_grad() ? g.grad_buffer(v).data.data() : nullptr;
    double* gb = (b.valid() && b.requires_grad()) ? g.grad_buffer(b).data.data() : nullptr;
    std::vector<double> ds(m);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* go = gy.data.data() + (h * n + i) * c;
        const double* prow = p->data.data() + (h * n + i) * m;
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double* vj = vv.data() + (h * m + j) * c;
          double dp = 0.0;
          for (std::size_t t = 0; t < c; ++t) dp += go[t] * vj[t];
          ds[j] = dp;
          dot += prow[j] * dp;
          if (gv && prow[j] != 0.0) {
            double* gvj = gv + (h * m + j) * c;
            for (std::size_t t = 0; t < c; ++t) gvj[t] += prow[j] * go[t];
          }
        }
        for (std::size_t j = 0; j < m; ++j) ds[j] = prow[j] * (ds[j] - dot);
        if (gb)
          for (std::size_t j = 0; j < m; ++j) gb[(h * n + i) * m + j] += ds[j];
        const double* qi = qv.data() + (h * n + i) * c;
        for (std::size_t j = 0; j < m; ++j) {
          if (ds[j] == 0.0) continue;
          const double* kj = kv.data() + (h * m + j) * c;
          const double w = ds[j] * scale;
          if (gq) {
            double* gqi = gq + (h * n + i) * c;
            for (std::size_t t = 0; t < c; ++t) gqi[t] += w * kj[t];
          }
          if (gk) {
            double* gkj = gk + (h * m + j) * c;
            for (std::size_t t = 0; t < c; ++t) gkj[t] += w * qi[t];
          }
        }
      }
    }
  });
}

// --------------------------------------------------------------- losses

Var cross_entropy_rows(const Var& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy_rows");
  const std::size_t n = logits.rows(), k = logits.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy_rows: target count mismatch");
  std::vector<int> tgt(targets.begin(), targets.end());
  auto prob = std::make_shared<Tensor>(Tensor::matrix(n, k));
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= k) {
      throw ShapeError("cross_entropy_rows: target " + std::to_string(tgt[i]) +
                       " out of range");
    }
    auto r = logits.value().row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(r[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < k; ++j) (*prob)(i, j) = std::exp(r[j] - lse);
    loss += lse - r[tgt[i]];
  }
  loss /= static_cast<double>(std::max<std::size_t>(n, 1));
  return logits.graph().record(Tensor::scalar(loss), {logits},
                               [logits, prob, tgt, n, k](Graph& g, const Tensor& gy) {
                                 Tensor& gl = g.grad_buffer(logits);
                                 const double w = gy.data[0] / static_cast<double>(n);
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < k; ++j)
                                     gl(i, j) += w * ((*prob)(i, j) -
                                                      (static_cast<int>(j) == tgt[i] ? 1.0 : 0.0));
                               });
}

Var bce_with_logits_mean(const Var& logits, const Tensor& target) {
  if (logits.value().size() != target.size()) {
    throw ShapeError("bce_with_logits_mean: " + shape_str(logits.shape()) + " vs " +
                     shape_str(target.shape));
  }
  const std::size_t count = target.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double x = logits.value().data[i];
    loss += std::max(x, 0.0) - x * target.data[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(std::max<std::size_t>(count, 1));
  return logits.graph().record(Tensor::scalar(loss), {logits},
                               [logits, target, count](Graph& g, const Tensor& gy) {
                                 Tensor& gl = g.grad_buffer(logits);
                                 const double w = gy.data[0] / static_cast<double>(count);
                                 for (std::size_t i = 0; i < count; ++i)
                                   gl.data[i] +=
                                       w * (sigmoid_scalar(logits.value().data[i]) - target.data[i]);
                               });
}

Var bce_prob_mean(const Var& prob, const Tensor& target, double eps) {
  if (prob.value().size() != target.size()) {
    throw ShapeError("bce_prob_mean: " + shape_str(prob.shape()) + " vs " +
                     shape_str(target.shape));
  }
  const std::size_t count = target.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double p = std::clamp(prob.value().data[i], eps, 1.0 - eps);
    const double t = target.data[i];
    loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  loss /= static_cast<double>(std::max<std::size_t>(count, 1));
  return prob.graph().record(Tensor::scalar(loss), {prob},
                             [prob, target, count, eps](Graph& g, const Tensor& gy) {
                               Tensor& gp = g.grad_buffer(prob);
                               const double w = gy.data[0] / static_cast<double>(count);
                               for (std::size_t i = 0; i < count; ++i) {
                                 const double p = prob.value().data[i];
                                 if (p < eps || p > 1.0 - eps) continue;
                                 const double t = target.data[i];
                                 gp.data[i] += w * (-t / p + (1.0 - t) / (1.0 - p));
                               }
                             });
}

Var dice_loss_rows(const Var& prob, const Tensor& target) {
  require_matrix(prob, "dice_loss_rows");
  if (prob.value().size() != target.size()) {
    throw ShapeError("dice_loss_rows: " + shape_str(prob.shape()) + " vs " +
                     shape_str(target.shape));
  }
  const std::size_t n = prob.rows(), m = prob.cols();
  auto num = std::make_shared<std::vector<double>>(n);
  auto den = std::make_shared<std::vector<double>>(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double pg = 0.0, ps = 0.0, gs = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double p = prob.value().data[i * m + j];
      const double t = target.data[i * m + j];
      pg += p * t;
      ps += p;
      gs += t;
    }
    (*num)[i] = 2.0 * pg + 1.0;
    (*den)[i] = ps + gs + 1.0;
    loss += 1.0 - (*num)[i] / (*den)[i];
  }
  loss /= static_cast<double>(std::max<std::size_t>(n, 1));
  return prob.graph().record(Tensor::scalar(loss), {prob},
                             [prob, target, num, den, n, m](Graph& g, const Tensor& gy) {
                               Tensor& gp = g.grad_buffer(prob);
                               const double w = gy.data[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double d2 = (*den)[i] * (*den)[i];
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const double t = target.data[i * m + j];
                                   gp.data[i * m + j] -=
                                       w * (2.0 * t * (*den)[i] - (*num)[i]) / d2;
                                 }
                               }
                             });
}

Var l1_rows(const Var& x, const Tensor& target) {
  require_matrix(x, "l1_rows");
  if (x.value().size() != target.size()) {
    throw ShapeError("l1_rows: " + shape_str(x.shape()) + " vs " + shape_str(target.shape));
  }
  const std::size_t n = x.rows();
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) loss += std::abs(x.value().data[i] - target.data[i]);
  loss /= static_cast<double>(std::max<std::size_t>(n, 1));
  return x.graph().record(Tensor::scalar(loss), {x}, [x, target, n](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    const double w = gy.data[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double d = x.value().data[i] - target.data[i];
      gx.data[i] += w * static_cast<double>((d > 0) - (d < 0));
    }
  });
}

Var mse_mean(const Var& x, const Tensor& target) {
  if (x.value().size() != target.size()) {
    throw ShapeError("mse_mean: " + shape_str(x.shape()) + " vs " + shape_str(target.shape));
  }
  const std::size_t count = target.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = x.value().data[i] - target.data[i];
    loss += d * d;
  }
  loss /= static_cast<double>(std::max<std::size_t>(count, 1));
  return x.graph().record(Tensor::scalar(loss), {x}, [x, target, count](Graph& g, const Tensor& gy) {
    Tensor& gx = g.grad_buffer(x);
    const double w = 2.0 * gy.data[0] / static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) gx.data[i] += w * (x.value().data[i] - target.data[i]);
  });
}

}  // namespace r3d
