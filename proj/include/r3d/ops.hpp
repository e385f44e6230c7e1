#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "r3d/graph.hpp"

// Differentiable operations on Graph variables. Every op checks shapes,
// computes its value eagerly and records a backward rule when any input
// requires a gradient. Matrices are row-major [rows x cols]; bias vectors
// have shape [cols].

namespace r3d {

Var matmul(const Var& a, const Var& b);     // [n x k] * [k x m]
Var matmul_nt(const Var& a, const Var& b);  // [n x k] * [m x k]^T
Var linear(const Var& x, const Var& weight, const Var& bias);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var affine(const Var& x, double a, double b);  // a * x + b
Var add_row(const Var& x, const Var& row);     // x[i, :] + row

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var concat_cols(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::span<const int> index);
Var reshape(const Var& x, Shape shape);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
// Sum of scalars with fixed coefficients.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

// Rows divided by max(||row||, eps). zero_rows, when given, is incremented
// once per row that hit the guard.
Var row_l2_normalize(const Var& x, double eps = 1e-12, std::size_t* zero_rows = nullptr);

// Clamps each column j of an [n x c] matrix into [lo[j], hi[j]]; gradient
// passes only where the input lies inside the closed interval.
Var clamp_cols(const Var& x, std::span<const double> lo, std::span<const double> hi);

// Sine-cosine lifting: every scalar v becomes d values, the pairs
// (sin(v / base^(2j/d)), cos(v / base^(2j/d))) for j in [0, d/2), laid out
// per input channel. Output shape is input shape with the last extent
// multiplied by d.
Tensor sincos_encode(const Tensor& v, std::size_t d, double base = 10000.0);
Var sincos_encode(const Var& v, std::size_t d, double base = 10000.0);

// [n x h*c] <-> [h x n x c]; head t owns columns [t*c, (t+1)*c).
Var split_heads(const Var& x, std::size_t heads);
Var merge_heads(const Var& x);
// [a x b x h] -> [h x a x b]
Var channels_first(const Var& x);

// softmax(q k^T / sqrt(c) + bias) v per head. q is [h x n x c], k and v are
// [h x m x c], bias [h x n x m]. allowed is an n x m 0/1 mask shared by all
// heads; a row with nothing allowed attends everywhere. probs, when given,
// receives the attention weights.
Var attention_core(const Var& q, const Var& k, const Var& v, const Var* bias = nullptr,
                   const std::vector<std::uint8_t>* allowed = nullptr, Tensor* probs = nullptr);

// Mean over rows of -log softmax(logits)[target].
Var cross_entropy_rows(const Var& logits, std::span<const int> targets);
// Mean over all entries of binary cross-entropy on logits.
Var bce_with_logits_mean(const Var& logits, const Tensor& target);
// Mean over all entries of binary cross-entropy on probabilities clamped to
// [eps, 1 - eps].
Var bce_prob_mean(const Var& prob, const Tensor& target, double eps = 1e-7);
// Mean over rows of 1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1).
Var dice_loss_rows(const Var& prob, const Tensor& target);
// Mean over rows of sum_j |x - t|.
Var l1_rows(const Var& x, const Tensor& target);
Var mse_mean(const Var& x, const Tensor& target);

}  // namespace r3d
