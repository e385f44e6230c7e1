#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Hot loops of the decoder. Every kernel exists twice: a plain serial loop
// kept as the reference, and an OpenMP version that splits work over
// independent output rows/segments. Each output element is produced by a
// single thread in a fixed order, so both variants are bit-identical and
// results never depend on the thread count.
//
// The unqualified entry points dispatch to the parallel variant when the
// library was built with OpenMP.

namespace r3d::kernels {

enum class Trans : std::uint8_t { kNo, kYes };

// C[n x m] (+)= op(A)[n x k] * op(B)[k x m]. With Trans::kYes, A is stored
// k x n and B is stored m x k.
struct GemmArgs {
  const double* a;
  const double* b;
  double* c;
  std::size_t n, k, m;
  Trans trans_a = Trans::kNo;
  Trans trans_b = Trans::kNo;
  bool accumulate = false;
};

// Segment layout in CSR form: members[offsets[s] .. offsets[s+1]) are the
// points of segment s, ascending.
struct Segments {
  std::span<const int> point_to_segment;
  std::span<const int> offsets;
  std::span<const int> members;
  std::size_t count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

// Attention over h heads: q is h x n x c, k and v are h x m x c, bias is
// h x n x m (nullable), allowed is n x m (nullable, nonzero = may attend).
// Rows whose allowed set is empty attend everywhere. probs receives the
// h x n x m softmax weights.
struct AttentionArgs {
  const double* q;
  const double* k;
  const double* v;
  const double* bias = nullptr;
  const std::uint8_t* allowed = nullptr;
  std::size_t heads, n, m, c;
  double* out;
  double* probs;
};

namespace serial {
void gemm(const GemmArgs& args);
void scatter_max(const double* f, std::size_t channels, const Segments& seg, double* out,
                 int* argmax);
void scatter_mean(const double* f, std::size_t channels, const Segments& seg, double* out);
void segment_softmax(const double* scores, const Segments& seg, double* out);
void attention(const AttentionArgs& args);
}  // namespace serial

namespace parallel {
void gemm(const GemmArgs& args);
void scatter_max(const double* f, std::size_t channels, const Segments& seg, double* out,
                 int* argmax);
void scatter_mean(const double* f, std::size_t channels, const Segments& seg, double* out);
void segment_softmax(const double* scores, const Segments& seg, double* out);
void attention(const AttentionArgs& args);
}  // namespace parallel

void gemm(const GemmArgs& args);
void scatter_max(const double* f, std::size_t channels, const Segments& seg, double* out,
                 int* argmax);
void scatter_mean(const double* f, std::size_t channels, const Segments& seg, double* out);
void segment_softmax(const double* scores, const Segments& seg, double* out);
void attention(const AttentionArgs& args);

// Number of threads the parallel variants may use (1 without OpenMP).
int max_threads();

}  // namespace r3d::kernels
