#include "r3d/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef R3D_HAVE_OPENMP
#include <omp.h>
#endif

namespace r3d::kernels {
namespace {

inline double a_at(const GemmArgs& g, std::size_t i, std::size_t p) {
  return g.trans_a == Trans::kNo ? g.a[i * g.k + p] : g.a[p * g.n + i];
}

// One output row of C. Shared by both gemm variants so their summation
// order matches exactly.
void gemm_row(const GemmArgs& g, std::size_t i) {
  double* crow = g.c + i * g.m;
  if (!g.accumulate) std::fill(crow, crow + g.m, 0.0);
  if (g.trans_b == Trans::kNo) {
    for (std::size_t p = 0; p < g.k; ++p) {
      const double a = a_at(g, i, p);
      const double* brow = g.b + p * g.m;
      for (std::size_t j = 0; j < g.m; ++j) crow[j] += a * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < g.m; ++j) {
      const double* brow = g.b + j * g.k;
      double s = 0.0;
      for (std::size_t p = 0; p < g.k; ++p) s += a_at(g, i, p) * brow[p];
      crow[j] += s;
    }
  }
}

// Softmax and weighted value sum for one (head, query row).
void attention_row(const AttentionArgs& a, std::size_t h, std::size_t i, double* scores) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(a.c));
  const double* qi = a.q + (h * a.n + i) * a.c;
  const double* kh = a.k + h * a.m * a.c;
  const double* vh = a.v + h * a.m * a.c;
  const std::uint8_t* allow = a.allowed ? a.allowed + i * a.m : nullptr;
  bool any_allowed = allow == nullptr;
  if (allow)
    for (std::size_t j = 0; j < a.m && !any_allowed; ++j) any_allowed = allow[j] != 0;
  const bool masked = allow != nullptr && any_allowed;

  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < a.m; ++j) {
    if (masked && !allow[j]) continue;
    const double* kj = kh + j * a.c;
    double s = 0.0;
    for (std::size_t t = 0; t < a.c; ++t) s += qi[t] * kj[t];
    s *= scale;
    if (a.bias) s += a.bias[(h * a.n + i) * a.m + j];
    scores[j] = s;
    mx = std::max(mx, s);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < a.m; ++j) {
    if (masked && !allow[j]) {
      scores[j] = 0.0;
      continue;
    }
    scores[j] = std::exp(scores[j] - mx);
    total += scores[j];
  }
  double* prow = a.probs + (h * a.n + i) * a.m;
  double* orow = a.out + (h * a.n + i) * a.c;
  std::fill(orow, orow + a.c, 0.0);
  for (std::size_t j = 0; j < a.m; ++j) {
    const double p = scores[j] / total;
    prow[j] = p;
    if (p == 0.0) continue;
    const double* vj = vh + j * a.c;
    for (std::size_t t = 0; t < a.c; ++t) orow[t] += p * vj[t];
  }
}

void segment_max_one(const double* f, std::size_t channels, const Segments& seg,
                     std::size_t s, double* out, int* argmax) {
  double* o = out + s * channels;
  int* am = argmax + s * channels;
  std::fill(o, o + channels, -std::numeric_limits<double>::infinity());
  std::fill(am, am + channels, -1);
  for (int idx = seg.offsets[s]; idx < seg.offsets[s + 1]; ++idx) {
    const int p = seg.members[idx];
    const double* row = f + static_cast<std::size_t>(p) * channels;
    for (std::size_t c = 0; c < channels; ++c) {
      if (row[c] > o[c]) {
        o[c] = row[c];
        am[c] = p;
      }
    }
  }
}

void segment_mean_one(const double* f, std::size_t channels, const Segments& seg,
                      std::size_t s, double* out) {
  double* o = out + s * channels;
  std::fill(o, o + channels, 0.0);
  const int begin = seg.offsets[s];
  const int end = seg.offsets[s + 1];
  for (int idx = begin; idx < end; ++idx) {
    const double* row = f + static_cast<std::size_t>(seg.members[idx]) * channels;
    for (std::size_t c = 0; c < channels; ++c) o[c] += row[c];
  }
  const double count = static_cast<double>(end - begin);
  for (std::size_t c = 0; c < channels; ++c) o[c] /= count;
}

void segment_softmax_one(const double* scores, const Segments& seg, std::size_t s,
                         double* out) {
  const int begin = seg.offsets[s];
  const int end = seg.offsets[s + 1];
  double mx = -std::numeric_limits<double>::infinity();
  for (int idx = begin; idx < end; ++idx) mx = std::max(mx, scores[seg.members[idx]]);
  double total = 0.0;
  for (int idx = begin; idx < end; ++idx) {
    const int p = seg.members[idx];
    out[p] = std::exp(scores[p] - mx);
    total += out[p];
  }
  for (int idx = begin; idx < end; ++idx) out[seg.members[idx]] /= total;
}

}  // namespace

// ---------------------------------------------------------------- serial

namespace serial {

void gemm(const GemmArgs& args) {
  for (std::size_t i = 0; i < args.n; ++i) gemm_row(args, i);
}

void scatter_max(const double* f, std::size_t channels, const Segments& seg, double* out,
                 int* argmax) {
  const std::size_t m = seg.count();
  std::fill(out, out + m * channels, -std::numeric_limits<double>::infinity());
  std::fill(argmax, argmax + m * channels, -1);
  for (std::size_t p = 0; p < seg.point_to_segment.size(); ++p) {
    const std::size_t s = static_cast<std::size_t>(seg.point_to_segment[p]);
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = f[p * channels + c];
      if (v > out[s * channels + c]) {
        out[s * channels + c] = v;
        argmax[s * channels + c] = static_cast<int>(p);
      }
    }
  }
}

void scatter_mean(const double* f, std::size_t channels, const Segments& seg, double* out) {
  const std::size_t m = seg.count();
  std::fill(out, out + m * channels, 0.0);
  std::vector<double> counts(m, 0.0);
  for (std::size_t p = 0; p < seg.point_to_segment.size(); ++p) {
    const std::size_t s = static_cast<std::size_t>(seg.point_to_segment[p]);
    counts[s] += 1.0;
    for (std::size_t c = 0; c < channels; ++c) out[s * channels + c] += f[p * channels + c];
  }
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t c = 0; c < channels; ++c) out[s * channels + c] /= counts[s];
}

void segment_softmax(const double* scores, const Segments& seg, double* out) {
  const std::size_t m = seg.count();
  const std::size_t n = seg.point_to_segment.size();
  std::vector<double> mx(m, -std::numeric_limits<double>::infinity());
  std::vector<double> total(m, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const auto s = static_cast<std::size_t>(seg.point_to_segment[p]);
    mx[s] = std::max(mx[s], scores[p]);
  }
  for (std::size_t p = 0; p < n; ++p) {
    const auto s = static_cast<std::size_t>(seg.point_to_segment[p]);
    out[p] = std::exp(scores[p] - mx[s]);
    total[s] += out[p];
  }
  for (std::size_t p = 0; p < n; ++p)
    out[p] /= total[static_cast<std::size_t>(seg.point_to_segment[p])];
}

void attention(const AttentionArgs& args) {
  std::vector<double> scores(args.m);
  for (std::size_t h = 0; h < args.heads; ++h)
    for (std::size_t i = 0; i < args.n; ++i) attention_row(args, h, i, scores.data());
}

}  // namespace serial

// -------------------------------------------------------------- parallel

namespace parallel {

void gemm(const GemmArgs& args) {
  const auto n = static_cast<std::ptrdiff_t>(args.n);
#pragma omp parallel for schedule(static) if (args.n * args.k * args.m > 32768)
  for (std::ptrdiff_t i = 0; i < n; ++i) gemm_row(args, static_cast<std::size_t>(i));
}

void scatter_max(const double* f, std::size_t channels, const Segments& seg, double* out,
                 int* argmax) {
  const auto m = static_cast<std::ptrdiff_t>(seg.count());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < m; ++s)
    segment_max_one(f, channels, seg, static_cast<std::size_t>(s), out, argmax);
}

void scatter_mean(const double* f, std::size_t channels, const Segments& seg, double* out) {
  const auto m = static_cast<std::ptrdiff_t>(seg.count());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < m; ++s)
    segment_mean_one(f, channels, seg, static_cast<std::size_t>(s), out);
}

void segment_softmax(const double* scores, const Segments& seg, double* out) {
  const auto m = static_cast<std::ptrdiff_t>(seg.count());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < m; ++s)
    segment_softmax_one(scores, seg, static_cast<std::size_t>(s), out);
}

void attention(const AttentionArgs& args) {
  const auto rows = static_cast<std::ptrdiff_t>(args.heads * args.n);
#pragma omp parallel if (rows * static_cast<std::ptrdiff_t>(args.m * args.c) > 16384)
  {
    std::vector<double> scores(args.m);
#pragma omp for schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      const auto ur = static_cast<std::size_t>(r);
      attention_row(args, ur / args.n, ur % args.n, scores.data());
    }
  }
}

}  // namespace parallel

// -------------------------------------------------------------- dispatch

#ifdef R3D_HAVE_OPENMP
namespace impl = parallel;
#else
namespace impl = serial;
#endif

void gemm(const GemmArgs& args) { impl::gemm(args); }

void scatter_max(const double* f, std::size_t channels, const Segments& seg, double* out,
                 int* argmax) {
  impl::scatter_max(f, channels, seg, out, argmax);
}

void scatter_mean(const double* f, std::size_t channels, const Segments& seg, double* out) {
  impl::scatter_mean(f, channels, seg, out);
}

void segment_softmax(const double* scores, const Segments& seg, double* out) {
  impl::segment_softmax(scores, seg, out);
}

void attention(const AttentionArgs& args) { impl::attention(args); }

int max_threads() {
#ifdef R3D_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace r3d::kernels
