#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "r3d/contrastive.hpp"
#include "r3d/gradcheck.hpp"
#include "test_util.hpp"

using namespace r3d;
using r3d::testing::max_abs_diff;
using r3d::testing::random_tensor;

namespace {

double loss_value(const Tensor& s, const RelationPrior& r) {
  Graph g;
  return contrastive_loss(g.constant(s), r).value().item();
}

double bce_oracle(const Tensor& s, const Tensor& r) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp((s.data[i] + 1.0) / 2.0, 1e-7, 1.0 - 1e-7);
    total += -(r.data[i] * std::log(p) + (1.0 - r.data[i]) * std::log(1.0 - p));
  }
  return total / static_cast<double>(s.size());
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const std::size_t m = perm.size();
  Tensor y = Tensor::matrix(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) y(i, j) = x(static_cast<std::size_t>(perm[i]), static_cast<std::size_t>(perm[j]));
  return y;
}

}  // namespace

TEST_CASE("relation_prior: examples and pairwise oracle") {
  const std::vector<int> aab{5, 5, 9};
  CHECK(relation_prior(aab).matrix == Tensor::from_rows({{1, 1, 0}, {1, 1, 0}, {0, 0, 1}}));
  const std::vector<int> bg{-1, -1, -1};
  CHECK(relation_prior(bg).matrix == Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> a(6);
    for (int& v : a) v = rng.uniform_int(-1, 2);
    const Tensor r = relation_prior(a).matrix;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        const bool same = i == j || (a[i] != -1 && a[i] == a[j]);
        CHECK(r(i, j) == (same ? 1.0 : 0.0));
        CHECK(r(i, j) == r(j, i));
      }
  }
}

TEST_CASE("relation_prior from a scene uses the majority assignment") {
  Scene s;
  s.category_count = 1;
  s.positions.assign(12, 0.0);
  s.superpoint_id = {0, 0, 1, 2};
  s.instance_id = {3, 3, 3, -1};
  s.semantic_label = {0, 0, 0, -1};
  const RelationPrior r = relation_prior(s);
  CHECK(r.assignment == std::vector<int>{3, 3, -1});
  CHECK(r.matrix == Tensor::from_rows({{1, 1, 0}, {1, 1, 0}, {0, 0, 1}}));
}

TEST_CASE("cosine_similarity_matrix: examples, scale invariance, oracle, zero rows") {
  Graph g;
  const Tensor fs = Tensor::from_rows({{1, 0}, {1, 0}, {0, 1}});
  CHECK(cosine_similarity_matrix(g.constant(fs)).value() == Tensor::from_rows({{1, 1, 0}, {1, 1, 0}, {0, 0, 1}}));

  Rng rng(5);
  const Tensor x = random_tensor({5, 8}, rng);
  Tensor scaled = x;
  for (std::size_t j = 0; j < 8; ++j) scaled(2, j) *= 5.0;
  const Tensor s = cosine_similarity_matrix(g.constant(x)).value();
  CHECK(max_abs_diff(s, cosine_similarity_matrix(g.constant(scaled)).value()) < 1e-15);

  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(s(i, i) - 1.0) < 1e-9);
    for (std::size_t j = 0; j < 5; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t c = 0; c < 8; ++c) {
        dot += x(i, c) * x(j, c);
        ni += x(i, c) * x(i, c);
        nj += x(j, c) * x(j, c);
      }
      CHECK(std::abs(s(i, j) - dot / std::sqrt(ni * nj)) < 1e-12);
      CHECK(s(i, j) == s(j, i));
      CHECK(std::abs(s(i, j)) <= 1.0 + 1e-12);
    }
  }

  SimilarityDiagnostics diag;
  const Tensor with_zero = Tensor::from_rows({{0, 0}, {3, 4}});
  const Tensor sz = cosine_similarity_matrix(g.constant(with_zero), &diag).value();
  CHECK(diag.zero_norm_rows == 1);
  CHECK(sz(0, 1) == 0.0);
  CHECK(std::isfinite(sz(0, 0)));
}

TEST_CASE("contrastive_loss: closed forms, oracle, properties") {
  const RelationPrior eye = relation_prior(std::vector<int>{0, 1});
  CHECK(std::abs(loss_value(Tensor::from_rows({{1, 0}, {0, 1}}), eye) - 0.346574) < 1e-6);
  CHECK(std::abs(loss_value(Tensor::from_rows({{1, 0}, {0, 1}}), eye) - 0.5 * std::log(2.0)) < 1e-6);

  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> a(6);
    for (int& v : a) v = rng.uniform_int(-1, 2);
    const RelationPrior r = relation_prior(a);
    Tensor perfect = r.matrix;
    for (double& v : perfect.data) v = 2 * v - 1;
    CHECK(loss_value(perfect, r) <= 1e-6);

    Graph g;
    const Tensor feats = random_tensor({6, 4}, rng);
    const Tensor s = cosine_similarity_matrix(g.constant(feats)).value();
    const double l = loss_value(s, r);
    CHECK(l >= 0.0);
    CHECK(std::abs(l - bce_oracle(s, r.matrix)) < 1e-12);

    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<int> pa(6);
    for (std::size_t i = 0; i < 6; ++i) pa[i] = a[static_cast<std::size_t>(perm[i])];
    CHECK(std::abs(loss_value(permute(s, perm), relation_prior(pa)) - l) < 1e-14);
  }
}

TEST_CASE("contrastive_loss: same-instance pair never gets worse under interpolation") {
  Rng rng(21);
  const RelationPrior same = relation_prior(std::vector<int>{0, 0});
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({1, 5}, rng);
    const Tensor b = random_tensor({1, 5}, rng);
    double previous = INFINITY;
    for (double t = 0.0; t <= 0.5 + 1e-12; t += 0.05) {
      Tensor f = Tensor::matrix(2, 5);
      for (std::size_t j = 0; j < 5; ++j) {
        f(0, j) = (1 - t) * a(0, j) + t * b(0, j);
        f(1, j) = (1 - t) * b(0, j) + t * a(0, j);
      }
      Graph g;
      const double l = contrastive_loss(cosine_similarity_matrix(g.constant(f)), same).value().item();
      CHECK(l <= previous + 1e-12);
      previous = l;
    }
  }
}

TEST_CASE("contrastive_loss: class balancing hook") {
  const RelationPrior r = relation_prior(std::vector<int>{0, 0, 1, -1});
  Rng rng(2);
  Graph g;
  const Tensor s = cosine_similarity_matrix(g.constant(random_tensor({4, 3}, rng))).value();
  ContrastiveOptions balanced;
  balanced.balance_classes = true;
  double pos = 0, neg = 0;
  std::size_t npos = 0, nneg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp((s.data[i] + 1) / 2, 1e-7, 1 - 1e-7);
    if (r.matrix.data[i] > 0.5) {
      pos -= std::log(p);
      ++npos;
    } else {
      neg -= std::log(1 - p);
      ++nneg;
    }
  }
  const double expected = 0.5 * pos / static_cast<double>(npos) + 0.5 * neg / static_cast<double>(nneg);
  CHECK(std::abs(contrastive_loss(g.constant(s), r, balanced).value().item() - expected) < 1e-12);
}

TEST_CASE("contrastive_loss of cosine similarity: finite differences (M=4, C=3)") {
  const RelationPrior r = relation_prior(std::vector<int>{0, 0, 1, -1});
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    std::vector<NamedTensor> params{{"features", random_tensor({4, 3}, rng)}};
    for (bool balance : {false, true}) {
      ContrastiveOptions opt;
      opt.balance_classes = balance;
      auto report = grad_check(
          [&](Graph&, std::span<const Var> p) { return contrastive_loss(cosine_similarity_matrix(p[0]), r, opt); },
          params, 1e-6, 1e-4);
      INFO("seed " << seed << " worst " << report.worst_rel_error());
      CHECK(report.passed);
    }
  }
}
