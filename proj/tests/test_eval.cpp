#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "r3d/eval.hpp"
#include "test_util.hpp"

using namespace r3d;
using namespace r3d::testing;

namespace {

// Six points in three superpoints; one instance per box superpoint.
Scene tiny_scene() {
  Scene s;
  s.category_count = 2;
  for (int i = 0; i < 6; ++i) {
    s.positions.insert(s.positions.end(), {double(i), 0.0, 0.0});
    s.superpoint_id.push_back(i / 2);
    s.instance_id.push_back(i < 4 ? i / 2 : -1);
    s.semantic_label.push_back(i < 4 ? i / 2 : -1);
  }
  return s;
}

LayerPrediction prediction(Graph& g, const Tensor& cls, const Tensor& masks, const Tensor& score) {
  return {g.parameter(cls), g.parameter(masks), g.parameter(score), g.parameter(Tensor::matrix(cls.rows(), 3))};
}

InstancePrediction inst(int category, double confidence, PointMask mask, int query) {
  return {category, confidence, std::move(mask), query};
}

// Re-simulation of greedy suppression with explicit index bookkeeping.
std::vector<int> greedy_oracle(const std::vector<InstancePrediction>& in, double thr) {
  std::vector<int> idx(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) idx[i] = static_cast<int>(i);
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      const auto& x = in[static_cast<std::size_t>(idx[a])];
      const auto& y = in[static_cast<std::size_t>(idx[b])];
      if (y.confidence > x.confidence || (y.confidence == x.confidence && y.query < x.query)) std::swap(idx[a], idx[b]);
    }
  std::vector<int> kept;
  for (int i : idx) {
    bool keep = true;
    for (int k : kept) {
      const auto& a = in[static_cast<std::size_t>(i)].mask;
      const auto& b = in[static_cast<std::size_t>(k)].mask;
      int inter = 0, uni = 0;
      for (std::size_t p = 0; p < a.size(); ++p) {
        inter += a[p] & b[p];
        uni += a[p] | b[p];
      }
      const double iou = uni ? double(inter) / uni : 0.0;
      if (in[static_cast<std::size_t>(k)].category == in[static_cast<std::size_t>(i)].category && iou > thr)
        keep = false;
    }
    if (keep) kept.push_back(in[static_cast<std::size_t>(i)].query);
  }
  return kept;
}

std::vector<InstancePrediction> random_instances(Rng& rng, std::size_t n, std::size_t points, int categories) {
  std::vector<InstancePrediction> out;
  for (std::size_t q = 0; q < n; ++q) {
    PointMask m(points);
    for (auto& v : m) v = rng.uniform() < 0.5;
    // Coarse confidences so that ties occur.
    out.push_back(inst(rng.uniform_int(0, categories - 1), std::round(rng.uniform() * 4) / 4, m, static_cast<int>(q)));
  }
  return out;
}

std::vector<SceneResult> random_results(Rng& rng, std::size_t scenes) {
  std::vector<SceneResult> out;
  for (std::size_t s = 0; s < scenes; ++s) {
    SceneResult r;
    r.key = rng.next();
    const std::size_t points = 12;
    for (int g = 0; g < 3; ++g) {
      PointMask m(points, 0);
      for (std::size_t p = static_cast<std::size_t>(4 * g); p < static_cast<std::size_t>(4 * g + 4); ++p) m[p] = 1;
      r.gts.push_back({rng.uniform_int(0, 1), m});
    }
    r.predictions = random_instances(rng, 5, points, 2);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST_CASE("extract_instances: no-object, full mask, overlap, filtering") {
  const Scene scene = tiny_scene();
  const SceneInput in = prepare_scene(scene);
  const InferConfig cfg;
  Graph g;

  CHECK(extract_instances(prediction(g, Tensor::from_rows({{0, 0, 5}, {-1, -1, 2}}), Tensor::matrix(2, 3, 5.0),
                                     Tensor::matrix(2, 1, 1.0)),
                          in, cfg)
            .empty());

  auto one = extract_instances(prediction(g, Tensor::from_rows({{20, 0, 0}}), Tensor::matrix(1, 3, 5.0),
                                          Tensor::matrix(1, 1, 0.8)),
                               in, cfg);
  REQUIRE(one.size() == 1);
  CHECK(one[0].category == 0);
  CHECK(one[0].mask == PointMask(6, 1));
  CHECK(std::abs(one[0].confidence - 0.8 / (1 + 2 * std::exp(-20.0))) < 1e-15);

  // Two queries whose masks overlap on superpoint 1.
  auto two = extract_instances(prediction(g, Tensor::from_rows({{3, 0, 0}, {0, 3, 0}}),
                                          Tensor::from_rows({{4, 4, -4}, {-4, 4, 4}}), Tensor::matrix(2, 1, 1.0)),
                               in, cfg);
  REQUIRE(two.size() == 2);
  CHECK(two[0].mask == PointMask{1, 1, 1, 1, 0, 0});
  CHECK(two[1].mask == PointMask{0, 0, 1, 1, 1, 1});

  // Empty mask and sub-floor confidence are dropped.
  auto none = extract_instances(prediction(g, Tensor::from_rows({{3, 0, 0}, {3, 0, 0}}),
                                           Tensor::from_rows({{-1, -1, -1}, {4, 4, 4}}),
                                           Tensor::from_rows({{1.0}, {0.01}})),
                                in, cfg);
  CHECK(none.empty());
}

TEST_CASE("mask_iou: examples and properties") {
  CHECK(mask_iou(PointMask{1, 1, 0, 0}, PointMask{1, 0, 1, 0}) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(mask_iou(PointMask{1, 0}, PointMask{0, 1}) == 0.0);
  CHECK(mask_iou(PointMask{0, 0}, PointMask{0, 0}) == 0.0);
  CHECK_THROWS_AS(mask_iou(PointMask{1}, PointMask{1, 0}), ShapeError);
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto xs = random_instances(rng, 2, 9, 1);
    CHECK(mask_iou(xs[0].mask, xs[1].mask) == mask_iou(xs[1].mask, xs[0].mask));
    if (std::count(xs[0].mask.begin(), xs[0].mask.end(), 1) > 0) CHECK(mask_iou(xs[0].mask, xs[0].mask) == 1.0);
  }
}

TEST_CASE("nms: examples, greedy oracle, idempotence") {
  const PointMask m{1, 1, 0, 0};
  auto kept = nms({inst(0, 0.8, m, 1), inst(0, 0.9, m, 0)}, 0.75);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].confidence == 0.9);
  CHECK(nms({inst(0, 0.8, m, 0), inst(1, 0.9, m, 1)}, 0.75).size() == 2);
  // Equal confidence: the lower query index survives.
  kept = nms({inst(0, 0.5, m, 3), inst(0, 0.5, m, 2)}, 0.75);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].query == 2);

  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto xs = random_instances(rng, 5, 8, 2);
    const double thr = rng.uniform(0.1, 0.9);
    const auto got = nms(xs, thr);
    std::vector<int> queries;
    for (const auto& x : got) queries.push_back(x.query);
    CHECK(queries == greedy_oracle(xs, thr));
    const auto again = nms(got, thr);
    REQUIRE(again.size() == got.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(again[i].query == got[i].query);
  }
}

TEST_CASE("average_precision: hand-built cases") {
  const PointMask a{1, 1, 0, 0}, b{0, 0, 1, 1}, junk{1, 0, 1, 0};
  SceneResult r;
  r.gts = {{0, a}, {0, b}};

  r.predictions = {inst(0, 0.9, a, 0)};
  std::vector<SceneResult> one{r};
  // One of two GTs found at precision 1.
  CHECK(*average_precision(one, 0.5, 0) == 0.5);

  r.gts = {{0, a}};
  CHECK(*average_precision(std::vector<SceneResult>{r}, 0.5, 0) == 1.0);
  r.predictions.clear();
  CHECK(*average_precision(std::vector<SceneResult>{r}, 0.5, 0) == 0.0);
  CHECK_FALSE(average_precision(std::vector<SceneResult>{r}, 0.5, 1).has_value());

  // TP, FP, TP: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
  // Envelope gives 1/2 * 1 + 1/2 * 2/3 = 5/6.
  r.gts = {{0, a}, {0, b}};
  r.predictions = {inst(0, 0.9, a, 0), inst(0, 0.8, junk, 1), inst(0, 0.7, b, 2)};
  CHECK(std::abs(*average_precision(std::vector<SceneResult>{r}, 0.5, 0) - 5.0 / 6.0) < 1e-15);
  // junk has IoU 1/3 with both GTs, so at 0.25 it matches a GT first.
  // TP, TP, then a duplicate of b misses: AP = 1.
  CHECK(*average_precision(std::vector<SceneResult>{r}, 0.25, 0) == 1.0);
}

TEST_CASE("average_precision: monotone in false positives and threshold") {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    auto results = random_results(rng, 3);
    for (int c = 0; c < 2; ++c) {
      const auto a25 = average_precision(results, 0.25, c);
      if (!a25) continue;
      double prev = *a25;
      for (double t : {0.5, 0.75, 0.95}) {
        const double ap = *average_precision(results, t, c);
        CHECK(ap <= prev);
        prev = ap;
      }
      // Drop one prediction that matches no same-category GT at 0.5.
      const double before = *average_precision(results, 0.5, c);
      for (auto& r : results) {
        auto it = std::find_if(r.predictions.begin(), r.predictions.end(), [&](const InstancePrediction& p) {
          return p.category == c && std::none_of(r.gts.begin(), r.gts.end(), [&](const GtInstance& gt) {
                   return gt.category == c && mask_iou(p.mask, gt.mask) >= 0.5;
                 });
        });
        if (it != r.predictions.end()) {
          r.predictions.erase(it);
          break;
        }
      }
      CHECK(*average_precision(results, 0.5, c) >= before);
    }
  }
}

TEST_CASE("evaluate: perfect, empty, order invariance, aggregation") {
  SynthConfig sc;
  std::vector<SceneResult> perfect, empty;
  for (int i = 0; i < 6; ++i) {
    const Scene s = synth_scene(sc, i);
    SceneResult r{{}, gt_instances(s), scene_key(s)};
    empty.push_back(r);
    int q = 0;
    for (const auto& gt : r.gts) r.predictions.push_back(inst(gt.category, 0.9, gt.mask, q++));
    perfect.push_back(std::move(r));
  }
  const EvalReport p = evaluate(perfect, sc.category_count);
  CHECK(p.map == 1.0);
  CHECK(p.ap50 == 1.0);
  CHECK(p.ap25 == 1.0);
  CHECK(p.scenes == 6);
  CHECK(p.predictions == p.ground_truths);
  const EvalReport e = evaluate(empty, sc.category_count);
  CHECK(e.map == 0.0);
  CHECK(e.ap50 == 0.0);
  CHECK(e.ap25 == 0.0);
  CHECK(e.categories.size() == p.categories.size());

  CHECK(map_thresholds().size() == 10);
  CHECK(std::abs(map_thresholds().back() - 0.95) < 1e-12);

  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    auto results = random_results(rng, 4);
    const EvalReport base = evaluate(results, 2);
    std::reverse(results.begin(), results.end());
    CHECK(evaluate(results, 2) == base);
    double map = 0.0, ap50 = 0.0;
    for (const auto& [c, cat] : base.categories) {
      double sum = 0.0;
      for (double t : map_thresholds()) sum += *average_precision(results, t, c);
      CHECK(std::abs(cat.map - sum / 10) < 1e-15);
      map += cat.map;
      ap50 += cat.ap50;
    }
    CHECK(std::abs(base.map - map / static_cast<double>(base.categories.size())) < 1e-15);
    CHECK(std::abs(base.ap50 - ap50 / static_cast<double>(base.categories.size())) < 1e-15);
    CHECK(base.ap25 >= base.ap50);
    CHECK(base.ap50 >= 0.0);
    CHECK(base.ap25 <= 1.0);
  }
}

TEST_CASE("evaluate_model is invariant to scene order; point_labels and histograms") {
  DecoderConfig cfg;
  cfg.width = 16;
  cfg.heads = 4;
  cfg.layers = 2;
  cfg.refine_interval = 1;
  const ParamStore params = init_decoder(cfg, 2);
  SynthConfig sc;
  std::vector<Scene> scenes;
  for (int i = 0; i < 4; ++i) scenes.push_back(voxelize(synth_scene(sc, i), 0.02));
  InferConfig icfg;
  icfg.min_confidence = 0.0;
  const EvalReport a = evaluate_model(scenes, params, cfg, icfg);
  std::reverse(scenes.begin(), scenes.end());
  CHECK(evaluate_model(scenes, params, cfg, icfg) == a);

  const PointMask m1{1, 1, 0}, m2{0, 1, 1};
  CHECK(point_labels({inst(0, 0.4, m1, 0), inst(1, 0.6, m2, 1)}, 3) == std::vector<int>{0, 1, 1});
  CHECK(point_labels({}, 2) == std::vector<int>{-1, -1});

  const SceneInput in = prepare_scene(scenes[0]);
  Graph g;
  BoundParams bp(g, params);
  const DecoderOutput out = decoder_forward(in, bind_decoder(bp, cfg), cfg);
  const auto hists = attention_histograms(out);
  REQUIRE(hists.size() == out.self_attention.size());
  for (std::size_t l = 0; l < hists.size(); ++l) {
    std::size_t sum = hists[l].excluded;
    for (auto c : hists[l].counts) sum += c;
    CHECK(sum == hists[l].total);
    CHECK(hists[l].total == out.self_attention[l].size());
    CHECK(hists[l].edges.front() == 0.03);
    CHECK(hists[l].edges.back() == doctest::Approx(1.0));
  }
}
