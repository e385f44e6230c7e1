#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "r3d/decoder.hpp"
#include "r3d/gradcheck.hpp"
#include "test_util.hpp"

using namespace r3d;
using namespace r3d::testing;
namespace fs = std::filesystem;

namespace {

Scene toy_scene(Rng& rng, std::size_t n = 30, int m = 6) {
  Scene s;
  s.category_count = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int sp = static_cast<int>(i) % m;
    for (int a = 0; a < 3; ++a) s.positions.push_back(rng.uniform(0, 1) + (sp < m / 2 ? 0.0 : 1.5) * (a == 0));
    for (int a = 0; a < 3; ++a) s.colors.push_back(rng.uniform());
    s.superpoint_id.push_back(sp);
    s.instance_id.push_back(sp < m / 2 ? 0 : 1);
    s.semantic_label.push_back(sp < m / 2 ? 0 : 1);
  }
  return s;
}

DecoderConfig toy_config() {
  DecoderConfig cfg;
  cfg.queries = 4;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.refine_interval = 1;
  cfg.sincos_dim = 4;
  cfg.position_dim = 4;
  cfg.category_count = 2;
  return cfg;
}

void check_bit_identical(const DecoderOutput& a, const DecoderOutput& b) {
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].class_logits.value() == b.layers[l].class_logits.value());
    CHECK(a.layers[l].mask_logits.value() == b.layers[l].mask_logits.value());
    CHECK(a.layers[l].score.value() == b.layers[l].score.value());
    CHECK(a.layers[l].center.value() == b.layers[l].center.value());
  }
}

}  // namespace

TEST_CASE("encode_points: zero weights, identical points, shape") {
  Rng rng(1);
  Scene s = toy_scene(rng);
  s.positions[3] = s.positions[0];
  s.positions[4] = s.positions[1];
  s.positions[5] = s.positions[2];
  for (int a = 0; a < 3; ++a) s.colors[static_cast<std::size_t>(3 + a)] = s.colors[static_cast<std::size_t>(a)];
  const SceneInput in = prepare_scene(s);
  ParamStore store;
  init_mlp(store, "encoder", {9, 8, 8}, rng);
  Graph g;
  BoundParams bp(g, store);
  const Tensor f = encode_points(in, bind_mlp(bp, "encoder", 2)).value();
  CHECK(f.shape == Shape{30, 8});
  for (std::size_t j = 0; j < 8; ++j) CHECK(f(0, j) == f(1, j));

  for (const auto& name : store.names()) store.at(name).data.assign(store.at(name).size(), 0.0);
  Graph g0;
  BoundParams bp0(g0, store);
  for (double v : encode_points(in, bind_mlp(bp0, "encoder", 2)).value().data) CHECK(v == 0.0);
}

TEST_CASE("init_queries: world mapping, degenerate bounds, seeding") {
  Graph g;
  const Var content = g.constant(Tensor::matrix(1, 4));
  Bounds b{{0, 0, 0}, {2, 2, 2}};
  const Var unit = g.constant(Tensor::from_rows({{0.5, 0.5, 0.5}}));
  CHECK(init_queries(content, unit, b).position_world.value() == Tensor::from_rows({{1, 1, 1}}));
  Bounds flat{{1, 2, 3}, {1, 2, 3}};
  CHECK(init_queries(content, g.constant(Tensor::from_rows({{0.3, 0.9, 0.1}})), flat).position_world.value() ==
        Tensor::from_rows({{1, 2, 3}}));

  DecoderConfig cfg;
  CHECK(init_decoder(cfg, 3).at("query.position") == init_decoder(cfg, 3).at("query.position"));
  CHECK_FALSE(init_decoder(cfg, 3).at("query.position") == init_decoder(cfg, 4).at("query.position"));
  const ParamStore seeded = init_decoder(cfg, 3);
  for (double v : seeded.at("query.position").data) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("mask_attention: full mask, empty-mask fallback, single superpoint") {
  Rng rng(2);
  const std::size_t c = 8, heads = 2;
  ParamStore store;
  for (const char* name : {"a.query", "a.key", "a.value", "a.output"}) init_linear(store, name, c, c, rng);
  init_norm(store, "a.norm", c);
  Graph g;
  BoundParams bp(g, store);
  const AttentionBlock blk{bind_linear(bp, "a.query"), bind_linear(bp, "a.key"), bind_linear(bp, "a.value"),
                           bind_linear(bp, "a.output"), bind_norm(bp, "a.norm")};
  const Var q = g.constant(random_tensor({3, c}, rng));
  const Var qp = g.constant(random_tensor({3, c}, rng));
  const Var f = g.constant(random_tensor({5, c}, rng));
  const Var fp = g.constant(random_tensor({5, c}, rng));
  const Tensor ones = Tensor::matrix(3, 5, 1.0);
  const Tensor zeros = Tensor::matrix(3, 5, 0.0);
  const Tensor full = mask_attention(q, qp, f, fp, ones, blk, heads, 0.5).value();
  CHECK(full == mask_attention(q, qp, f, fp, zeros, blk, heads, 0.5).value());

  const Tensor x = q.value();
  const Tensor want = oracle_layer_norm(
      oracle_add(x, oracle_linear(oracle_attention(oracle_linear(oracle_add(x, qp.value()), store.at("a.query.weight"),
                                                                 store.at("a.query.bias")),
                                                   oracle_linear(oracle_add(f.value(), fp.value()),
                                                                 store.at("a.key.weight"), store.at("a.key.bias")),
                                                   oracle_linear(f.value(), store.at("a.value.weight"),
                                                                 store.at("a.value.bias")),
                                                   heads),
                                  store.at("a.output.weight"), store.at("a.output.bias"))),
      store.at("a.norm.gain"), store.at("a.norm.bias"));
  CHECK(max_abs_diff(full, want) < 1e-12);

  const Var f1 = g.constant(random_tensor({1, c}, rng));
  const Var fp1 = g.constant(random_tensor({1, c}, rng));
  const Tensor value_row =
      oracle_linear(oracle_linear(f1.value(), store.at("a.value.weight"), store.at("a.value.bias")),
                    store.at("a.output.weight"), store.at("a.output.bias"));
  Tensor pre = x;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < c; ++j) pre(i, j) += value_row(0, j);
  const Tensor expected = oracle_layer_norm(pre, store.at("a.norm.gain"), store.at("a.norm.bias"));
  const Tensor mixed = Tensor::from_rows({{1}, {0}, {0.7}});
  CHECK(max_abs_diff(mask_attention(q, qp, f1, fp1, mixed, blk, heads, 0.5).value(), expected) < 1e-12);
  CHECK_THROWS_AS(mask_attention(q, qp, f, fp, Tensor::matrix(3, 4), blk, heads, 0.5), ShapeError);
}

TEST_CASE("superpoint_refine: single query, zero value path, loop oracle") {
  DecoderConfig cfg = toy_config();
  cfg.layers = 3;
  cfg.refine_interval = 3;
  for (std::uint64_t seed : {1, 2, 3}) {
    ParamStore store = init_decoder(cfg, seed);
    Rng rng(seed);
    for (auto* name : {"refine0.cross.norm.gain", "refine0.ffn.norm.gain"})
      for (double& v : store.at(name).data) v = rng.uniform(0.5, 1.5);
    const Tensor fs = random_tensor({6, 8}, rng);
    const Tensor qs = random_tensor({4, 8}, rng);

    auto at = [&](const std::string& n) -> const Tensor& { return store.at("refine0." + n); };
    const Tensor attended = oracle_linear(
        oracle_attention(oracle_linear(fs, at("cross.query.weight"), at("cross.query.bias")),
                         oracle_linear(qs, at("cross.key.weight"), at("cross.key.bias")),
                         oracle_linear(qs, at("cross.value.weight"), at("cross.value.bias")), 2),
        at("cross.output.weight"), at("cross.output.bias"));
    const Tensor f1 = oracle_layer_norm(oracle_add(fs, attended), at("cross.norm.gain"), at("cross.norm.bias"));
    Tensor hidden = oracle_linear(f1, at("ffn.hidden.weight"), at("ffn.hidden.bias"));
    for (double& v : hidden.data) v = std::max(v, 0.0);
    const Tensor want = oracle_layer_norm(oracle_add(f1, oracle_linear(hidden, at("ffn.output.weight"), at("ffn.output.bias"))),
                                          at("ffn.norm.gain"), at("ffn.norm.bias"));
    Graph g;
    BoundParams bp(g, store);
    const DecoderParams p = bind_decoder(bp, cfg);
    CHECK(max_abs_diff(superpoint_refine(g.constant(fs), g.constant(qs), p.refine[0], 2).value(), want) < 1e-12);

    // One query: every superpoint receives the same attended row.
    Tensor q1 = Tensor::matrix(1, 8);
    for (std::size_t j = 0; j < 8; ++j) q1(0, j) = qs(0, j);
    const Tensor row = oracle_linear(oracle_linear(q1, at("cross.value.weight"), at("cross.value.bias")),
                                     at("cross.output.weight"), at("cross.output.bias"));
    Tensor pre = fs;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 8; ++j) pre(i, j) += row(0, j);
    const Var pre_norm = p.refine[0].cross.norm(g.constant(pre));
    CHECK(max_abs_diff(superpoint_refine(g.constant(fs), g.constant(q1), p.refine[0], 2).value(),
                       p.refine[0].ffn(pre_norm).value()) < 1e-12);

    ParamStore zeroed = store;
    for (auto* name : {"refine0.cross.value.weight", "refine0.cross.value.bias", "refine0.cross.output.bias"})
      zeroed.at(name).data.assign(zeroed.at(name).size(), 0.0);
    Graph g0;
    BoundParams bp0(g0, zeroed);
    const DecoderParams p0 = bind_decoder(bp0, cfg);
    const Var f = g0.constant(fs);
    CHECK(superpoint_refine(f, g0.constant(qs), p0.refine[0], 2).value() == p0.refine[0].ffn(p0.refine[0].cross.norm(f)).value());
  }
}

TEST_CASE("predict_heads: orthogonal and aligned mask embeddings, shapes") {
  const std::size_t c = 4;
  ParamStore store;
  Rng rng(1);
  init_linear(store, "h.category", c, 3, rng);
  init_linear(store, "h.mask", c, c, rng);
  init_linear(store, "h.score", c, 1, rng);
  Tensor& w = store.at("h.mask.weight");
  w.data.assign(w.size(), 0.0);
  for (std::size_t i = 0; i < c; ++i) w(i, i) = 1.0;
  Graph g;
  BoundParams bp(g, store);
  const HeadParams heads{bind_linear(bp, "h.category"), bind_linear(bp, "h.mask"), bind_linear(bp, "h.score")};
  const Var q = g.constant(Tensor::from_rows({{1, 0, 0, 0}}));
  const Var center = g.constant(Tensor::from_rows({{0.1, 0.2, 0.3}}));
  LayerPrediction pred = predict_heads(q, g.constant(Tensor::from_rows({{0, 1, 0, 0}, {0, 0, 0, 3}})), center, heads);
  CHECK(mask_probabilities(pred) == Tensor::from_rows({{0.5, 0.5}}));
  pred = predict_heads(q, g.constant(Tensor::from_rows({{1, 0, 0, 0}})), center, heads);
  CHECK(pred.mask_logits.value().item() == 1.0);

  const Var qs = g.constant(random_tensor({5, c}, rng));
  pred = predict_heads(qs, g.constant(random_tensor({7, c}, rng)), g.constant(random_tensor({5, 3}, rng)), heads);
  CHECK(pred.class_logits.shape() == Shape{5, 3});
  CHECK(pred.mask_logits.shape() == Shape{5, 7});
  CHECK(pred.score.shape() == Shape{5, 1});
  CHECK(pred.center.shape() == Shape{5, 3});
  for (double v : pred.score.value().data) CHECK((v > 0.0 && v < 1.0));
}

TEST_CASE("decoder_forward: refinement schedule, shapes, bounds, determinism") {
  SynthConfig sc;
  const Scene scene = voxelize(synth_scene(sc, 2), 0.02);
  const SceneInput in = prepare_scene(scene);
  const std::size_t m = in.partition.superpoints();

  DecoderConfig cfg;
  ParamStore store = init_decoder(cfg, 7);
  Rng rng(9);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (double& v : store.at("layer" + std::to_string(l) + ".position.weight").data) v = rng.uniform(-1, 1);
  Graph g1, g2;
  BoundParams b1(g1, store), b2(g2, store);
  const DecoderOutput o1 = decoder_forward(in, bind_decoder(b1, cfg), cfg);
  const DecoderOutput o2 = decoder_forward(in, bind_decoder(b2, cfg), cfg);
  check_bit_identical(o1, o2);
  CHECK(o1.refine_calls == 2);
  CHECK(o1.contrastive_taps.size() == 3);
  CHECK(o1.layers.size() == 7);
  CHECK(o1.self_attention.size() == 6);
  for (const auto& pred : o1.layers) {
    CHECK(pred.class_logits.shape() == Shape{8, 5});
    CHECK(pred.mask_logits.shape() == Shape{8, m});
    CHECK(pred.class_logits.value().all_finite());
    CHECK(pred.mask_logits.value().all_finite());
    const Tensor& c = pred.center.value();
    for (std::size_t k = 0; k < 8; ++k)
      for (std::size_t a = 0; a < 3; ++a) CHECK((c(k, a) >= in.bounds.min[a] && c(k, a) <= in.bounds.max[a]));
  }

  DecoderConfig shallow = cfg;
  shallow.layers = 2;
  shallow.refine_interval = 6;
  ParamStore s2 = init_decoder(shallow, 1);
  Graph g3;
  BoundParams b3(g3, s2);
  const DecoderOutput o3 = decoder_forward(in, bind_decoder(b3, shallow), shallow);
  CHECK(o3.refine_calls == 0);
  CHECK(o3.layers.size() == 3);
}

TEST_CASE("decoder_forward: zero relation projection without refinement equals the plain decoder bitwise") {
  SynthConfig sc;
  for (int i = 0; i < 3; ++i) {
    const Scene scene = voxelize(synth_scene(sc, i), 0.02);
    const SceneInput in = prepare_scene(scene);
    DecoderConfig full;
    full.refine_interval = full.layers + 1;
    DecoderConfig plain = full;
    plain.use_rsa = false;
    plain.use_clsr = false;
    ParamStore store = init_decoder(full, static_cast<std::uint64_t>(i) + 1);
    REQUIRE(store.names() == init_decoder(plain, 1).names());
    for (std::size_t l = 0; l < full.layers; ++l)
      for (auto* part : {".rsa.relation.weight", ".rsa.relation.bias"}) {
        Tensor& t = store.at("layer" + std::to_string(l) + part);
        t.data.assign(t.size(), 0.0);
      }
    Graph g1, g2;
    BoundParams b1(g1, store), b2(g2, store);
    check_bit_identical(decoder_forward(in, bind_decoder(b1, full), full),
                        decoder_forward(in, bind_decoder(b2, plain), plain));
  }
}

TEST_CASE("decoder: end-to-end finite differences through a 1-layer toy decoder") {
  const DecoderConfig cfg = toy_config();
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed + 100);
    const Scene scene = toy_scene(rng);
    const SceneInput in = prepare_scene(scene);
    ParamStore store = init_decoder(cfg, seed);
    for (double& v : store.at("layer0.position.weight").data) v = rng.uniform(-0.3, 0.3);
    for (double& v : store.at("query.position").data) v = rng.uniform(0.2, 0.8);
    std::vector<NamedTensor> params;
    for (const auto& name : store.names()) params.push_back({name, store.at(name)});
    const Tensor w_cls = random_tensor({4, 3}, rng), w_mask = random_tensor({4, 6}, rng);
    const Tensor w_score = random_tensor({4, 1}, rng), w_center = random_tensor({4, 3}, rng);
    const Tensor w_tap = random_tensor({6, 8}, rng);
    // Boxes are stop-gradient constants; hold them at their unperturbed values.
    Graph g0;
    BoundParams bp0(g0, store);
    const auto boxes = decoder_forward(in, bind_decoder(bp0, cfg), cfg).boxes;
    auto report = grad_check(
        [&](Graph& g, std::span<const Var> v) {
          BoundParams bp(g, store.names(), v);
          const DecoderOutput out = decoder_forward(in, bind_decoder(bp, cfg), cfg, &boxes);
          std::vector<Var> terms;
          for (const auto& pred : out.layers) {
            terms.push_back(sum_all(pred.class_logits * g.constant(w_cls)));
            terms.push_back(sum_all(pred.mask_logits * g.constant(w_mask)));
            terms.push_back(sum_all(pred.score * g.constant(w_score)));
            terms.push_back(sum_all(pred.center * g.constant(w_center)));
          }
          for (const auto& tap : out.contrastive_taps) terms.push_back(sum_all(tap * g.constant(w_tap)));
          const std::vector<double> ones(terms.size(), 1.0);
          return weighted_sum(terms, ones);
        },
        params, 1e-5, 1e-3);
    INFO("seed " << seed << " worst " << report.worst_rel_error());
    for (const auto& e : report.entries)
      if (e.max_rel_error > 1e-3) MESSAGE(e.name << " rel " << e.max_rel_error << " abs " << e.max_abs_error);
    CHECK(report.passed);
  }
}

TEST_CASE("checkpoint: round trip, config mismatch, corruption") {
  DecoderConfig cfg;
  cfg.layers = 2;
  const ParamStore store = init_decoder(cfg, 5);
  const auto path = fs::temp_directory_path() / "r3d_test_decoder.r3dw";
  save_checkpoint(path, cfg, store);
  const Checkpoint ck = load_checkpoint(path, cfg);
  CHECK(ck.config == cfg);
  CHECK(ck.params == store);
  DecoderConfig other = cfg;
  other.width = 16;
  CHECK_THROWS_AS(load_checkpoint(path, other), ValidationError);
  CHECK(decoder_config_from_text(decoder_config_text(cfg)) == cfg);

  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), {});
  }
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  bytes[0] = 'X';
  std::ofstream(path, std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  fs::remove(path);
}
