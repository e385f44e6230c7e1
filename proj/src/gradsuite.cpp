#include "r3d/gradsuite.hpp"

#include <chrono>
#include <functional>

#include "r3d/contrastive.hpp"
#include "r3d/decoder.hpp"
#include "r3d/gradcheck.hpp"
#include "r3d/ops.hpp"

namespace r3d {

namespace {

constexpr double kElementwiseTol = 1e-4;
constexpr double kCompositeTol = 1e-3;

Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Tensor binary(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return t;
}

// Random linear functional of y, so every output entry carries gradient.
Var project(Graph& g, const Var& y, Rng& rng) { return sum_all(mul(y, g.constant(uniform(y.shape(), rng)))); }

// Biases start at zero, which puts ReLU inputs of max-pooled points exactly
// on the kink; random biases move the check to a generic point.
std::vector<NamedTensor> store_params(ParamStore& store, Rng& rng) {
  std::vector<NamedTensor> out;
  for (const auto& name : store.names()) {
    Tensor& t = store.at(name);
    if (name.ends_with(".bias"))
      for (double& v : t.data) v += rng.uniform(-0.1, 0.1);
    out.push_back({name, t});
  }
  return out;
}

std::vector<std::string> param_names(std::span<const NamedTensor> params) {
  std::vector<std::string> names;
  for (const auto& p : params) names.push_back(p.name);
  return names;
}

struct Instance {
  LossFn fn;
  std::vector<NamedTensor> params;
  double eps = 1e-5;
};

using Builder = std::function<Instance(Rng&)>;

struct Module {
  const char* name;
  double tolerance;
  Builder build;
};

DecoderConfig toy_decoder() {
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

Scene toy_scene(Rng& rng) {
  Scene s;
  s.category_count = 2;
  for (int i = 0; i < 30; ++i) {
    const int sp = i % 6;
    for (int a = 0; a < 3; ++a) s.positions.push_back(rng.uniform(0, 1) + (sp < 3 ? 0.0 : 1.5) * (a == 0));
    for (int a = 0; a < 3; ++a) s.colors.push_back(rng.uniform());
    s.superpoint_id.push_back(sp);
    s.instance_id.push_back(sp < 3 ? 0 : 1);
    s.semantic_label.push_back(sp < 3 ? 0 : 1);
  }
  return s;
}

std::vector<Module> modules() {
  std::vector<Module> m;
  m.push_back({"linear", kCompositeTol, [](Rng& rng) {
                 const Tensor proj = uniform({5, 3}, rng);
                 return Instance{[proj](Graph& g, std::span<const Var> p) {
                                   return sum_all(mul(linear(p[0], p[1], p[2]), g.constant(proj)));
                                 },
                                 {{"x", uniform({5, 4}, rng)}, {"weight", uniform({4, 3}, rng)}, {"bias", uniform({3}, rng)}}};
               }});
  m.push_back({"softmax", kCompositeTol, [](Rng& rng) {
                 const Tensor proj = uniform({3, 5}, rng);
                 return Instance{[proj](Graph& g, std::span<const Var> p) {
                                   return sum_all(mul(softmax_rows(p[0]), g.constant(proj)));
                                 },
                                 {{"x", uniform({3, 5}, rng, -3, 3)}}};
               }});
  m.push_back({"sigmoid", kElementwiseTol, [](Rng& rng) {
                 const Tensor proj = uniform({3, 4}, rng);
                 return Instance{[proj](Graph& g, std::span<const Var> p) {
                                   return sum_all(mul(sigmoid(p[0]), g.constant(proj)));
                                 },
                                 {{"x", uniform({3, 4}, rng, -3, 3)}}};
               }});
  m.push_back({"attention_core", kCompositeTol, [](Rng& rng) {
                 auto mask = std::make_shared<std::vector<std::uint8_t>>(9);
                 for (auto& v : *mask) v = rng.uniform() < 0.3;
                 const Tensor proj = uniform({2, 3, 2}, rng);
                 return Instance{[mask, proj](Graph& g, std::span<const Var> p) {
                                   return sum_all(mul(attention_core(p[0], p[1], p[2], &p[3], mask.get()), g.constant(proj)));
                                 },
                                 {{"q", uniform({2, 3, 2}, rng)},
                                  {"k", uniform({2, 3, 2}, rng)},
                                  {"v", uniform({2, 3, 2}, rng)},
                                  {"bias", uniform({2, 3, 3}, rng)}}};
               }});
  m.push_back({"asam_forward", kCompositeTol, [](Rng& rng) {
                 ParamStore store;
                 init_asam(store, "asam", 4, rng);
                 const std::vector<int> ids{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 0, 1};
                 const auto part = SuperpointPartition::from_ids(ids);
                 std::vector<NamedTensor> params{{"features", uniform({12, 4}, rng)}};
                 for (auto& p : store_params(store, rng)) params.push_back(std::move(p));
                 const Tensor proj = uniform({3, 4}, rng);
                 const auto names = param_names(params);
                 return Instance{[part, proj, names](Graph& g, std::span<const Var> v) {
                                   BoundParams bp(g, names, v);
                                   return sum_all(mul(asam_forward(v[0], part, bind_asam(bp, "asam")).features,
                                                      g.constant(proj)));
                                 },
                                 params, 1e-6};
               }});
  m.push_back({"cosine_similarity+contrastive_loss", kCompositeTol, [](Rng& rng) {
                 const RelationPrior prior = relation_prior(std::vector<int>{0, 0, 1, -1, 1});
                 return Instance{[prior](Graph&, std::span<const Var> p) {
                                   return contrastive_loss(cosine_similarity_matrix(p[0]), prior);
                                 },
                                 {{"features", uniform({5, 3}, rng)}}, 1e-6};
               }});
  m.push_back({"relation_bias+rsa_forward", kCompositeTol, [](Rng& rng) {
                 constexpr std::size_t c = 8, heads = 2, d = 4;
                 ParamStore store;
                 init_rsa(store, "rsa", c, heads, d, rng);
                 std::vector<BBox> boxes;
                 for (int k = 0; k < 4; ++k) {
                   BBox b;
                   for (int a = 0; a < 3; ++a) {
                     b.center[a] = rng.uniform(0, 2);
                     b.extent[a] = rng.uniform(0.2, 1.0);
                   }
                   boxes.push_back(b);
                 }
                 std::vector<NamedTensor> params{{"queries", uniform({4, c}, rng)}};
                 for (auto& p : store_params(store, rng)) params.push_back(std::move(p));
                 const Tensor proj = uniform({4, c}, rng);
                 const auto names = param_names(params);
                 return Instance{[boxes, proj, names](Graph& g, std::span<const Var> v) {
                                   BoundParams bp(g, names, v);
                                   return sum_all(mul(rsa_forward(v[0], boxes, bind_rsa(bp, "rsa", heads, d)),
                                                      g.constant(proj)));
                                 },
                                 params, 1e-6};
               }});
  m.push_back({"superpoint_refine", kCompositeTol, [](Rng& rng) {
                 const DecoderConfig cfg = toy_decoder();
                 ParamStore full = init_decoder(cfg, static_cast<std::uint64_t>(rng.next() % 1000) + 1);
                 std::vector<NamedTensor> params{{"superpoints", uniform({6, cfg.width}, rng)},
                                                 {"queries", uniform({cfg.queries, cfg.width}, rng)}};
                 for (auto& p : store_params(full, rng))
                   if (p.name.rfind("refine0.", 0) == 0) params.push_back(std::move(p));
                 const Tensor proj = uniform({6, cfg.width}, rng);
                 const auto names = param_names(params);
                 return Instance{[cfg, proj, names](Graph& g, std::span<const Var> v) {
                                   BoundParams bp(g, names, v);
                                   const auto cross = [&](const char* part) {
                                     return bind_linear(bp, std::string("refine0.cross.") + part);
                                   };
                                   const RefineParams rp{
                                       {cross("query"), cross("key"), cross("value"), cross("output"),
                                        bind_norm(bp, "refine0.cross.norm")},
                                       {bind_linear(bp, "refine0.ffn.hidden"), bind_linear(bp, "refine0.ffn.output"),
                                        bind_norm(bp, "refine0.ffn.norm")}};
                                   return sum_all(mul(superpoint_refine(v[0], v[1], rp, cfg.heads), g.constant(proj)));
                                 },
                                 params};
               }});
  m.push_back({"dice_loss", kElementwiseTol, [](Rng& rng) {
                 const Tensor target = binary({3, 5}, rng);
                 return Instance{[target](Graph&, std::span<const Var> p) { return dice_loss_rows(p[0], target); },
                                 {{"prob", uniform({3, 5}, rng, 0.05, 0.95)}}};
               }});
  m.push_back({"bce_loss", kElementwiseTol, [](Rng& rng) {
                 const Tensor target = binary({3, 5}, rng);
                 return Instance{[target](Graph&, std::span<const Var> p) { return bce_with_logits_mean(p[0], target); },
                                 {{"logits", uniform({3, 5}, rng, -4, 4)}}};
               }});
  m.push_back({"ce_loss", kElementwiseTol, [](Rng& rng) {
                 std::vector<int> target;
                 for (int i = 0; i < 4; ++i) target.push_back(rng.uniform_int(0, 2));
                 return Instance{[target](Graph&, std::span<const Var> p) { return cross_entropy_rows(p[0], target); },
                                 {{"logits", uniform({4, 3}, rng, -2, 2)}}};
               }});
  m.push_back({"decoder_1layer", kCompositeTol, [](Rng& rng) {
                 const DecoderConfig cfg = toy_decoder();
                 auto scene = std::make_shared<Scene>(toy_scene(rng));
                 auto in = std::make_shared<SceneInput>(prepare_scene(*scene));
                 ParamStore store = init_decoder(cfg, static_cast<std::uint64_t>(rng.next() % 1000) + 1);
                 // Position heads start at zero; perturb them so their gradients are exercised.
                 for (double& v : store.at("layer0.position.weight").data) v = rng.uniform(-0.3, 0.3);
                 for (double& v : store.at("query.position").data) v = rng.uniform(0.2, 0.8);
                 const auto params = store_params(store, rng);
                 Graph g0;
                 BoundParams bp0(g0, store);
                 // Boxes are stop-gradient; hold them at their unperturbed values.
                 const auto boxes = decoder_forward(*in, bind_decoder(bp0, cfg), cfg).boxes;
                 const std::size_t k = cfg.queries, m = in->partition.superpoints();
                 const Tensor w_cls = uniform({k, cfg.category_count + 1}, rng), w_mask = uniform({k, m}, rng);
                 const Tensor w_score = uniform({k, 1}, rng), w_center = uniform({k, 3}, rng);
                 const Tensor w_tap = uniform({m, cfg.width}, rng);
                 const auto names = param_names(params);
                 return Instance{[=](Graph& g, std::span<const Var> v) {
                                   BoundParams bp(g, names, v);
                                   const DecoderOutput out = decoder_forward(*in, bind_decoder(bp, cfg), cfg, &boxes);
                                   (void)scene;
                                   std::vector<Var> terms;
                                   for (const auto& pred : out.layers) {
                                     terms.push_back(sum_all(mul(pred.class_logits, g.constant(w_cls))));
                                     terms.push_back(sum_all(mul(pred.mask_logits, g.constant(w_mask))));
                                     terms.push_back(sum_all(mul(pred.score, g.constant(w_score))));
                                     terms.push_back(sum_all(mul(pred.center, g.constant(w_center))));
                                   }
                                   for (const auto& tap : out.contrastive_taps)
                                     terms.push_back(sum_all(mul(tap, g.constant(w_tap))));
                                   const std::vector<double> ones(terms.size(), 1.0);
                                   return weighted_sum(terms, ones);
                                 },
                                 params};
               }});
  return m;
}

}  // namespace

std::vector<std::string> grad_suite_modules() {
  std::vector<std::string> names;
  for (const auto& m : modules()) names.push_back(m.name);
  return names;
}

GradSuiteReport run_grad_suite(std::span<const std::uint64_t> seeds) {
  const auto start = std::chrono::steady_clock::now();
  GradSuiteReport report;
  report.passed = true;
  std::uint64_t stream = 0;
  for (const Module& m : modules()) {
    ++stream;
    for (std::uint64_t seed : seeds) {
      Rng rng(seed, stream);
      const Instance inst = m.build(rng);
      const GradCheckReport r = grad_check(inst.fn, inst.params, inst.eps, m.tolerance);
      GradSuiteCase c;
      c.module = m.name;
      c.seed = seed;
      c.tolerance = m.tolerance;
      c.worst_rel_error = r.worst_rel_error();
      for (const auto& p : inst.params) c.scalars += p.value.size();
      c.passed = r.passed;
      report.passed = report.passed && c.passed;
      report.cases.push_back(std::move(c));
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace r3d
