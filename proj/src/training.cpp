#include "r3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace r3d {

GroundTruth ground_truth(const SceneInput& in) {
  const Scene& scene = *in.scene;
  const auto summaries = instance_summaries(scene);
  auto points = gt_instances(scene);
  const std::size_t g = summaries.size(), m = in.partition.superpoints();
  GroundTruth gt;
  gt.masks = Tensor::matrix(g, m);
  gt.centers = Tensor::matrix(g, 3);
  for (std::size_t i = 0; i < g; ++i) {
    gt.category.push_back(summaries[i].semantic_label);
    for (int s : summaries[i].superpoints) gt.masks(i, static_cast<std::size_t>(s)) = 1.0;
    for (std::size_t a = 0; a < 3; ++a) gt.centers(i, a) = summaries[i].center[a];
    gt.point_masks.push_back(std::move(points[i].mask));
  }
  return gt;
}

double dice_loss(std::span<const double> prob, std::span<const double> gt) {
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    inter += prob[i] * gt[i];
    sp += prob[i];
    sg += gt[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0);
}

Tensor match_cost(const LayerPrediction& pred, const GroundTruth& gt, const LossWeights& w) {
  const Tensor& logits = pred.class_logits.value();
  const Tensor& masks = pred.mask_logits.value();
  const Tensor& centers = pred.center.value();
  const std::size_t k = logits.rows(), g = gt.instances(), m = masks.cols();
  if (gt.masks.cols() != m && g > 0) throw ShapeError("match_cost: mask width differs from ground truth");
  Tensor cost = Tensor::matrix(k, g);
  std::vector<double> prob(m);
  for (std::size_t q = 0; q < k; ++q) {
    const auto row = logits.row(q);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t s = 0; s < m; ++s) prob[s] = 1.0 / (1.0 + std::exp(-masks(q, s)));
    for (std::size_t j = 0; j < g; ++j) {
      const double ce = log_z - row[static_cast<std::size_t>(gt.category[j])];
      double bce = 0.0;
      for (std::size_t s = 0; s < m; ++s) {
        const double x = masks(q, s);
        bce += std::max(x, 0.0) - x * gt.masks(j, s) + std::log1p(std::exp(-std::abs(x)));
      }
      bce /= static_cast<double>(m);
      const double dice = dice_loss(prob, gt.masks.row(j));
      double l1 = 0.0;
      for (std::size_t a = 0; a < 3; ++a) l1 += std::abs(centers(q, a) - gt.centers(j, a));
      cost(q, j) = w.ce * ce + w.bce * bce + w.dice * dice + w.center * l1;
    }
  }
  return cost;
}

namespace {

// Minimum-cost assignment of every row of a (rows <= cols) matrix to a
// distinct column; returns the column of each row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0) return {};
  const std::size_t m = a[0].size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col(n, -1);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) col[p[j] - 1] = static_cast<int>(j - 1);
  return col;
}

double assignment_cost(const std::vector<std::vector<double>>& a, const std::vector<int>& col) {
  double total = 0.0;
  for (std::size_t i = 0; i < col.size(); ++i) total += a[i][static_cast<std::size_t>(col[i])];
  return total;
}

}  // namespace

MatchResult hungarian(const Tensor& cost) {
  require_matrix(cost, "hungarian");
  const std::size_t k = cost.rows(), g = cost.cols();
  if (k < g) {
    throw ContractError("hungarian: " + std::to_string(g) + " ground-truth instances exceed " + std::to_string(k) +
                        " queries");
  }
  if (!cost.all_finite()) throw ContractError("hungarian: non-finite cost");
  MatchResult result;
  if (g > 0) {
    // Rows are ground truths, columns queries.
    std::vector<std::vector<double>> a(g, std::vector<double>(k));
    for (std::size_t q = 0; q < k; ++q)
      for (std::size_t j = 0; j < g; ++j) a[j][q] = cost(q, j);
    std::vector<int> best = solve_assignment(a);
    const double optimum = assignment_cost(a, best);
    const double tol = 1e-9 * (1.0 + std::abs(optimum));

    // Lexicographic refinement: fix g0, g1, ... to the smallest query that
    // still admits an optimal completion.
    std::vector<char> taken(k, 0);
    double fixed_cost = 0.0;
    for (std::size_t j = 0; j < g; ++j) {
      for (std::size_t q = 0; q < static_cast<std::size_t>(best[j]); ++q) {
        if (taken[q]) continue;
        std::vector<std::size_t> cols;
        for (std::size_t c = 0; c < k; ++c)
          if (!taken[c] && c != q) cols.push_back(c);
        std::vector<std::vector<double>> sub;
        for (std::size_t r = j + 1; r < g; ++r) {
          sub.emplace_back();
          for (std::size_t c : cols) sub.back().push_back(a[r][c]);
        }
        const std::vector<int> rest = solve_assignment(sub);
        const double total = fixed_cost + a[j][q] + assignment_cost(sub, rest);
        if (total <= optimum + tol) {
          best[j] = static_cast<int>(q);
          for (std::size_t r = 0; r < rest.size(); ++r) best[j + 1 + r] = static_cast<int>(cols[static_cast<std::size_t>(rest[r])]);
          break;
        }
      }
      taken[static_cast<std::size_t>(best[j])] = 1;
      fixed_cost += a[j][static_cast<std::size_t>(best[j])];
    }
    result.query_for_gt = best;
    result.total_cost = assignment_cost(a, best);
  }
  std::vector<char> used(k, 0);
  for (int q : result.query_for_gt) used[static_cast<std::size_t>(q)] = 1;
  for (std::size_t q = 0; q < k; ++q)
    if (!used[q]) result.unmatched.push_back(static_cast<int>(q));
  return result;
}

std::vector<double> contrastive_stage_losses(const DecoderOutput& out, const RelationPrior& prior,
                                             const ContrastiveOptions& opt) {
  std::vector<double> values;
  for (const Var& tap : out.contrastive_taps)
    values.push_back(contrastive_loss(cosine_similarity_matrix(tap), prior, opt).value().item());
  return values;
}

LossOutput total_loss(const DecoderOutput& out, const SceneInput& in, const GroundTruth& gt,
                      const RelationPrior& prior, const LossOptions& opt) {
  if (out.layers.empty()) throw ContractError("total_loss: no prediction layers");
  Graph& g = out.layers.front().class_logits.graph();
  const Var zero = g.constant(Tensor::scalar(0.0));
  const std::size_t first = opt.supervise_layer0 && out.layers.size() > 0 ? 0 : 1;
  const std::size_t start = std::min(first, out.layers.size() - 1);
  const std::size_t n_layers = out.layers.size() - start;
  const std::size_t n_gt = gt.instances();
  const auto point_sp = in.partition.point_to_superpoint();

  std::vector<Var> ce, bce, dice, center, score;
  for (std::size_t l = start; l < out.layers.size(); ++l) {
    const LayerPrediction& pred = out.layers[l];
    const std::size_t k = pred.class_logits.rows();
    const int no_object = static_cast<int>(pred.class_logits.cols()) - 1;
    std::vector<int> targets(k, no_object);
    if (n_gt == 0) {
      ce.push_back(cross_entropy_rows(pred.class_logits, targets));
      bce.push_back(zero);
      dice.push_back(zero);
      center.push_back(zero);
      score.push_back(zero);
      continue;
    }
    const MatchResult match = hungarian(match_cost(pred, gt, opt.weights));
    for (std::size_t j = 0; j < n_gt; ++j) targets[static_cast<std::size_t>(match.query_for_gt[j])] = gt.category[j];
    ce.push_back(cross_entropy_rows(pred.class_logits, targets));
    const Var logits = gather_rows(pred.mask_logits, match.query_for_gt);
    bce.push_back(bce_with_logits_mean(logits, gt.masks));
    dice.push_back(dice_loss_rows(sigmoid(logits), gt.masks));
    center.push_back(l1_rows(gather_rows(pred.center, match.query_for_gt), gt.centers));

    Tensor iou = Tensor::matrix(n_gt, 1);
    const Tensor& ml = logits.value();
    PointMask predicted(point_sp.size());
    for (std::size_t j = 0; j < n_gt; ++j) {
      for (std::size_t i = 0; i < point_sp.size(); ++i) predicted[i] = ml(j, static_cast<std::size_t>(point_sp[i])) > 0.0;
      iou(j, 0) = mask_iou(predicted, gt.point_masks[j]);
    }
    score.push_back(mse_mean(gather_rows(pred.score, match.query_for_gt), iou));
  }
  const std::vector<double> layer_mean(n_layers, 1.0 / static_cast<double>(n_layers));
  const Var l_ce = weighted_sum(ce, layer_mean);
  const Var l_bce = weighted_sum(bce, layer_mean);
  const Var l_dice = weighted_sum(dice, layer_mean);
  const Var l_center = weighted_sum(center, layer_mean);
  const Var l_score = weighted_sum(score, layer_mean);

  Var l_cont = zero;
  if (!out.contrastive_taps.empty()) {
    std::vector<Var> taps;
    for (const Var& tap : out.contrastive_taps)
      taps.push_back(contrastive_loss(cosine_similarity_matrix(tap), prior, opt.contrastive));
    const std::vector<double> tap_mean(taps.size(), 1.0 / static_cast<double>(taps.size()));
    l_cont = weighted_sum(taps, tap_mean);
  }

  const LossWeights& w = opt.weights;
  const std::vector<Var> terms{l_ce, l_bce, l_dice, l_center, l_score, l_cont};
  const std::vector<double> lambdas{w.ce, w.bce, w.dice, w.center, w.score, w.cont};
  LossOutput result{weighted_sum(terms, lambdas), {}};
  LossBreakdown& b = result.values;
  b.l_ce = l_ce.value().item();
  b.l_bce = l_bce.value().item();
  b.l_dice = l_dice.value().item();
  b.l_center = l_center.value().item();
  b.l_score = l_score.value().item();
  b.l_cont = l_cont.value().item();
  b.total = result.total.value().item();
  return result;
}

double poly_lr(std::size_t step, std::size_t max_steps, double base_lr, double power) {
  if (step > max_steps) throw ContractError("poly_lr: step beyond max_steps");
  if (max_steps == 0) return base_lr;
  return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(max_steps), power);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(base_lr >= 0)) fail("base_lr must be non-negative");
  if (!(lr_power > 0)) fail("lr_power must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(grad_clip >= 0)) fail("grad_clip must be non-negative (0 disables)");
  if (eval_every < 1) fail("eval_every must be at least 1");
  if (!(mix_gap >= 0)) fail("mix_gap must be non-negative");
}

AdamW::AdamW(const ParamStore& params, const TrainConfig& cfg) : cfg_(cfg) {
  for (const auto& name : params.names()) {
    m_.add(name, Tensor(params.at(name).shape));
    v_.add(name, Tensor(params.at(name).shape));
  }
}

double AdamW::step(ParamStore& params, const ParamStore& grads, double lr) {
  double sq = 0.0;
  for (const auto& name : grads.names())
    for (double g : grads.at(name).data) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    Tensor& p = params.at(name);
    const Tensor& g = grads.at(name);
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    const bool decay = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.data[i] * clip;
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
      if (decay) p.data[i] -= lr * cfg_.weight_decay * p.data[i];
      p.data[i] -= lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + cfg_.adam_eps);
    }
  }
  return norm;
}

std::string epoch_log_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["l_ce"] = e.loss.l_ce;
  j["l_bce"] = e.loss.l_bce;
  j["l_dice"] = e.loss.l_dice;
  j["l_center"] = e.loss.l_center;
  j["l_score"] = e.loss.l_score;
  j["l_cont"] = e.loss.l_cont;
  j["total"] = e.loss.total;
  if (e.evaluated) {
    j["ap25"] = e.ap25;
    j["ap50"] = e.ap50;
    j["map"] = e.map;
  } else {
    j["ap25"] = nullptr;
    j["ap50"] = nullptr;
    j["map"] = nullptr;
  }
  return j.dump();
}

TrainResult train(std::span<const Scene> scenes, std::span<const Scene> eval_scenes, const DecoderConfig& cfg,
                  const TrainConfig& tcfg, const InferConfig& icfg, const EpochCallback& on_epoch) {
  cfg.validate();
  tcfg.validate();
  if (scenes.empty()) throw ConfigError("train: empty training set");
  std::vector<SceneInput> inputs;
  std::vector<GroundTruth> truths;
  std::vector<RelationPrior> priors;
  for (const Scene& s : scenes) {
    inputs.push_back(prepare_scene(s));
    truths.push_back(ground_truth(inputs.back()));
    if (truths.back().instances() > cfg.queries) {
      throw ConfigError("train: a scene has " + std::to_string(truths.back().instances()) + " instances but only " +
                        std::to_string(cfg.queries) + " queries");
    }
    priors.push_back(relation_prior(s));
  }
  const std::span<const Scene> metric_scenes = eval_scenes.empty() ? scenes : eval_scenes;

  TrainResult result{init_decoder(cfg, tcfg.seed), {}};
  AdamW optimizer(result.params, tcfg);
  LossOptions lopt;
  lopt.weights = tcfg.weights;
  lopt.supervise_layer0 = tcfg.supervise_layer0;
  lopt.contrastive.balance_classes = tcfg.balance_contrastive;

  struct Sample {
    SceneInput input;
    GroundTruth truth;
    RelationPrior prior;
  };
  std::vector<std::size_t> instance_counts;
  for (const GroundTruth& t : truths) instance_counts.push_back(t.instances());

  const std::size_t steps_per_epoch = scenes.size() + tcfg.mix_pairs;
  const std::size_t total_steps = tcfg.epochs * steps_per_epoch;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    Rng rng(tcfg.seed, epoch);
    // Mixed scenes are drawn first so the shuffle below covers both kinds.
    std::vector<Scene> mixed_scenes;
    std::vector<Sample> mixed;
    if (scenes.size() > 1) {
      for (std::size_t m = 0; m < tcfg.mix_pairs; ++m) {
        const auto a = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(scenes.size()) - 1));
        auto b = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(scenes.size()) - 2));
        if (b >= a) ++b;
        if (instance_counts[a] + instance_counts[b] > cfg.queries) continue;
        mixed_scenes.push_back(concatenate_scenes(scenes[a], scenes[b], tcfg.mix_gap));
      }
    }
    for (const Scene& s : mixed_scenes) {
      Sample sample{prepare_scene(s), {}, relation_prior(s)};
      sample.truth = ground_truth(sample.input);
      mixed.push_back(std::move(sample));
    }
    std::vector<std::size_t> order(scenes.size() + mixed.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = poly_lr(step, total_steps, tcfg.base_lr, tcfg.lr_power);
    for (std::size_t idx : order) {
      const bool real = idx < scenes.size();
      const SceneInput& in = real ? inputs[idx] : mixed[idx - scenes.size()].input;
      const GroundTruth& truth = real ? truths[idx] : mixed[idx - scenes.size()].truth;
      const RelationPrior& prior = real ? priors[idx] : mixed[idx - scenes.size()].prior;
      Graph g;
      BoundParams bp(g, result.params);
      const DecoderOutput out = decoder_forward(in, bind_decoder(bp, cfg), cfg);
      for (const LayerPrediction& pred : out.layers) {
        if (!pred.class_logits.value().all_finite() || !pred.mask_logits.value().all_finite() ||
            !pred.center.value().all_finite()) {
          throw DivergenceError("train: non-finite predictions at epoch " + std::to_string(epoch));
        }
      }
      const LossOutput loss = total_loss(out, in, truth, prior, lopt);
      if (!std::isfinite(loss.values.total)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      g.backward(loss.total);
      optimizer.step(result.params, bp.gradients(), poly_lr(step, total_steps, tcfg.base_lr, tcfg.lr_power));
      ++step;
      LossBreakdown& acc = entry.loss;
      acc.l_ce += loss.values.l_ce;
      acc.l_bce += loss.values.l_bce;
      acc.l_dice += loss.values.l_dice;
      acc.l_center += loss.values.l_center;
      acc.l_score += loss.values.l_score;
      acc.l_cont += loss.values.l_cont;
      acc.total += loss.values.total;
    }
    const double inv = 1.0 / static_cast<double>(order.size());
    for (double* v : {&entry.loss.l_ce, &entry.loss.l_bce, &entry.loss.l_dice, &entry.loss.l_center,
                      &entry.loss.l_score, &entry.loss.l_cont, &entry.loss.total})
      *v *= inv;
    if (epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs) {
      const EvalReport report = evaluate_model(metric_scenes, result.params, cfg, icfg);
      entry.evaluated = true;
      entry.ap25 = report.ap25;
      entry.ap50 = report.ap50;
      entry.map = report.map;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

}  // namespace r3d
