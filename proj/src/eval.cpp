#include "r3d/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace r3d {

void InferConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("eval config: " + what); };
  if (!(nms_iou >= 0 && nms_iou <= 1)) fail("nms_iou must lie in [0, 1]");
  if (!(min_confidence >= 0 && min_confidence <= 1)) fail("min_confidence must lie in [0, 1]");
  if (!(mask_threshold > 0 && mask_threshold < 1)) fail("mask_threshold must lie in (0, 1)");
}

std::vector<InstancePrediction> extract_instances(const LayerPrediction& pred, const SceneInput& in,
                                                  const InferConfig& cfg) {
  const Tensor& logits = pred.class_logits.value();
  const Tensor& masks = pred.mask_logits.value();
  const Tensor& score = pred.score.value();
  const std::size_t k = logits.rows(), classes = logits.cols();
  const int no_object = static_cast<int>(classes) - 1;
  const auto point_sp = in.partition.point_to_superpoint();
  // Logit threshold equivalent to sigmoid(x) > mask_threshold.
  const double logit_thr = std::log(cfg.mask_threshold / (1.0 - cfg.mask_threshold));

  std::vector<InstancePrediction> out;
  for (std::size_t q = 0; q < k; ++q) {
    const auto row = logits.row(q);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == no_object) continue;
    double z = 0.0;
    const double mx = row[static_cast<std::size_t>(best)];
    for (double v : row) z += std::exp(v - mx);
    const double confidence = (1.0 / z) * score.data[q];
    if (confidence < cfg.min_confidence) continue;
    InstancePrediction inst;
    inst.category = best;
    inst.confidence = confidence;
    inst.query = static_cast<int>(q);
    inst.mask.resize(point_sp.size());
    bool any = false;
    for (std::size_t i = 0; i < point_sp.size(); ++i) {
      inst.mask[i] = masks(q, static_cast<std::size_t>(point_sp[i])) > logit_thr;
      any = any || inst.mask[i];
    }
    if (any) out.push_back(std::move(inst));
  }
  return out;
}

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ShapeError("mask_iou: masks differ in length");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<InstancePrediction> nms(std::vector<InstancePrediction> insts, double iou_thr) {
  std::stable_sort(insts.begin(), insts.end(), [](const auto& a, const auto& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.query < b.query;
  });
  std::vector<InstancePrediction> kept;
  for (auto& inst : insts) {
    const bool keep = std::none_of(kept.begin(), kept.end(), [&](const InstancePrediction& k) {
      return k.category == inst.category && mask_iou(k.mask, inst.mask) > iou_thr;
    });
    if (keep) kept.push_back(std::move(inst));
  }
  return kept;
}

std::vector<GtInstance> gt_instances(const Scene& scene) {
  std::map<int, GtInstance> by_id;
  for (std::size_t i = 0; i < scene.point_count(); ++i) {
    const int id = scene.instance_id[i];
    if (id < 0) continue;
    GtInstance& gt = by_id[id];
    if (gt.mask.empty()) {
      gt.mask.assign(scene.point_count(), 0);
      gt.category = scene.semantic_label[i];
    }
    gt.mask[i] = 1;
  }
  std::vector<GtInstance> out;
  for (auto& [id, gt] : by_id) out.push_back(std::move(gt));
  return out;
}

std::uint64_t scene_key(const Scene& scene) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint8_t byte : scene_to_binary(scene)) {
    h ^= byte;
    h *= 1099511628211ull;
  }
  return h;
}

std::optional<double> average_precision(std::span<const SceneResult> scenes, double iou_thr, int category) {
  struct Ranked {
    double confidence;
    std::uint64_t key;
    std::size_t scene;
    const InstancePrediction* pred;
  };
  std::vector<Ranked> ranked;
  std::size_t gt_count = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (const auto& p : scenes[s].predictions)
      if (p.category == category) ranked.push_back({p.confidence, scenes[s].key, s, &p});
    for (const auto& g : scenes[s].gts) gt_count += g.category == category;
  }
  if (gt_count == 0) return std::nullopt;
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.key != b.key) return a.key < b.key;
    return a.pred->query < b.pred->query;
  });

  std::vector<std::vector<std::uint8_t>> used(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) used[s].assign(scenes[s].gts.size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto& gts = scenes[ranked[r].scene].gts;
    auto& taken = used[ranked[r].scene];
    double best_iou = -1.0;
    std::size_t best = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].category != category) continue;
      const double iou = mask_iou(ranked[r].pred->mask, gts[g].mask);
      if (iou >= iou_thr && iou > best_iou) {
        best_iou = iou;
        best = g;
      }
    }
    if (best < gts.size()) {
      taken[best] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

EvalReport evaluate(std::span<const SceneResult> results, int category_count) {
  EvalReport report;
  report.scenes = results.size();
  for (const auto& r : results) {
    report.predictions += r.predictions.size();
    report.ground_truths += r.gts.size();
  }
  const auto thresholds = map_thresholds();
  for (int c = 0; c < category_count; ++c) {
    const auto ap25 = average_precision(results, 0.25, c);
    if (!ap25) continue;
    CategoryAp cat;
    cat.ap25 = *ap25;
    double sum = 0.0;
    for (double t : thresholds) {
      const double ap = *average_precision(results, t, c);
      if (t == 0.5) cat.ap50 = ap;
      sum += ap;
    }
    cat.map = sum / static_cast<double>(thresholds.size());
    report.categories[c] = cat;
  }
  if (!report.categories.empty()) {
    for (const auto& [c, cat] : report.categories) {
      report.map += cat.map;
      report.ap50 += cat.ap50;
      report.ap25 += cat.ap25;
    }
    const auto n = static_cast<double>(report.categories.size());
    report.map /= n;
    report.ap50 /= n;
    report.ap25 /= n;
  }
  return report;
}

std::vector<InstancePrediction> infer_scene(const SceneInput& in, const ParamStore& params, const DecoderConfig& cfg,
                                            const InferConfig& icfg) {
  Graph g;
  BoundParams bp(g, params);
  const DecoderOutput out = decoder_forward(in, bind_decoder(bp, cfg), cfg);
  return nms(extract_instances(out.layers.back(), in, icfg), icfg.nms_iou);
}

EvalReport evaluate_model(std::span<const Scene> scenes, const ParamStore& params, const DecoderConfig& cfg,
                          const InferConfig& icfg) {
  std::vector<SceneResult> results;
  for (const Scene& s : scenes) {
    const SceneInput in = prepare_scene(s);
    results.push_back({infer_scene(in, params, cfg, icfg), gt_instances(s), scene_key(s)});
  }
  return evaluate(results, cfg.category_count);
}

std::vector<int> point_labels(const std::vector<InstancePrediction>& insts, std::size_t points) {
  std::vector<int> labels(points, -1);
  std::vector<double> best(points, -1.0);
  for (std::size_t k = 0; k < insts.size(); ++k) {
    if (insts[k].mask.size() != points) throw ShapeError("point_labels: mask length differs from point count");
    for (std::size_t i = 0; i < points; ++i)
      if (insts[k].mask[i] && insts[k].confidence > best[i]) {
        best[i] = insts[k].confidence;
        labels[i] = static_cast<int>(k);
      }
  }
  return labels;
}

std::vector<AttentionHistogram> attention_histograms(const DecoderOutput& out, double low, std::size_t bins) {
  std::vector<AttentionHistogram> hists;
  for (const Tensor& probs : out.self_attention) {
    AttentionHistogram h;
    for (std::size_t b = 0; b <= bins; ++b)
      h.edges.push_back(low + (1.0 - low) * static_cast<double>(b) / static_cast<double>(bins));
    h.counts.assign(bins, 0);
    for (double w : probs.data) {
      ++h.total;
      if (w <= low) {
        ++h.excluded;
        continue;
      }
      const auto b = static_cast<std::size_t>((w - low) / (1.0 - low) * static_cast<double>(bins));
      ++h.counts[std::min(b, bins - 1)];
    }
    hists.push_back(std::move(h));
  }
  return hists;
}

}  // namespace r3d
