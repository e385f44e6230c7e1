#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "r3d/decoder.hpp"

namespace r3d {

struct InferConfig {
  double nms_iou = 0.75;
  double min_confidence = 0.05;
  double mask_threshold = 0.5;

  template <typename F>
  void fields(F&& f) {
    f("nms_iou", nms_iou);
    f("min_confidence", min_confidence);
    f("mask_threshold", mask_threshold);
  }
  void validate() const;
  bool operator==(const InferConfig&) const = default;
};

using PointMask = std::vector<std::uint8_t>;

struct InstancePrediction {
  int category = -1;
  double confidence = 0.0;  // class probability x score head
  PointMask mask;           // one entry per point
  int query = -1;
};

// Argmax category per query; drops no-object, empty-mask and low-confidence
// queries. Superpoint masks are binarised and broadcast to points.
std::vector<InstancePrediction> extract_instances(const LayerPrediction& pred, const SceneInput& in,
                                                  const InferConfig& cfg);

// |a and b| / |a or b|; 0 when both are empty.
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

// Greedy per-category suppression by descending confidence (ties by lower
// query index): keeps an instance iff its IoU with every kept instance of the
// same category is <= iou_thr.
std::vector<InstancePrediction> nms(std::vector<InstancePrediction> insts, double iou_thr);

struct GtInstance {
  int category = -1;
  PointMask mask;
};

// Point-level ground-truth masks, one per instance id >= 0, ascending.
std::vector<GtInstance> gt_instances(const Scene& scene);

struct SceneResult {
  std::vector<InstancePrediction> predictions;
  std::vector<GtInstance> gts;
  std::uint64_t key = 0;  // content hash, orders equal-confidence predictions across scenes
};

std::uint64_t scene_key(const Scene& scene);

// All-point interpolated AP of one category over all scenes; nullopt when
// the category has no ground truth.
std::optional<double> average_precision(std::span<const SceneResult> scenes, double iou_thr, int category);

struct CategoryAp {
  double ap25 = 0.0;
  double ap50 = 0.0;
  double map = 0.0;  // mean over 0.50:0.05:0.95
  bool operator==(const CategoryAp&) const = default;
};

struct EvalReport {
  std::map<int, CategoryAp> categories;  // only categories with ground truth
  double map = 0.0;
  double ap50 = 0.0;
  double ap25 = 0.0;
  std::size_t scenes = 0;
  std::size_t predictions = 0;
  std::size_t ground_truths = 0;
  bool operator==(const EvalReport&) const = default;
};

// Thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> map_thresholds();

EvalReport evaluate(std::span<const SceneResult> results, int category_count);

// Final-layer inference on one scene, after NMS.
std::vector<InstancePrediction> infer_scene(const SceneInput& in, const ParamStore& params, const DecoderConfig& cfg,
                                            const InferConfig& icfg);

EvalReport evaluate_model(std::span<const Scene> scenes, const ParamStore& params, const DecoderConfig& cfg,
                          const InferConfig& icfg);

// Per-point instance index into insts (highest confidence wins), -1 if none.
std::vector<int> point_labels(const std::vector<InstancePrediction>& insts, std::size_t points);

struct AttentionHistogram {
  std::vector<double> edges;          // bins + 1 edges over (low, 1]
  std::vector<std::size_t> counts;
  std::size_t excluded = 0;           // weights in [0, low]
  std::size_t total = 0;
};

// Histogram of attention weights per decoder layer, excluding [0, low].
std::vector<AttentionHistogram> attention_histograms(const DecoderOutput& out, double low = 0.03, std::size_t bins = 20);

}  // namespace r3d
