#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <vector>

#include "r3d/contrastive.hpp"
#include "r3d/decoder.hpp"
#include "r3d/eval.hpp"

namespace r3d {

// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double ce = 0.5;
  double bce = 1.0;
  double dice = 1.0;
  double center = 0.5;
  double score = 0.5;
  double cont = 1.0;
  bool operator==(const LossWeights&) const = default;
};

// Superpoint-level targets of one scene.
struct GroundTruth {
  std::vector<int> category;  // per instance
  Tensor masks;               // [G x M], majority superpoint assignment
  Tensor centers;             // [G x 3]
  std::vector<PointMask> point_masks;
  std::size_t instances() const { return category.size(); }
};

GroundTruth ground_truth(const SceneInput& in);

// cost(q, g) = w.ce * -log p_q(class_g) + w.bce * BCE(mask_q, mask_g)
//            + w.dice * dice(mask_q, mask_g) + w.center * |center_q - center_g|_1
Tensor match_cost(const LayerPrediction& pred, const GroundTruth& gt, const LossWeights& w);

struct MatchResult {
  std::vector<int> query_for_gt;    // per ground-truth instance
  std::vector<int> unmatched;       // ascending query indices
  double total_cost = 0.0;          // summed in ground-truth order
};

// Minimum-cost assignment of every ground truth (column) to a distinct query
// (row); among optimal assignments the lexicographically smallest sequence
// (g0's query, g1's query, ...) is returned. Requires K >= G.
MatchResult hungarian(const Tensor& cost);

// 1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)
double dice_loss(std::span<const double> prob, std::span<const double> gt);

struct LossBreakdown {
  double l_ce = 0.0, l_bce = 0.0, l_dice = 0.0, l_center = 0.0, l_score = 0.0, l_cont = 0.0;
  double total = 0.0;
};

struct LossOutput {
  Var total;
  LossBreakdown values;
};

struct LossOptions {
  LossWeights weights;
  bool supervise_layer0 = true;
  ContrastiveOptions contrastive;
};

LossOutput total_loss(const DecoderOutput& out, const SceneInput& in, const GroundTruth& gt,
                      const RelationPrior& prior, const LossOptions& opt);

// Mean of the contrastive loss over the given superpoint feature taps.
std::vector<double> contrastive_stage_losses(const DecoderOutput& out, const RelationPrior& prior,
                                             const ContrastiveOptions& opt = {});

double poly_lr(std::size_t step, std::size_t max_steps, double base_lr, double power);

struct TrainConfig {
  std::size_t epochs = 300;
  double base_lr = 0.0002;
  double lr_power = 0.9;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  bool supervise_layer0 = true;
  bool balance_contrastive = false;
  std::size_t eval_every = 1;
  // Extra steps per epoch on two training scenes placed side by side.
  std::size_t mix_pairs = 0;
  double mix_gap = 0.5;
  LossWeights weights;

  template <typename F>
  void fields(F&& f) {
    f("epochs", epochs);
    f("base_lr", base_lr);
    f("lr_power", lr_power);
    f("weight_decay", weight_decay);
    f("beta1", beta1);
    f("beta2", beta2);
    f("adam_eps", adam_eps);
    f("grad_clip", grad_clip);
    f("seed", seed);
    f("supervise_layer0", supervise_layer0);
    f("balance_contrastive", balance_contrastive);
    f("eval_every", eval_every);
    f("mix_pairs", mix_pairs);
    f("mix_gap", mix_gap);
    f("lambda_ce", weights.ce);
    f("lambda_bce", weights.bce);
    f("lambda_dice", weights.dice);
    f("lambda_center", weights.center);
    f("lambda_score", weights.score);
    f("lambda_cont", weights.cont);
  }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Adam moments with decoupled weight decay on linear weight matrices
// (names ending in ".weight").
class AdamW {
 public:
  AdamW(const ParamStore& params, const TrainConfig& cfg);
  // Clips the global gradient norm, then updates params in place. Returns
  // the pre-clip norm.
  double step(ParamStore& params, const ParamStore& grads, double lr);

 private:
  TrainConfig cfg_;
  ParamStore m_, v_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;  // means over the epoch's steps
  double ap25 = 0.0, ap50 = 0.0, map = 0.0;
  bool evaluated = false;
};

std::string epoch_log_json(const EpochLog& e);

struct TrainResult {
  ParamStore params;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Batch of one scene per step, scene order reshuffled each epoch from the
// seed. Metrics are computed on eval_scenes (the training scenes when
// empty). Throws DivergenceError on a non-finite loss.
TrainResult train(std::span<const Scene> scenes, std::span<const Scene> eval_scenes, const DecoderConfig& cfg,
                  const TrainConfig& tcfg, const InferConfig& icfg = {}, const EpochCallback& on_epoch = {});

}  // namespace r3d
