#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "r3d/asam.hpp"
#include "r3d/rsa.hpp"
#include "r3d/scene.hpp"

namespace r3d {

struct DecoderConfig {
  std::size_t queries = 8;           // K
  std::size_t width = 32;            // C
  std::size_t heads = 8;             // H
  std::size_t layers = 6;            // L
  std::size_t refine_interval = 3;   // r; refinement after layers r, 2r, ... <= L
  std::size_t sincos_dim = 8;        // lifting width per relation channel
  std::size_t position_dim = 16;     // lifting width per coordinate
  double position_scale = 10.0;      // radians per metre at the highest frequency
  double mask_threshold = 0.5;
  int category_count = 4;
  std::size_t ffn_multiplier = 4;
  bool use_asam = true;
  bool use_rsa = true;
  bool use_clsr = true;

  template <typename F>
  void fields(F&& f) {
    f("queries", queries);
    f("width", width);
    f("heads", heads);
    f("layers", layers);
    f("refine_interval", refine_interval);
    f("sincos_dim", sincos_dim);
    f("position_dim", position_dim);
    f("position_scale", position_scale);
    f("mask_threshold", mask_threshold);
    f("category_count", category_count);
    f("ffn_multiplier", ffn_multiplier);
    f("use_asam", use_asam);
    f("use_rsa", use_rsa);
    f("use_clsr", use_clsr);
  }
  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

// Per-scene constants shared by every forward pass over that scene.
struct SceneInput {
  const Scene* scene = nullptr;
  SuperpointPartition partition;
  Bounds bounds;
  Tensor point_features;  // [N x 9]: unit-cube position, color, normal
  Tensor centroids;       // [M x 3]
};

SceneInput prepare_scene(const Scene& scene);

void init_decoder(ParamStore& store, const DecoderConfig& cfg, Rng& rng);
ParamStore init_decoder(const DecoderConfig& cfg, std::uint64_t seed);

struct QuerySet {
  Var content;         // [K x C]
  Var position_unit;   // [K x 3]
  Var position_world;  // [K x 3], clamped to the scene bounds
};

struct LayerPrediction {
  Var class_logits;  // [K x (categories + 1)], last column is no-object
  Var mask_logits;   // [K x M]
  Var score;         // [K x 1], in (0, 1)
  Var center;        // [K x 3]
};

struct AttentionBlock {
  LinearParams query, key, value, output;
  NormParams norm;
};

struct FeedForward {
  LinearParams hidden, output;
  NormParams norm;
  Var operator()(const Var& x) const { return norm(x + output(relu(hidden(x)))); }
};

struct RefineParams {
  AttentionBlock cross;
  FeedForward ffn;
};

struct HeadParams {
  LinearParams category, mask, score;
};

struct DecoderLayerParams {
  AttentionBlock cross;
  RsaParams rsa;
  FeedForward ffn;
  LinearParams position;  // C -> 3, world-space offset
};

struct DecoderParams {
  MlpParams encoder;
  AsamParams asam;
  Var query_content;
  Var query_position;
  LinearParams position_embed;  // 3 * position_dim -> C
  std::vector<DecoderLayerParams> layers;
  std::vector<RefineParams> refine;  // one per refinement stage
  HeadParams heads;
};

DecoderParams bind_decoder(const BoundParams& p, const DecoderConfig& cfg);

std::size_t refinement_count(const DecoderConfig& cfg);

// Per-point MLP over the 9 input channels: [N x 9] -> [N x C].
Var encode_points(const SceneInput& in, const MlpParams& encoder);

// World positions from learnable unit positions: unit * (max - min) + min.
QuerySet init_queries(const Var& content, const Var& position_unit, const Bounds& bounds);

// Learned projection of the sine-cosine lifted world positions: [n x 3] -> [n x C].
Var position_embedding(const Var& world, const LinearParams& proj, const DecoderConfig& cfg);

// Queries attend to superpoints selected by prev_mask_prob > threshold;
// query and superpoint position embeddings are added to queries and keys.
Var mask_attention(const Var& queries, const Var& query_pos, const Var& superpoints, const Var& superpoint_pos,
                   const Tensor& prev_mask_prob, const AttentionBlock& p, std::size_t heads, double threshold);

// Superpoints attend to queries (no masking, no self-attention), then a
// feed-forward block.
Var superpoint_refine(const Var& superpoints, const Var& queries, const RefineParams& p, std::size_t heads);

LayerPrediction predict_heads(const Var& queries, const Var& superpoints, const Var& center, const HeadParams& p);

struct DecoderOutput {
  std::vector<LayerPrediction> layers;  // L + 1
  std::vector<Var> contrastive_taps;    // superpoint features after ASAM and each refinement
  std::vector<Tensor> self_attention;   // per decoder layer, [H x K x K]
  std::vector<std::vector<BBox>> boxes; // per decoder layer when RSA is on
  std::size_t refine_calls = 0;
};

// fixed_boxes, when given, replaces the per-layer boxes derived from the
// previous masks, so finite-difference checks see the same constants as
// the backward pass.
DecoderOutput decoder_forward(const SceneInput& in, const DecoderParams& p, const DecoderConfig& cfg,
                              const std::vector<std::vector<BBox>>* fixed_boxes = nullptr);

// Mask probabilities of one prediction as a plain tensor.
Tensor mask_probabilities(const LayerPrediction& pred);

std::string decoder_config_text(const DecoderConfig& cfg);
DecoderConfig decoder_config_from_text(const std::string& text);

// Versioned binary container: magic "R3DW", version, config text, then
// named blocks (name, shape, float64 payload).
void save_checkpoint(const std::filesystem::path& path, const DecoderConfig& cfg, const ParamStore& store);
struct Checkpoint {
  DecoderConfig config;
  ParamStore params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Rejects a checkpoint whose configuration differs from expected.
Checkpoint load_checkpoint(const std::filesystem::path& path, const DecoderConfig& expected);

}  // namespace r3d
