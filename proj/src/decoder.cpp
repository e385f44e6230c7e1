#include "r3d/decoder.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "r3d/fields.hpp"

namespace r3d {

void DecoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("decoder config: " + what); };
  if (queries < 1) fail("queries must be positive");
  if (width < 1) fail("width must be positive");
  if (heads < 1 || width % heads != 0) fail("heads must divide width");
  if (refine_interval < 1) fail("refine_interval must be at least 1");
  if (sincos_dim < 2 || sincos_dim % 2 != 0) fail("sincos_dim must be even and positive");
  if (position_dim < 2 || position_dim % 2 != 0) fail("position_dim must be even and positive");
  if (!(position_scale > 0)) fail("position_scale must be positive");
  if (!(mask_threshold > 0 && mask_threshold < 1)) fail("mask_threshold must lie in (0, 1)");
  if (category_count < 1) fail("category_count must be positive");
  if (ffn_multiplier < 1) fail("ffn_multiplier must be positive");
}

SceneInput prepare_scene(const Scene& scene) {
  SceneInput in;
  in.scene = &scene;
  in.partition = SuperpointPartition::from_ids(scene.superpoint_id);
  in.bounds = scene_bounds(scene);
  const std::size_t n = scene.point_count();
  in.point_features = Tensor::matrix(n, 9);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 3; ++a) {
      const double span = in.bounds.max[a] - in.bounds.min[a];
      const double x = scene.positions[3 * i + a];
      in.point_features(i, a) = span > 0 ? (x - in.bounds.min[a]) / span : 0.0;
      if (scene.has_colors()) in.point_features(i, 3 + a) = scene.colors[3 * i + a];
      if (scene.has_normals()) in.point_features(i, 6 + a) = scene.normals[3 * i + a];
    }
  const std::size_t m = in.partition.superpoints();
  in.centroids = Tensor::matrix(m, 3);
  for (std::size_t s = 0; s < m; ++s) {
    const auto mem = in.partition.members(s);
    for (int p : mem)
      for (std::size_t a = 0; a < 3; ++a) in.centroids(s, a) += scene.positions[3 * static_cast<std::size_t>(p) + a];
    for (std::size_t a = 0; a < 3; ++a) in.centroids(s, a) /= static_cast<double>(mem.size());
  }
  return in;
}

std::size_t refinement_count(const DecoderConfig& cfg) {
  return cfg.use_clsr ? cfg.layers / cfg.refine_interval : 0;
}

namespace {

void init_attention(ParamStore& store, const std::string& prefix, std::size_t c, Rng& rng) {
  for (const char* name : {".query", ".key", ".value", ".output"}) init_linear(store, prefix + name, c, c, rng);
  init_norm(store, prefix + ".norm", c);
}

AttentionBlock bind_attention(const BoundParams& p, const std::string& prefix) {
  return {bind_linear(p, prefix + ".query"), bind_linear(p, prefix + ".key"), bind_linear(p, prefix + ".value"),
          bind_linear(p, prefix + ".output"), bind_norm(p, prefix + ".norm")};
}

void init_ffn(ParamStore& store, const std::string& prefix, std::size_t c, std::size_t hidden, Rng& rng) {
  init_linear(store, prefix + ".hidden", c, hidden, rng);
  init_linear(store, prefix + ".output", hidden, c, rng);
  init_norm(store, prefix + ".norm", c);
}

FeedForward bind_ffn(const BoundParams& p, const std::string& prefix) {
  return {bind_linear(p, prefix + ".hidden"), bind_linear(p, prefix + ".output"), bind_norm(p, prefix + ".norm")};
}

std::string layer_name(std::size_t l) { return "layer" + std::to_string(l); }
std::string refine_name(std::size_t s) { return "refine" + std::to_string(s); }

Var attend(const Var& q_in, const Var& k_in, const Var& v_in, const AttentionBlock& p, std::size_t heads,
           const std::vector<std::uint8_t>* allowed) {
  const Var q = split_heads(p.query(q_in), heads);
  const Var k = split_heads(p.key(k_in), heads);
  const Var v = split_heads(p.value(v_in), heads);
  return p.output(merge_heads(attention_core(q, k, v, nullptr, allowed)));
}

}  // namespace

void init_decoder(ParamStore& store, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.width;
  init_mlp(store, "encoder", {9, c, c}, rng);
  init_asam(store, "asam", c, rng);
  Tensor content = Tensor::matrix(cfg.queries, c);
  for (double& v : content.data) v = rng.uniform(-1.0, 1.0);
  store.add("query.content", std::move(content));
  Tensor position = Tensor::matrix(cfg.queries, 3);
  for (double& v : position.data) v = rng.uniform();
  store.add("query.position", std::move(position));
  init_linear(store, "position_embed", 3 * cfg.position_dim, c, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string name = layer_name(l);
    init_attention(store, name + ".cross", c, rng);
    init_rsa(store, name + ".rsa", c, cfg.heads, cfg.sincos_dim, rng);
    init_ffn(store, name + ".ffn", c, cfg.ffn_multiplier * c, rng);
    store.add(name + ".position.weight", Tensor::matrix(c, 3));
    store.add(name + ".position.bias", Tensor(Shape{3}));
  }
  for (std::size_t s = 0; s < refinement_count(cfg); ++s) {
    init_attention(store, refine_name(s) + ".cross", c, rng);
    init_ffn(store, refine_name(s) + ".ffn", c, cfg.ffn_multiplier * c, rng);
  }
  init_linear(store, "heads.category", c, static_cast<std::size_t>(cfg.category_count) + 1, rng);
  init_linear(store, "heads.mask", c, c, rng);
  init_linear(store, "heads.score", c, 1, rng);
}

ParamStore init_decoder(const DecoderConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  init_decoder(store, cfg, rng);
  return store;
}

DecoderParams bind_decoder(const BoundParams& p, const DecoderConfig& cfg) {
  DecoderParams d;
  d.encoder = bind_mlp(p, "encoder", 2);
  d.asam = bind_asam(p, "asam");
  d.query_content = p["query.content"];
  d.query_position = p["query.position"];
  d.position_embed = bind_linear(p, "position_embed");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string name = layer_name(l);
    d.layers.push_back({bind_attention(p, name + ".cross"), bind_rsa(p, name + ".rsa", cfg.heads, cfg.sincos_dim),
                        bind_ffn(p, name + ".ffn"), bind_linear(p, name + ".position")});
  }
  for (std::size_t s = 0; s < refinement_count(cfg); ++s)
    d.refine.push_back({bind_attention(p, refine_name(s) + ".cross"), bind_ffn(p, refine_name(s) + ".ffn")});
  d.heads = {bind_linear(p, "heads.category"), bind_linear(p, "heads.mask"), bind_linear(p, "heads.score")};
  return d;
}

Var encode_points(const SceneInput& in, const MlpParams& encoder) {
  Graph& g = encoder.layers.front().weight.graph();
  return encoder(g.constant(in.point_features));
}

QuerySet init_queries(const Var& content, const Var& position_unit, const Bounds& bounds) {
  require_matrix(position_unit.value(), "init_queries");
  if (position_unit.cols() != 3) throw ShapeError("init_queries: positions must be [K x 3]");
  Graph& g = position_unit.graph();
  Tensor span = Tensor::matrix(position_unit.rows(), 3);
  for (std::size_t k = 0; k < span.rows(); ++k)
    for (std::size_t a = 0; a < 3; ++a) span(k, a) = bounds.max[a] - bounds.min[a];
  const Var lo = g.constant(Tensor(Shape{3}, {bounds.min[0], bounds.min[1], bounds.min[2]}));
  const Var world = add_row(position_unit * g.constant(std::move(span)), lo);
  return {content, position_unit, clamp_cols(world, bounds.min, bounds.max)};
}

Var position_embedding(const Var& world, const LinearParams& proj, const DecoderConfig& cfg) {
  return proj(sincos_encode(scale(world, cfg.position_scale), cfg.position_dim));
}

Var mask_attention(const Var& queries, const Var& query_pos, const Var& superpoints, const Var& superpoint_pos,
                   const Tensor& prev_mask_prob, const AttentionBlock& p, std::size_t heads, double threshold) {
  if (prev_mask_prob.rows() != queries.rows() || prev_mask_prob.cols() != superpoints.rows()) {
    throw ShapeError("mask_attention: mask " + shape_str(prev_mask_prob.shape) + " for " +
                     std::to_string(queries.rows()) + " queries and " + std::to_string(superpoints.rows()) +
                     " superpoints");
  }
  std::vector<std::uint8_t> allowed(prev_mask_prob.size());
  for (std::size_t i = 0; i < allowed.size(); ++i) allowed[i] = prev_mask_prob.data[i] > threshold;
  return p.norm(queries + attend(queries + query_pos, superpoints + superpoint_pos, superpoints, p, heads, &allowed));
}

Var superpoint_refine(const Var& superpoints, const Var& queries, const RefineParams& p, std::size_t heads) {
  if (superpoints.cols() != queries.cols()) throw ShapeError("superpoint_refine: width mismatch");
  return p.ffn(p.cross.norm(superpoints + attend(superpoints, queries, queries, p.cross, heads, nullptr)));
}

LayerPrediction predict_heads(const Var& queries, const Var& superpoints, const Var& center, const HeadParams& p) {
  return {p.category(queries), matmul_nt(p.mask(queries), superpoints), sigmoid(p.score(queries)), center};
}

Tensor mask_probabilities(const LayerPrediction& pred) {
  Tensor prob = pred.mask_logits.value();
  for (double& v : prob.data) v = 1.0 / (1.0 + std::exp(-v));
  return prob;
}

DecoderOutput decoder_forward(const SceneInput& in, const DecoderParams& p, const DecoderConfig& cfg,
                              const std::vector<std::vector<BBox>>* fixed_boxes) {
  Graph& g = p.query_content.graph();
  const SuperpointPartition& part = in.partition;
  DecoderOutput out;

  const Var point_features = encode_points(in, p.encoder);
  Var superpoints = cfg.use_asam ? asam_forward(point_features, part, p.asam).features
                                 : scatter_pool(point_features, part, PoolMode::kMean);
  if (cfg.use_clsr) out.contrastive_taps.push_back(superpoints);
  const Var superpoint_pos = position_embedding(g.constant(in.centroids), p.position_embed, cfg);

  const QuerySet init = init_queries(p.query_content, p.query_position, in.bounds);
  Var queries = init.content;
  Var position = init.position_world;
  out.layers.push_back(predict_heads(queries, superpoints, position, p.heads));

  std::size_t stage = 0;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const DecoderLayerParams& lp = p.layers[l];
    const Tensor prev = mask_probabilities(out.layers.back());
    const Var query_pos = position_embedding(position, p.position_embed, cfg);
    queries = mask_attention(queries, query_pos, superpoints, superpoint_pos, prev, lp.cross, cfg.heads,
                             cfg.mask_threshold);

    Tensor probs;
    if (cfg.use_rsa) {
      std::vector<BBox> boxes;
      if (fixed_boxes) {
        boxes = fixed_boxes->at(l);
      } else {
        const Tensor& pos = position.value();
        for (std::size_t k = 0; k < cfg.queries; ++k)
          boxes.push_back(mask_to_bbox(prev.row(k), part, *in.scene, cfg.mask_threshold,
                                       {pos(k, 0), pos(k, 1), pos(k, 2)}));
      }
      queries = rsa_forward(queries, boxes, lp.rsa, &probs);
      out.boxes.push_back(std::move(boxes));
    } else {
      queries = rsa_forward(queries, nullptr, lp.rsa, &probs);
    }
    out.self_attention.push_back(std::move(probs));

    queries = lp.ffn(queries);
    position = clamp_cols(position + lp.position(queries), in.bounds.min, in.bounds.max);

    if (cfg.use_clsr && (l + 1) % cfg.refine_interval == 0) {
      superpoints = superpoint_refine(superpoints, queries, p.refine[stage++], cfg.heads);
      out.contrastive_taps.push_back(superpoints);
      ++out.refine_calls;
    }
    out.layers.push_back(predict_heads(queries, superpoints, position, p.heads));
  }
  return out;
}

std::string decoder_config_text(const DecoderConfig& cfg) { return fields_to_text(cfg); }

DecoderConfig decoder_config_from_text(const std::string& text) {
  DecoderConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (!set_field(cfg, key, trim(line.substr(eq + 1)))) throw ConfigError("decoder config: unknown key " + key);
  }
  return cfg;
}

namespace {

constexpr char kCheckpointMagic[4] = {'R', '3', 'D', 'W'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ValidationError("checkpoint", "truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DecoderConfig& cfg, const ParamStore& store) {
  std::string out(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = decoder_config_text(cfg);
  put<std::uint64_t>(out, text.size());
  out += text;
  put<std::uint64_t>(out, store.size());
  for (const auto& name : store.names()) {
    const Tensor& t = store.at(name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
    for (double v : t.data) put<double>(out, v);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("checkpoint", "cannot open " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(f), {}));
  if (r.take(4) != std::string(kCheckpointMagic, 4)) throw ValidationError("checkpoint", "bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw ValidationError("checkpoint", "unsupported version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.config = decoder_config_from_text(r.take(r.get<std::uint64_t>()));
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw ValidationError("checkpoint", e.what());
  }
  const auto blocks = r.get<std::uint64_t>();
  for (std::uint64_t b = 0; b < blocks; ++b) {
    const std::string name = r.take(r.get<std::uint32_t>());
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape);
    for (double& v : t.data) v = r.get<double>();
    ck.params.add(name, std::move(t));
  }
  if (!r.done()) throw ValidationError("checkpoint", "trailing bytes");
  const ParamStore expected = init_decoder(ck.config, 0);
  if (expected.names() != ck.params.names()) throw ValidationError("checkpoint", "parameter set does not match the config");
  for (const auto& name : expected.names())
    if (expected.at(name).shape != ck.params.at(name).shape)
      throw ValidationError("checkpoint", "shape mismatch for " + name);
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const DecoderConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.config == expected)) throw ValidationError("checkpoint", "config differs from the requested model");
  return ck;
}

}  // namespace r3d
