#include "r3d/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <tuple>

#include "json.hpp"
#include "r3d/params.hpp"

namespace r3d {
namespace {

constexpr int kSceneVersion = 1;
constexpr char kSceneMagic[4] = {'R', '3', 'D', 'S'};

// Most frequent value; ties go to the smaller value.
int majority(std::vector<int> values) {
  std::sort(values.begin(), values.end());
  int best = values.front(), best_count = 0;
  for (std::size_t i = 0; i < values.size();) {
    std::size_t j = i;
    while (j < values.size() && values[j] == values[i]) ++j;
    if (static_cast<int>(j - i) > best_count) {
      best_count = static_cast<int>(j - i);
      best = values[i];
    }
    i = j;
  }
  return best;
}

// Little-endian byte writer/reader for the binary container.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw ValidationError("binary", "truncated scene container");
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

void check_size(std::size_t got, std::size_t want, const char* field) {
  if (got != want) {
    throw ValidationError(field, "expected " + std::to_string(want) + " values, got " +
                                     std::to_string(got));
  }
}

}  // namespace

std::size_t Scene::superpoint_count() const {
  if (superpoint_id.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(superpoint_id.begin(), superpoint_id.end())) + 1;
}

Bounds scene_bounds(const Scene& scene) {
  Bounds b;
  if (scene.point_count() == 0) return b;
  b.min = b.max = scene.position(0);
  for (std::size_t i = 1; i < scene.point_count(); ++i) {
    const Vec3 p = scene.position(i);
    for (int a = 0; a < 3; ++a) {
      b.min[a] = std::min(b.min[a], p[a]);
      b.max[a] = std::max(b.max[a], p[a]);
    }
  }
  return b;
}

void validate_scene(const Scene& scene) {
  const std::size_t n = scene.point_count();
  if (n == 0) throw ValidationError("superpoint_id", "scene has no points");
  check_size(scene.positions.size(), 3 * n, "positions");
  if (scene.has_colors()) check_size(scene.colors.size(), 3 * n, "colors");
  if (scene.has_normals()) check_size(scene.normals.size(), 3 * n, "normals");
  check_size(scene.instance_id.size(), n, "instance_id");
  check_size(scene.semantic_label.size(), n, "semantic_label");
  if (scene.category_count < 1) throw ValidationError("n_categories", "must be positive");

  for (double v : scene.positions)
    if (!std::isfinite(v)) throw ValidationError("positions", "non-finite coordinate");
  for (double v : scene.colors)
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("colors", "value outside [0, 1]");
  for (std::size_t i = 0; i < scene.normals.size() / 3; ++i) {
    const double len = std::hypot(scene.normals[3 * i], scene.normals[3 * i + 1], scene.normals[3 * i + 2]);
    if (std::abs(len - 1.0) > 1e-4) {
      throw ValidationError("normals", "point " + std::to_string(i) + " has norm " + std::to_string(len));
    }
  }

  const std::size_t m = scene.superpoint_count();
  std::vector<char> seen(m, 0);
  for (int s : scene.superpoint_id) {
    if (s < 0) throw ValidationError("superpoint_id", "negative id");
    seen[static_cast<std::size_t>(s)] = 1;
  }
  for (std::size_t s = 0; s < m; ++s) {
    if (!seen[s]) throw ValidationError("superpoint_id", "id " + std::to_string(s) + " is unused");
  }

  std::map<int, int> label_of;
  for (std::size_t i = 0; i < n; ++i) {
    const int inst = scene.instance_id[i];
    const int sem = scene.semantic_label[i];
    if (inst < -1) throw ValidationError("instance_id", "ids below -1 are invalid");
    if (sem < -1 || sem >= scene.category_count) {
      throw ValidationError("semantic_label", "label " + std::to_string(sem) + " outside [-1, " +
                                                  std::to_string(scene.category_count) + ")");
    }
    if (inst < 0) continue;
    if (sem < 0) {
      throw ValidationError("semantic_label", "instance " + std::to_string(inst) + " has background label");
    }
    auto [it, inserted] = label_of.emplace(inst, sem);
    if (!inserted && it->second != sem) {
      throw ValidationError("semantic_label", "instance " + std::to_string(inst) +
                                                  " mixes labels " + std::to_string(it->second) +
                                                  " and " + std::to_string(sem));
    }
  }
}

void reindex_superpoints(Scene& scene) {
  std::vector<int> ids = scene.superpoint_id;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (int& s : scene.superpoint_id)
    s = static_cast<int>(std::lower_bound(ids.begin(), ids.end(), s) - ids.begin());
}

// ------------------------------------------------------------------ I/O

std::string scene_to_json(const Scene& scene) {
  nlohmann::json j;
  j["header"] = {{"version", kSceneVersion},
                 {"n_points", scene.point_count()},
                 {"n_categories", scene.category_count},
                 {"has_colors", scene.has_colors()},
                 {"has_normals", scene.has_normals()}};
  j["positions"] = scene.positions;
  j["colors"] = scene.colors;
  j["normals"] = scene.normals;
  j["superpoint_id"] = scene.superpoint_id;
  j["instance_id"] = scene.instance_id;
  j["semantic_label"] = scene.semantic_label;
  return j.dump();
}

Scene scene_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("json", e.what());
  }
  try {
    const auto& h = j.at("header");
    if (h.at("version").get<int>() != kSceneVersion) {
      throw ValidationError("version", "unsupported scene version " + h.at("version").dump());
    }
    Scene s;
    s.category_count = h.at("n_categories").get<int>();
    s.positions = j.at("positions").get<std::vector<double>>();
    if (h.at("has_colors").get<bool>()) s.colors = j.at("colors").get<std::vector<double>>();
    if (h.at("has_normals").get<bool>()) s.normals = j.at("normals").get<std::vector<double>>();
    s.superpoint_id = j.at("superpoint_id").get<std::vector<int>>();
    s.instance_id = j.at("instance_id").get<std::vector<int>>();
    s.semantic_label = j.at("semantic_label").get<std::vector<int>>();
    check_size(s.superpoint_id.size(), h.at("n_points").get<std::size_t>(), "n_points");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("json", e.what());
  }
}

std::vector<std::uint8_t> scene_to_binary(const Scene& scene) {
  ByteWriter w;
  w.bytes(kSceneMagic, 4);
  w.u32(kSceneVersion);
  w.u64(scene.point_count());
  w.i32(scene.category_count);
  w.u8(scene.has_colors());
  w.u8(scene.has_normals());
  for (double v : scene.positions) w.f64(v);
  for (double v : scene.colors) w.f64(v);
  for (double v : scene.normals) w.f64(v);
  for (int v : scene.superpoint_id) w.i32(v);
  for (int v : scene.instance_id) w.i32(v);
  for (int v : scene.semantic_label) w.i32(v);
  return w.take();
}

Scene scene_from_binary(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kSceneMagic, 4) != 0) {
    throw ValidationError("magic", "not an R3DS container");
  }
  ByteReader r(bytes);
  for (int i = 0; i < 4; ++i) r.u8();
  if (r.u32() != kSceneVersion) throw ValidationError("version", "unsupported scene version");
  const std::uint64_t n = r.u64();
  Scene s;
  s.category_count = r.i32();
  const bool colors = r.u8() != 0;
  const bool normals = r.u8() != 0;
  r.need(n * (8 * 3 * (1 + colors + normals) + 12));
  auto read_f = [&](std::vector<double>& v) {
    v.resize(3 * n);
    for (double& x : v) x = r.f64();
  };
  auto read_i = [&](std::vector<int>& v) {
    v.resize(n);
    for (int& x : v) x = r.i32();
  };
  read_f(s.positions);
  if (colors) read_f(s.colors);
  if (normals) read_f(s.normals);
  read_i(s.superpoint_id);
  read_i(s.instance_id);
  read_i(s.semantic_label);
  if (!r.done()) throw ValidationError("binary", "trailing bytes after scene");
  return s;
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("path", "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Scene s = (bytes.size() >= 4 && std::memcmp(bytes.data(), kSceneMagic, 4) == 0)
                ? scene_from_binary(bytes)
                : scene_from_json(std::string(bytes.begin(), bytes.end()));
  if (!s.superpoint_id.empty() &&
      *std::min_element(s.superpoint_id.begin(), s.superpoint_id.end()) < 0) {
    throw ValidationError("superpoint_id", "negative id");
  }
  reindex_superpoints(s);
  validate_scene(s);
  return s;
}

void save_scene(const Scene& scene, const std::filesystem::path& path, SceneFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("path", "cannot write " + path.string());
  if (format == SceneFormat::kJson) {
    out << scene_to_json(scene);
  } else {
    const auto bytes = scene_to_binary(scene);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

// ---------------------------------------------------------- voxelization

Scene concatenate_scenes(const Scene& a, const Scene& b, double gap) {
  if (!(gap >= 0.0)) throw ConfigError("concatenate_scenes: gap must be non-negative");
  Scene s = a;
  const double shift = (a.point_count() ? scene_bounds(a).max[0] + gap : 0.0) -
                       (b.point_count() ? scene_bounds(b).min[0] : 0.0);
  int sp_offset = static_cast<int>(a.superpoint_count());
  int inst_offset = 0;
  for (int id : a.instance_id) inst_offset = std::max(inst_offset, id + 1);
  for (std::size_t i = 0; i < b.point_count(); ++i) {
    s.positions.insert(s.positions.end(), {b.positions[3 * i] + shift, b.positions[3 * i + 1], b.positions[3 * i + 2]});
    s.superpoint_id.push_back(b.superpoint_id[i] + sp_offset);
    s.instance_id.push_back(b.instance_id[i] < 0 ? -1 : b.instance_id[i] + inst_offset);
    s.semantic_label.push_back(b.semantic_label[i]);
  }
  if (a.has_colors() && b.has_colors()) s.colors.insert(s.colors.end(), b.colors.begin(), b.colors.end());
  else s.colors.clear();
  if (a.has_normals() && b.has_normals()) s.normals.insert(s.normals.end(), b.normals.begin(), b.normals.end());
  else s.normals.clear();
  s.category_count = std::max(a.category_count, b.category_count);
  reindex_superpoints(s);
  validate_scene(s);
  return s;
}

Scene voxelize(const Scene& scene, double size) {
  if (!(size > 0.0)) throw ConfigError("voxelize: voxel size must be positive");
  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
  std::map<Key, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < scene.point_count(); ++i) {
    const Vec3 p = scene.position(i);
    cells[{static_cast<std::int64_t>(std::floor(p[0] / size)),
           static_cast<std::int64_t>(std::floor(p[1] / size)),
           static_cast<std::int64_t>(std::floor(p[2] / size))}]
        .push_back(i);
  }

  Scene out;
  out.category_count = scene.category_count;
  for (const auto& [key, members] : cells) {
    const double count = static_cast<double>(members.size());
    auto mean3 = [&](const std::vector<double>& src, std::vector<double>& dst) {
      Vec3 acc{0, 0, 0};
      for (std::size_t i : members)
        for (int a = 0; a < 3; ++a) acc[a] += src[3 * i + a];
      for (int a = 0; a < 3; ++a) dst.push_back(acc[a] / count);
    };
    mean3(scene.positions, out.positions);
    if (scene.has_colors()) mean3(scene.colors, out.colors);
    if (scene.has_normals()) {
      Vec3 acc{0, 0, 0};
      for (std::size_t i : members)
        for (int a = 0; a < 3; ++a) acc[a] += scene.normals[3 * i + a];
      double len = std::hypot(acc[0], acc[1], acc[2]);
      if (len < 1e-12) {
        for (int a = 0; a < 3; ++a) acc[a] = scene.normals[3 * members.front() + a];
        len = 1.0;
      }
      for (int a = 0; a < 3; ++a) out.normals.push_back(acc[a] / len);
    }

    std::vector<int> inst, sp;
    for (std::size_t i : members) {
      inst.push_back(scene.instance_id[i]);
      sp.push_back(scene.superpoint_id[i]);
    }
    const int chosen = majority(inst);
    std::vector<int> sem;
    for (std::size_t i : members)
      if (scene.instance_id[i] == chosen) sem.push_back(scene.semantic_label[i]);
    out.instance_id.push_back(chosen);
    out.semantic_label.push_back(majority(sem));
    out.superpoint_id.push_back(majority(sp));
  }
  reindex_superpoints(out);
  return out;
}

// ------------------------------------------------------------- synthesis

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("synth config: " + what); };
  if (scene_count < 1) fail("scene_count must be positive");
  if (boxes_min < 1 || boxes_max < boxes_min) fail("box count range must be nonempty and positive");
  if (points_per_box_min < 1 || points_per_box_max < points_per_box_min) fail("points-per-box range invalid");
  if (!(extent_min > 0) || extent_max < extent_min) fail("extent range invalid");
  if (background_points < 0) fail("background_points must be non-negative");
  if (category_count < boxes_max) fail("category_count must cover the maximum box count");
  if (superpoints_per_box < 1 || superpoints_per_box > points_per_box_min)
    fail("superpoints_per_box must be in [1, points_per_box_min]");
  if (!(room_size > extent_max)) fail("room_size must exceed extent_max");
  if (!(background_cell > 0)) fail("background_cell must be positive");
  if (color_noise < 0) fail("color_noise must be non-negative");
}

namespace {

Vec3 category_color(int category, int count) {
  // HSV wheel at saturation 0.8, value 0.9.
  const double h = 6.0 * static_cast<double>(category) / static_cast<double>(count);
  const double s = 0.8, v = 0.9;
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

void generate(const SynthConfig& cfg, int index, Scene* scene, std::vector<SynthBox>* boxes_out) {
  cfg.validate();
  Rng rng(cfg.seed, static_cast<std::uint64_t>(index));
  const int want = rng.uniform_int(cfg.boxes_min, cfg.boxes_max);
  std::vector<int> categories(static_cast<std::size_t>(cfg.category_count));
  std::iota(categories.begin(), categories.end(), 0);
  rng.shuffle(categories);

  constexpr double kGap = 0.2;
  std::vector<SynthBox> boxes;
  for (int b = 0; b < want; ++b) {
    const Vec3 ext{rng.uniform(cfg.extent_min, cfg.extent_max), rng.uniform(cfg.extent_min, cfg.extent_max),
                   rng.uniform(cfg.extent_min, cfg.extent_max)};
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double x = rng.uniform(0.0, cfg.room_size - ext[0]);
      const double y = rng.uniform(0.0, cfg.room_size - ext[1]);
      SynthBox box{{x, y, 0.0}, {x + ext[0], y + ext[1], ext[2]}, categories[static_cast<std::size_t>(b)]};
      bool clear = true;
      for (const auto& o : boxes) {
        if (box.min[0] < o.max[0] + kGap && o.min[0] < box.max[0] + kGap && box.min[1] < o.max[1] + kGap &&
            o.min[1] < box.max[1] + kGap) {
          clear = false;
          break;
        }
      }
      if (clear) {
        boxes.push_back(box);
        break;
      }
    }
  }
  if (boxes_out) *boxes_out = boxes;
  if (!scene) return;

  Scene& s = *scene;
  s = Scene{};
  s.category_count = cfg.category_count;
  auto noisy = [&](const Vec3& base) {
    for (int a = 0; a < 3; ++a) s.colors.push_back(std::clamp(base[a] + cfg.color_noise * rng.normal(), 0.0, 1.0));
  };
  const int spb = cfg.superpoints_per_box;
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const auto& box = boxes[b];
    const int axis = (box.max[0] - box.min[0]) >= (box.max[1] - box.min[1]) ? 0 : 1;
    const double len = box.max[axis] - box.min[axis];
    const Vec3 color = category_color(box.category, cfg.category_count);
    const int count = rng.uniform_int(cfg.points_per_box_min, cfg.points_per_box_max);
    for (int j = 0; j < count; ++j) {
      const int slab = j % spb;
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = rng.uniform(box.min[a], box.max[a]);
      p[axis] = box.min[axis] + len * (slab + rng.uniform()) / spb;
      s.positions.insert(s.positions.end(), p.begin(), p.end());
      noisy(color);
      s.superpoint_id.push_back(static_cast<int>(b) * spb + slab);
      s.instance_id.push_back(static_cast<int>(b));
      s.semantic_label.push_back(box.category);
    }
  }
  const int cells_per_side = static_cast<int>(std::ceil(cfg.room_size / cfg.background_cell));
  const int base_id = static_cast<int>(boxes.size()) * spb;
  for (int j = 0; j < cfg.background_points;) {
    const double x = rng.uniform(0.0, cfg.room_size);
    const double y = rng.uniform(0.0, cfg.room_size);
    const double z = rng.uniform(0.0, 0.02);
    bool under_box = false;
    for (const auto& box : boxes) {
      under_box = under_box || (x > box.min[0] - 0.05 && x < box.max[0] + 0.05 && y > box.min[1] - 0.05 &&
                                y < box.max[1] + 0.05);
    }
    if (under_box) continue;
    const int cx = std::min(static_cast<int>(x / cfg.background_cell), cells_per_side - 1);
    const int cy = std::min(static_cast<int>(y / cfg.background_cell), cells_per_side - 1);
    s.positions.insert(s.positions.end(), {x, y, z});
    noisy({0.5, 0.5, 0.5});
    s.superpoint_id.push_back(base_id + cy * cells_per_side + cx);
    s.instance_id.push_back(-1);
    s.semantic_label.push_back(-1);
    ++j;
  }
  reindex_superpoints(s);
}

}  // namespace

Scene synth_scene(const SynthConfig& cfg, int index) {
  Scene s;
  generate(cfg, index, &s, nullptr);
  return s;
}

std::vector<SynthBox> synth_boxes(const SynthConfig& cfg, int index) {
  std::vector<SynthBox> boxes;
  generate(cfg, index, nullptr, &boxes);
  return boxes;
}

// ------------------------------------------------------------ summaries

std::vector<int> superpoint_instance_assignment(const Scene& scene) {
  const std::size_t m = scene.superpoint_count();
  std::vector<std::vector<int>> votes(m);
  for (std::size_t i = 0; i < scene.point_count(); ++i)
    votes[static_cast<std::size_t>(scene.superpoint_id[i])].push_back(scene.instance_id[i]);
  std::vector<int> out(m, -1);
  for (std::size_t s = 0; s < m; ++s)
    if (!votes[s].empty()) out[s] = majority(votes[s]);
  return out;
}

std::vector<InstanceSummary> instance_summaries(const Scene& scene) {
  std::map<int, InstanceSummary> by_id;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < scene.point_count(); ++i) {
    const int id = scene.instance_id[i];
    if (id < 0) continue;
    auto& s = by_id[id];
    s.instance_id = id;
    s.semantic_label = scene.semantic_label[i];
    for (int a = 0; a < 3; ++a) s.center[a] += scene.positions[3 * i + a];
    ++counts[id];
  }
  const auto assignment = superpoint_instance_assignment(scene);
  for (std::size_t sp = 0; sp < assignment.size(); ++sp) {
    auto it = by_id.find(assignment[sp]);
    if (it != by_id.end()) it->second.superpoints.push_back(static_cast<int>(sp));
  }
  std::vector<InstanceSummary> out;
  for (auto& [id, s] : by_id) {
    for (double& c : s.center) c /= static_cast<double>(counts[id]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace r3d
