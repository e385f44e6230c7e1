#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "r3d/params.hpp"
#include "r3d/scene.hpp"

using namespace r3d;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("r3d_test_scene_" + name);
}

Scene two_point_scene() {
  Scene s;
  s.positions = {0, 0, 0, 1, 0, 0};
  s.superpoint_id = {7, 7};
  s.instance_id = {0, 0};
  s.semantic_label = {2, 2};
  s.category_count = 3;
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("load_scene: minimal file, label mismatch, dense reindex") {
  const auto path = temp_path("minimal.json");
  Scene s = two_point_scene();
  save_scene(s, path);
  Scene loaded = load_scene(path);
  CHECK(loaded.superpoint_count() == 1);
  CHECK(loaded.superpoint_id == std::vector<int>{0, 0});

  s.semantic_label = {1, 2};
  save_scene(s, path);
  try {
    load_scene(path);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "semantic_label");
  }

  write_text(path, "{not json");
  CHECK_THROWS_AS(load_scene(path), ValidationError);
  fs::remove(path);
}

TEST_CASE("scene JSON and binary containers round-trip exactly") {
  SynthConfig cfg;
  for (int i = 0; i < 5; ++i) {
    Scene s = synth_scene(cfg, i);
    // Attach normals with awkward values to exercise full-precision output.
    Rng rng(42, static_cast<std::uint64_t>(i));
    for (std::size_t p = 0; p < s.point_count(); ++p) {
      double v[3] = {rng.normal(), rng.normal(), rng.normal() + 0.1};
      const double len = std::hypot(v[0], v[1], v[2]);
      for (double x : v) s.normals.push_back(x / len);
    }
    for (auto format : {SceneFormat::kJson, SceneFormat::kBinary}) {
      const auto path = temp_path(format == SceneFormat::kJson ? "rt.json" : "rt.bin");
      save_scene(s, path, format);
      CHECK(load_scene(path) == s);
      fs::remove(path);
    }
    CHECK(scene_from_binary(scene_to_binary(s)) == s);
  }
  std::vector<std::uint8_t> bytes = scene_to_binary(two_point_scene());
  bytes.pop_back();
  CHECK_THROWS_AS(scene_from_binary(bytes), ValidationError);
}

TEST_CASE("voxelize: merge rules and idempotence") {
  Scene far = two_point_scene();
  CHECK(voxelize(far, 0.02).point_count() == 2);

  Scene near = two_point_scene();
  near.positions = {0.005, 0.005, 0.005, 0.006, 0.005, 0.005};
  Scene merged = voxelize(near, 0.02);
  CHECK(merged.point_count() == 1);
  CHECK(std::abs(merged.positions[0] - 0.0055) < 1e-15);

  Rng rng(3);
  Scene cube;
  cube.category_count = 2;
  for (int i = 0; i < 1000; ++i) {
    for (int a = 0; a < 3; ++a) cube.positions.push_back(rng.uniform(0.0005, 0.0195));
    cube.superpoint_id.push_back(i % 3);
    cube.instance_id.push_back(i % 2 ? 1 : -1);
    cube.semantic_label.push_back(i % 2 ? 1 : -1);
  }
  Scene one = voxelize(cube, 0.02);
  CHECK(one.point_count() == 1);
  validate_scene(one);

  SynthConfig cfg;
  for (int i = 0; i < 10; ++i) {
    Scene s = synth_scene(cfg, i);
    for (double size : {0.02, 0.1, 0.25}) {
      Scene v1 = voxelize(s, size);
      CHECK(v1.point_count() <= s.point_count());
      CHECK(voxelize(v1, size).point_count() == v1.point_count());
      validate_scene(v1);
    }
  }
}

TEST_CASE("synth_scene: single box, determinism, superpoint count, validity") {
  SynthConfig one;
  one.boxes_min = one.boxes_max = 1;
  one.background_points = 0;
  Scene s = synth_scene(one, 0);
  CHECK(std::set<int>(s.instance_id.begin(), s.instance_id.end()).size() == 1);
  CHECK(s.instance_id.front() == 0);

  SynthConfig cfg;
  CHECK(synth_scene(cfg, 4) == synth_scene(cfg, 4));
  CHECK_FALSE(synth_scene(cfg, 4) == synth_scene(cfg, 5));

  SynthConfig three;
  three.boxes_min = three.boxes_max = 3;
  three.superpoints_per_box = 4;
  for (int i = 0; i < 10; ++i) {
    Scene t = synth_scene(three, i);
    REQUIRE(synth_boxes(three, i).size() == 3);
    std::set<std::pair<int, int>> cells;
    for (std::size_t p = 0; p < t.point_count(); ++p) {
      if (t.instance_id[p] >= 0) continue;
      cells.insert({static_cast<int>(t.positions[3 * p] / three.background_cell),
                    static_cast<int>(t.positions[3 * p + 1] / three.background_cell)});
    }
    CHECK(t.superpoint_count() == 12 + cells.size());
  }

  for (int i = 0; i < 50; ++i) {
    Scene v = synth_scene(cfg, i);
    CHECK_NOTHROW(validate_scene(v));
    CHECK(v.point_count() <= 600);
  }
  SynthConfig bad;
  bad.boxes_min = 3;
  bad.boxes_max = 2;
  CHECK_THROWS_AS(synth_scene(bad, 0), ConfigError);
}

TEST_CASE("instance_summaries: centers, background, majority superpoints") {
  Scene s;
  s.category_count = 2;
  s.positions = {0, 0, 0, 2, 0, 0};
  s.superpoint_id = {0, 0};
  s.instance_id = {4, 4};
  s.semantic_label = {1, 1};
  auto sums = instance_summaries(s);
  REQUIRE(sums.size() == 1);
  CHECK(sums[0].center == Vec3{1, 0, 0});
  CHECK(sums[0].instance_id == 4);
  CHECK(sums[0].superpoints == std::vector<int>{0});

  s.instance_id = {-1, -1};
  s.semantic_label = {-1, -1};
  CHECK(instance_summaries(s).empty());

  Scene mixed;
  mixed.category_count = 1;
  for (int i = 0; i < 5; ++i) {
    mixed.positions.insert(mixed.positions.end(), {double(i), 0, 0});
    mixed.superpoint_id.push_back(0);
    mixed.instance_id.push_back(i < 3 ? 1 : 0);  // 3 of instance 1, 2 of instance 0
    mixed.semantic_label.push_back(0);
  }
  CHECK(superpoint_instance_assignment(mixed) == std::vector<int>{1});
  mixed.instance_id = {1, 1, 0, 0, -1};
  CHECK(superpoint_instance_assignment(mixed) == std::vector<int>{0});  // tie -> lower id
  const auto boxes = instance_summaries(mixed);
  CHECK(boxes[0].superpoints == std::vector<int>{0});
  CHECK(boxes[1].superpoints.empty());
}

TEST_CASE("concatenate_scenes: offsets, shift, attribute presence") {
  SynthConfig sc;
  const Scene a = synth_scene(sc, 0), b = synth_scene(sc, 1);
  const Scene c = concatenate_scenes(a, b, 0.5);
  REQUIRE(c.point_count() == a.point_count() + b.point_count());
  CHECK(c.superpoint_count() == a.superpoint_count() + b.superpoint_count());
  CHECK(scene_bounds(c).min[0] == scene_bounds(a).min[0]);
  const double shift = scene_bounds(a).max[0] + 0.5 - scene_bounds(b).min[0];
  std::size_t inst_a = instance_summaries(a).size();
  CHECK(instance_summaries(c).size() == inst_a + instance_summaries(b).size());
  for (std::size_t i = 0; i < b.point_count(); ++i) {
    const std::size_t j = a.point_count() + i;
    CHECK(c.positions[3 * j] == b.positions[3 * i] + shift);
    CHECK(c.positions[3 * j + 1] == b.positions[3 * i + 1]);
    CHECK(c.semantic_label[j] == b.semantic_label[i]);
    CHECK(c.instance_id[j] == (b.instance_id[i] < 0 ? -1 : b.instance_id[i] + static_cast<int>(inst_a)));
  }
  for (std::size_t i = 0; i < a.point_count(); ++i) CHECK(c.instance_id[i] == a.instance_id[i]);
  CHECK(c.colors.size() == c.positions.size());

  Scene plain = b;
  plain.colors.clear();
  CHECK_FALSE(concatenate_scenes(a, plain, 0.0).has_colors());
  CHECK_THROWS_AS(concatenate_scenes(a, b, -1.0), ConfigError);
}
