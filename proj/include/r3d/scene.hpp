#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace r3d {

using Vec3 = std::array<double, 3>;

// Invariant violation in scene data; names the offending field.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// A point cloud with its superpoint partition and instance annotations.
// Per-point arrays are flat; positions/colors/normals hold 3 values per point.
struct Scene {
  std::vector<double> positions;
  std::vector<double> colors;   // empty when absent
  std::vector<double> normals;  // empty when absent
  std::vector<int> superpoint_id;
  std::vector<int> instance_id;     // -1 = background
  std::vector<int> semantic_label;  // -1 = background
  int category_count = 0;

  std::size_t point_count() const { return superpoint_id.size(); }
  // One past the largest superpoint id.
  std::size_t superpoint_count() const;
  bool has_colors() const { return !colors.empty(); }
  bool has_normals() const { return !normals.empty(); }
  Vec3 position(std::size_t i) const {
    return {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]};
  }

  bool operator==(const Scene&) const = default;
};

struct Bounds {
  Vec3 min{0, 0, 0};
  Vec3 max{0, 0, 0};
};

Bounds scene_bounds(const Scene& scene);

// Checks every Scene invariant; throws ValidationError naming the field.
void validate_scene(const Scene& scene);

// Renumbers superpoint ids to dense [0, M) in order of first appearance of
// each old id sorted ascending.
void reindex_superpoints(Scene& scene);

enum class SceneFormat : std::uint8_t { kJson, kBinary };

// Reads either format (binary is recognised by its magic), re-indexes
// superpoints and validates.
Scene load_scene(const std::filesystem::path& path);
void save_scene(const Scene& scene, const std::filesystem::path& path,
                SceneFormat format = SceneFormat::kJson);

std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
std::vector<std::uint8_t> scene_to_binary(const Scene& scene);
Scene scene_from_binary(const std::vector<std::uint8_t>& bytes);

// One representative point per occupied voxel of edge `size`: centroid
// position, mean color and normal, majority instance, majority superpoint.
Scene voxelize(const Scene& scene, double size);

// b shifted along x to start `gap` past the end of a, appended to a.
// Instance and superpoint ids of b are offset past those of a; colors and
// normals are kept only when both scenes carry them.
Scene concatenate_scenes(const Scene& a, const Scene& b, double gap);

struct SynthConfig {
  int scene_count = 25;
  int boxes_min = 1;
  int boxes_max = 3;
  int points_per_box_min = 100;
  int points_per_box_max = 150;
  double extent_min = 0.4;
  double extent_max = 1.0;
  int background_points = 120;
  int category_count = 4;
  int superpoints_per_box = 4;
  double room_size = 4.0;
  double background_cell = 1.0;
  double color_noise = 0.05;
  std::uint64_t seed = 1;

  template <typename F>
  void fields(F&& f) {
    f("scene_count", scene_count);
    f("boxes_min", boxes_min);
    f("boxes_max", boxes_max);
    f("points_per_box_min", points_per_box_min);
    f("points_per_box_max", points_per_box_max);
    f("extent_min", extent_min);
    f("extent_max", extent_max);
    f("background_points", background_points);
    f("category_count", category_count);
    f("superpoints_per_box", superpoints_per_box);
    f("room_size", room_size);
    f("background_cell", background_cell);
    f("color_noise", color_noise);
    f("seed", seed);
  }
  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

// Axis-aligned box instances of distinct categories on a flat background,
// fully determined by (cfg.seed, index).
Scene synth_scene(const SynthConfig& cfg, int index);

// Ground-truth geometry of the boxes placed by synth_scene, for checks.
struct SynthBox {
  Vec3 min;
  Vec3 max;
  int category;
};
std::vector<SynthBox> synth_boxes(const SynthConfig& cfg, int index);

struct InstanceSummary {
  int instance_id = -1;
  int semantic_label = -1;
  Vec3 center{0, 0, 0};
  std::vector<int> superpoints;  // ascending
};

// Majority instance id of each superpoint's points (background counts as
// -1); ties go to the lower id.
std::vector<int> superpoint_instance_assignment(const Scene& scene);

// One summary per instance id >= 0, ascending by id.
std::vector<InstanceSummary> instance_summaries(const Scene& scene);

}  // namespace r3d
