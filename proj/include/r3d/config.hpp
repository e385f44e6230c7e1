#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "r3d/training.hpp"

namespace r3d {

// Dataset preparation shared by the CLI subcommands.
struct DataConfig {
  double voxel_size = 0.02;
  int val_scenes = 5;  // trailing scenes of a synthetic set held out for validation

  template <typename F>
  void fields(F&& f) {
    f("voxel_size", voxel_size);
    f("val_scenes", val_scenes);
  }
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

// TrainConfig defaults follow the full-scale recipe; a 20-scene set needs a
// larger step and pairs of scenes mixed into each epoch to generalise.
TrainConfig desk_train_config();

// Every configurable field, addressed as section.field with sections
// synth, data, decoder, train and eval.
struct RunConfig {
  SynthConfig synth;
  DataConfig data;
  DecoderConfig decoder;
  TrainConfig train = desk_train_config();
  InferConfig eval;

  void validate() const;
};

struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

// synth.scene_count voxelized synthetic scenes; the last data.val_scenes
// form the validation split.
Dataset synthetic_dataset(const SynthConfig& synth, const DataConfig& data);

// Sets one "section.field" key; throws ConfigError for unknown keys or
// unparsable values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Applies "key = value" lines on top of cfg. Blank lines and text after '#'
// are ignored. Errors name the line.
void apply_config_text(RunConfig& cfg, const std::string& text);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

// Applies "key=value" overrides, e.g. from the command line.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

// All keys with their current values, one per line, parseable by
// apply_config_text.
std::string config_text(const RunConfig& cfg);

}  // namespace r3d
