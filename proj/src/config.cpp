#include "r3d/config.hpp"

#include <fstream>
#include <sstream>

#include "r3d/fields.hpp"

namespace r3d {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename F>
void for_sections(RunConfig& cfg, F&& f) {
  f("synth", cfg.synth);
  f("data", cfg.data);
  f("decoder", cfg.decoder);
  f("train", cfg.train);
  f("eval", cfg.eval);
}

}  // namespace

TrainConfig desk_train_config() {
  TrainConfig t;
  t.base_lr = 3e-3;
  t.mix_pairs = 20;
  return t;
}

void DataConfig::validate() const {
  if (!(voxel_size > 0)) throw ConfigError("data config: voxel_size must be positive");
  if (val_scenes < 0) throw ConfigError("data config: val_scenes must be non-negative");
}

void RunConfig::validate() const {
  synth.validate();
  data.validate();
  decoder.validate();
  train.validate();
  eval.validate();
  if (data.val_scenes >= synth.scene_count) throw ConfigError("data config: val_scenes must leave a training scene");
  if (synth.category_count != decoder.category_count)
    throw ConfigError("config: synth.category_count and decoder.category_count differ");
}

Dataset synthetic_dataset(const SynthConfig& synth, const DataConfig& data) {
  synth.validate();
  data.validate();
  if (data.val_scenes >= synth.scene_count) throw ConfigError("data config: val_scenes must leave a training scene");
  Dataset d;
  for (int i = 0; i < synth.scene_count; ++i) {
    Scene s = voxelize(synth_scene(synth, i), data.voxel_size);
    (i < synth.scene_count - data.val_scenes ? d.train : d.val).push_back(std::move(s));
  }
  return d;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ConfigError("config: key '" + key + "' lacks a section prefix");
  const std::string section = key.substr(0, dot), field = key.substr(dot + 1);
  bool known_section = false, found = false;
  for_sections(cfg, [&](const char* name, auto& sub) {
    if (section != name) return;
    known_section = true;
    found = set_field(sub, field, value);
  });
  if (!known_section) throw ConfigError("config: unknown section '" + section + "'");
  if (!found) throw ConfigError("config: unknown key '" + key + "'");
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(number) + ": empty key or value");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(cfg, buf.str());
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "': expected key=value");
    set_config_value(cfg, trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
  }
}

std::string config_text(const RunConfig& cfg) {
  std::string text;
  RunConfig copy = cfg;
  for_sections(copy, [&](const char* name, auto& sub) { text += fields_to_text(sub, std::string(name) + "."); });
  return text;
}

}  // namespace r3d
