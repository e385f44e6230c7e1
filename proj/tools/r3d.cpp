#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "r3d/config.hpp"
#include "r3d/gradsuite.hpp"

using namespace r3d;
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;

Json report_json(const EvalReport& r) {
  Json cats = Json::object();
  for (const auto& [c, ap] : r.categories) cats[std::to_string(c)] = {{"ap25", ap.ap25}, {"ap50", ap.ap50}, {"map", ap.map}};
  return {{"map", r.map},         {"ap50", r.ap50},
          {"ap25", r.ap25},       {"scenes", r.scenes},
          {"predictions", r.predictions}, {"ground_truths", r.ground_truths},
          {"categories", cats}};
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

// Scene files given directly, or every regular file of a directory in name order.
std::vector<Scene> load_scenes(const std::vector<std::string>& paths) {
  std::vector<fs::path> files;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> dir;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file()) dir.push_back(e.path());
      std::sort(dir.begin(), dir.end());
      files.insert(files.end(), dir.begin(), dir.end());
    } else {
      files.emplace_back(p);
    }
  }
  if (files.empty()) throw ValidationError("scenes", "no scene files given");
  std::vector<Scene> scenes;
  for (const auto& f : files) scenes.push_back(load_scene(f));
  return scenes;
}

Tensor read_matrix_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ValidationError("features", e.what());
  }
  if (j.is_object()) j = j.at("features");
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw ValidationError("features", "expected an array of rows");
  Tensor t = Tensor::matrix(j.size(), j[0].size());
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (j[r].size() != t.cols()) throw ValidationError("features", "ragged rows");
    for (std::size_t c = 0; c < t.cols(); ++c) t(r, c) = j[r][c].get<double>();
  }
  return t;
}

Json matrix_json(const Tensor& t) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) rows.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
  return rows;
}

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config_file, "key = value config file");
    app->add_option("-s,--set", overrides, "override, section.field=value (repeatable)");
  }
  RunConfig load() const {
    RunConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    apply_overrides(cfg, overrides);
    cfg.validate();
    return cfg;
  }
};

Checkpoint checkpoint_for(const std::string& path) { return load_checkpoint(path); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relation3D desk-scale instance segmentation"};
  app.require_subcommand(1);

  Common common;
  auto* synth = app.add_subcommand("synth", "write a voxelized synthetic dataset (train/ and val/)");
  std::string out_dir, format = "json";
  synth->add_option("-o,--out", out_dir, "output directory")->required();
  synth->add_option("--format", format, "json or binary")->check(CLI::IsMember({"json", "binary"}));
  common.add_to(synth);

  auto* train_cmd = app.add_subcommand("train", "train a decoder; writes a checkpoint and a JSON-lines log");
  std::string data_dir, ckpt_out, log_path;
  std::int64_t seed = -1;
  train_cmd->add_option("--data", data_dir, "dataset directory from synth (default: generate in memory)");
  train_cmd->add_option("--seed", seed, "training seed (overrides train.seed)");
  train_cmd->add_option("-o,--out", ckpt_out, "checkpoint path")->required();
  train_cmd->add_option("--log", log_path, "metrics log path (one JSON object per epoch)");
  common.add_to(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; prints an EvalReport");
  std::string ckpt, report_out;
  std::vector<std::string> scene_paths;
  eval_cmd->add_option("--checkpoint", ckpt)->required();
  eval_cmd->add_option("--scenes", scene_paths, "scene files or directories")->required();
  eval_cmd->add_option("-o,--out", report_out, "report path (default stdout)");
  common.add_to(eval_cmd);

  auto* infer_cmd = app.add_subcommand("infer", "per-point instance labels for one scene");
  std::string scene_path, labels_out;
  infer_cmd->add_option("--checkpoint", ckpt)->required();
  infer_cmd->add_option("--scene", scene_path)->required();
  infer_cmd->add_option("-o,--out", labels_out, "labels file, one 'instance category' line per point")->required();
  common.add_to(infer_cmd);

  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient suite");
  std::vector<std::uint64_t> seeds{1, 2, 3};
  grad_cmd->add_option("--seeds", seeds, "random seeds");
  grad_cmd->add_option("-o,--out", report_out, "report path (default stdout)");

  auto* lcont_cmd = app.add_subcommand("l-cont", "contrastive loss of superpoint features against a scene");
  std::string features_path, dump_dir;
  lcont_cmd->add_option("--scene", scene_path)->required();
  auto* feat_opt = lcont_cmd->add_option("--features", features_path, "JSON [M x C] superpoint features");
  auto* ck_opt = lcont_cmd->add_option("--checkpoint", ckpt, "report every contrastive stage of a model");
  lcont_cmd->add_option("--dump", dump_dir, "with --checkpoint: write stage features as JSON");
  bool balance = false;
  lcont_cmd->add_flag("--balance", balance, "class-balanced reduction");
  feat_opt->excludes(ck_opt);
  lcont_cmd->add_option("-o,--out", report_out, "report path (default stdout)");
  common.add_to(lcont_cmd);

  auto* attn_cmd = app.add_subcommand("attn-stats", "per-layer query self-attention histograms");
  double low = 0.03;
  std::size_t bins = 20;
  attn_cmd->add_option("--checkpoint", ckpt)->required();
  attn_cmd->add_option("--scene", scene_path)->required();
  attn_cmd->add_option("--low", low, "weights in [0, low] are excluded");
  attn_cmd->add_option("--bins", bins);
  attn_cmd->add_option("-o,--out", report_out, "report path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (synth->parsed()) {
      const RunConfig cfg = common.load();
      const Dataset d = synthetic_dataset(cfg.synth, cfg.data);
      const SceneFormat fmt = format == "json" ? SceneFormat::kJson : SceneFormat::kBinary;
      const char* ext = format == "json" ? ".json" : ".r3ds";
      int index = 0;
      for (const auto* split : {&d.train, &d.val}) {
        const fs::path dir = fs::path(out_dir) / (split == &d.train ? "train" : "val");
        fs::create_directories(dir);
        for (const Scene& s : *split) {
          char name[32];
          std::snprintf(name, sizeof name, "scene_%03d%s", index++, ext);
          save_scene(s, dir / name, fmt);
        }
      }
      std::cout << Json{{"train", d.train.size()}, {"val", d.val.size()}, {"out", out_dir}}.dump() << "\n";
    } else if (train_cmd->parsed()) {
      RunConfig cfg = common.load();
      if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
      Dataset d;
      if (data_dir.empty()) {
        d = synthetic_dataset(cfg.synth, cfg.data);
      } else {
        d.train = load_scenes({(fs::path(data_dir) / "train").string()});
        if (fs::is_directory(fs::path(data_dir) / "val")) d.val = load_scenes({(fs::path(data_dir) / "val").string()});
      }
      std::ofstream log;
      if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw ConfigError("cannot write " + log_path);
      }
      const TrainResult result = train(d.train, d.val, cfg.decoder, cfg.train, cfg.eval, [&](const EpochLog& e) {
        if (log) log << epoch_log_json(e) << "\n" << std::flush;
      });
      save_checkpoint(ckpt_out, cfg.decoder, result.params);
      Json summary = Json::parse(result.log.empty() ? "{}" : epoch_log_json(result.log.back()));
      summary["checkpoint"] = ckpt_out;
      std::cout << summary.dump() << "\n";
    } else if (eval_cmd->parsed()) {
      const RunConfig cfg = common.load();
      const Checkpoint ck = checkpoint_for(ckpt);
      const auto scenes = load_scenes(scene_paths);
      write_text(report_out, report_json(evaluate_model(scenes, ck.params, ck.config, cfg.eval)).dump(2) + "\n");
    } else if (infer_cmd->parsed()) {
      const RunConfig cfg = common.load();
      const Checkpoint ck = checkpoint_for(ckpt);
      const Scene scene = load_scene(scene_path);
      const SceneInput in = prepare_scene(scene);
      const auto insts = infer_scene(in, ck.params, ck.config, cfg.eval);
      const auto labels = point_labels(insts, scene.point_count());
      std::ostringstream text;
      for (int l : labels) text << l << ' ' << (l < 0 ? -1 : insts[static_cast<std::size_t>(l)].category) << '\n';
      write_text(labels_out, text.str());
      Json list = Json::array();
      for (std::size_t k = 0; k < insts.size(); ++k)
        list.push_back({{"instance", k},
                        {"category", insts[k].category},
                        {"confidence", insts[k].confidence},
                        {"points", std::count(insts[k].mask.begin(), insts[k].mask.end(), 1)}});
      std::cout << Json{{"instances", list}}.dump() << "\n";
    } else if (grad_cmd->parsed()) {
      const GradSuiteReport r = run_grad_suite(seeds);
      Json cases = Json::array();
      for (const auto& c : r.cases)
        cases.push_back({{"module", c.module},
                         {"seed", c.seed},
                         {"tolerance", c.tolerance},
                         {"worst_rel_error", c.worst_rel_error},
                         {"scalars", c.scalars},
                         {"passed", c.passed}});
      write_text(report_out, Json{{"passed", r.passed}, {"seconds", r.seconds}, {"cases", cases}}.dump(2) + "\n");
      return r.passed ? 0 : kExitFailure;
    } else if (lcont_cmd->parsed()) {
      const RunConfig cfg = common.load();
      const Scene scene = load_scene(scene_path);
      const RelationPrior prior = relation_prior(scene);
      ContrastiveOptions opt;
      opt.balance_classes = balance;
      Json report;
      if (!features_path.empty()) {
        const Tensor f = read_matrix_json(features_path);
        if (f.rows() != scene.superpoint_count())
          throw ValidationError("features", std::to_string(f.rows()) + " rows for " +
                                std::to_string(scene.superpoint_count()) + " superpoints");
        Graph g;
        SimilarityDiagnostics diag;
        const double v = contrastive_loss(cosine_similarity_matrix(g.constant(f), &diag), prior, opt).value().item();
        report = {{"l_cont", v}, {"superpoints", f.rows()}, {"zero_norm_rows", diag.zero_norm_rows}};
      } else if (!ckpt.empty()) {
        const Checkpoint ck = checkpoint_for(ckpt);
        const SceneInput in = prepare_scene(scene);
        Graph g;
        BoundParams bp(g, ck.params);
        const DecoderOutput out = decoder_forward(in, bind_decoder(bp, ck.config), ck.config);
        const auto stages = contrastive_stage_losses(out, prior, opt);
        if (!dump_dir.empty()) {
          fs::create_directories(dump_dir);
          for (std::size_t s = 0; s < out.contrastive_taps.size(); ++s)
            write_text((fs::path(dump_dir) / ("stage_" + std::to_string(s + 1) + ".json")).string(),
                       Json{{"features", matrix_json(out.contrastive_taps[s].value())}}.dump() + "\n");
        }
        report = {{"stages", stages}};
      } else {
        throw ConfigError("l-cont: give --features or --checkpoint");
      }
      write_text(report_out, report.dump(2) + "\n");
    } else if (attn_cmd->parsed()) {
      const Checkpoint ck = checkpoint_for(ckpt);
      const Scene scene = load_scene(scene_path);
      const SceneInput in = prepare_scene(scene);
      Graph g;
      BoundParams bp(g, ck.params);
      const DecoderOutput out = decoder_forward(in, bind_decoder(bp, ck.config), ck.config);
      Json layers = Json::array();
      for (const auto& h : attention_histograms(out, low, bins))
        layers.push_back({{"edges", h.edges}, {"counts", h.counts}, {"excluded", h.excluded}, {"total", h.total}});
      write_text(report_out, Json{{"low", low}, {"layers", layers}}.dump(2) + "\n");
    }
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ShapeError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
