#pragma once

// Subcommands gen-data, train, evaluate, baseline and anchor-sweep.
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctreg/checkpoint.hpp"
#include "ctreg/config.hpp"
#include "ctreg/error.hpp"
#include "ctreg/metrics.hpp"
#include "ctreg/mlr.hpp"
#include "ctreg/raster.hpp"
#include "ctreg/synthetic.hpp"
#include "ctreg/trainer.hpp"

namespace ctreg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

namespace cli_detail {

inline void require_path(const std::filesystem::path& p, const char* key) {
  if (p.empty()) throw ConfigError(std::string("missing required setting '") + key + "'");
}

inline void echo_config(const RunConfig& cfg, const char* command) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
  nlohmann::ordered_json j = to_json(cfg);
  j["command"] = command;
  detail::write_file_atomic(cfg.out_dir / "config.json", j.dump(2) + "\n");
}

inline const std::vector<PatchSample>& eval_split(const DatasetSplit& split) {
  if (!split.test.empty()) return split.test;
  if (!split.val.empty()) return split.val;
  throw EmptyDatasetError("dataset has neither test nor validation patches");
}

inline void print_metrics(std::ostream& out, const EvaluationSummary& s) {
  char line[160];
  for (const MetricReport* m : {&s.pixel, &s.stand}) {
    std::snprintf(line, sizeof line, "%-5s n=%zu rmse=%.4f m rrmse=%.3f%% mae=%.4f m r2=%.4f ioa=%.3f%%\n",
                  to_string(m->level), m->n, m->rmse, m->rrmse, m->mae, m->r2, m->ioa);
    out << line;
  }
}

/// Full synthetic pipeline: scene, tiling, split, labeling, augmentation.
inline DatasetSplit generate_dataset(const RunConfig& cfg) {
  const Scene scene = generate_scene(cfg.scene);
  const auto tiles = tile_scene(scene, cfg.data.patch_size);
  DatasetSplit split =
      filter_and_split(tiles, cfg.data.forest_cover_min, {cfg.data.test_fraction, cfg.data.val_fraction}, cfg.data.seed);
  split = mark_unlabeled(std::move(split), cfg.data.labeled_fraction, cfg.data.seed + 1);
  split.train = augment_by(split.train, cfg.data.augment_multiplier, cfg.data.seed + 2);
  return split;
}

inline int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.out_dir, "paths.out_dir");
  echo_config(cfg, "gen-data");
  const DatasetSplit split = generate_dataset(cfg);
  nlohmann::json gen = to_json(cfg)["scene"];
  write_dataset(cfg.out_dir, split, gen);
  std::size_t labeled = 0;
  for (const auto& p : split.train) labeled += p.labeled;
  out << "patches: " << split.train.size() + split.val.size() + split.test.size() << " (train "
      << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size() << ")\n"
      << "labeled train patches: " << labeled << "\n";
  return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.dataset, "paths.dataset");
  require_path(cfg.out_dir, "paths.out_dir");
  echo_config(cfg, "train");
  const DatasetSplit split = read_dataset(cfg.dataset);
  TrainConfig t = cfg.train_config();
  t.checkpoint_dir = cfg.out_dir;
  t.config_hash = config_hash(to_json(cfg).dump());
  const auto result = train<float>(split, t);
  out << "variant " << to_string(t.variant) << ": best epoch " << result.best_epoch << ", val loss "
      << result.best_val_loss << "\n"
      << "checkpoint: " << (cfg.out_dir / "best.json").string() << "\n";
  return kExitOk;
}

inline int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.dataset, "paths.dataset");
  require_path(cfg.out_dir, "paths.out_dir");
  require_path(cfg.checkpoint, "paths.checkpoint");
  echo_config(cfg, "evaluate");
  InferenceModel<float> model = load_checkpoint<float>(cfg.checkpoint);
  const DatasetSplit split = read_dataset(cfg.dataset);
  const auto& patches = eval_split(split);
  const auto maps = predict(model, std::span<const PatchSample>(patches));
  print_metrics(out, emit_artifacts(maps, patches, cfg.out_dir));
  return kExitOk;
}

inline int cmd_baseline(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.dataset, "paths.dataset");
  require_path(cfg.out_dir, "paths.out_dir");
  echo_config(cfg, "baseline");
  const DatasetSplit split = read_dataset(cfg.dataset);
  const auto [x, h] = gather_pixels(split.train, true);
  const MlrModel model = fit_mlr(x, h, cfg.variance_kept);
  detail::write_file_atomic(cfg.out_dir / "mlr_model.json", to_json(model).dump(2) + "\n");
  const auto& patches = eval_split(split);
  const auto maps = predict_mlr_maps(model, patches);
  print_metrics(out, emit_artifacts(maps, patches, cfg.out_dir));
  return kExitOk;
}

inline int cmd_anchor_sweep(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.dataset, "paths.dataset");
  require_path(cfg.out_dir, "paths.out_dir");
  echo_config(cfg, "anchor-sweep");
  const DatasetSplit split = read_dataset(cfg.dataset);
  TrainConfig t = cfg.train_config();
  t.checkpoint_dir = cfg.out_dir;
  t.config_hash = config_hash(to_json(cfg).dump());
  const auto rows = anchor_sweep<float>(split, t, cfg.anchor_counts);
  std::string csv = "n_anchors,val_loss,rrmse\n";
  char line[96];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", r.n_anchors, r.val_loss, r.rrmse);
    csv += line;
    out << line;
  }
  detail::write_file_atomic(cfg.out_dir / "anchor_sweep.csv", csv);
  return kExitOk;
}

// Turns leftover `--key value` / `--key=value` tokens into config overrides.
inline void apply_extras(nlohmann::json& doc, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() < 3) throw ConfigError("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("option '--" + key + "' needs a value");
      value = extras[++i];
    }
    for (auto& ch : key)
      if (ch == '-') ch = '_';
    apply_override(doc, key, value);
  }
}

}  // namespace cli_detail

/// Parses `argv` and runs one subcommand. Messages go to `out`/`err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Forest height regression from multi-band rasters"};
  app.require_subcommand(1);
  std::string config_path;
  struct Sub {
    const char* name;
    const char* help;
    CLI::App* app = nullptr;
  };
  std::vector<Sub> subs{{"gen-data", "generate a synthetic dataset"},
                        {"train", "train one model variant"},
                        {"evaluate", "evaluate a checkpoint on the test split"},
                        {"baseline", "fit and evaluate the linear baseline"},
                        {"anchor-sweep", "train over several anchor counts"}};
  for (auto& s : subs) {
    s.app = app.add_subcommand(s.name, s.help);
    s.app->add_option("-c,--config", config_path, "JSON config file");
    s.app->allow_extras();
    s.app->footer("Any config field can be set with --section.key VALUE or --key VALUE.");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  int which = 0;
  while (!*subs[which].app) ++which;
  const std::string name = subs[which].name;

  RunConfig cfg;
  try {
    nlohmann::json doc = config_path.empty() ? nlohmann::json::object() : load_config_document(config_path);
    cli_detail::apply_extras(doc, subs[which].app->remaining());
    cfg = run_config_from_json(doc);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (name == "gen-data") return cli_detail::cmd_gen_data(cfg, out);
    if (name == "train") return cli_detail::cmd_train(cfg, out);
    if (name == "evaluate") return cli_detail::cmd_evaluate(cfg, out);
    if (name == "baseline") return cli_detail::cmd_baseline(cfg, out);
    return cli_detail::cmd_anchor_sweep(cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace ctreg
