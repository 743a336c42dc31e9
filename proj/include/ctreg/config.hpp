#pragma once

// Run configuration: one JSON document with sections scene, data, network,
// loss, train, baseline, sweep and paths. Every field has a default; keys
// that the defaults do not contain are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctreg/error.hpp"
#include "ctreg/losses.hpp"
#include "ctreg/network.hpp"
#include "ctreg/raster.hpp"
#include "ctreg/synthetic.hpp"
#include "ctreg/trainer.hpp"

namespace ctreg {

struct DataConfig {
  int patch_size = 128;
  double forest_cover_min = 0.2;
  double test_fraction = 0.5;
  double val_fraction = 0.1;
  double labeled_fraction = 1.0;
  double augment_multiplier = 1.0;  // training patches after augmentation / before
  std::uint64_t seed = 0;
};

struct RunConfig {
  SceneConfig scene;
  DataConfig data;
  NetworkConfig network;
  LossConfig loss;
  TrainConfig train;  // train.loss and train.network are filled from the sections above
  double variance_kept = 0.99;
  std::vector<std::size_t> anchor_counts{10, 100, 1000};
  std::filesystem::path dataset;
  std::filesystem::path out_dir;
  std::filesystem::path checkpoint;

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.loss = loss;
    t.network = network;
    return t;
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  const auto& s = c.scene;
  j["scene"] = {{"scene_size", s.scene_size},
                {"n_channels_sar", s.n_channels_sar},
                {"n_channels_optical", s.n_channels_optical},
                {"height_min", s.height_min},
                {"height_max", s.height_max},
                {"n_stands", s.n_stands},
                {"speckle_looks", s.speckle_looks},
                {"speckle", s.speckle},
                {"noise_sigma", s.noise_sigma},
                {"clearcut_fraction", s.clearcut_fraction},
                {"nonforest_fraction", s.nonforest_fraction},
                {"within_stand_variation", s.within_stand_variation},
                {"pixel_size", s.pixel_size},
                {"signal_model", s.signal == SignalModel::linear ? "linear" : "saturating"},
                {"seed", s.seed}};
  const auto& d = c.data;
  j["data"] = {{"patch_size", d.patch_size},
               {"forest_cover_min", d.forest_cover_min},
               {"test_fraction", d.test_fraction},
               {"val_fraction", d.val_fraction},
               {"labeled_fraction", d.labeled_fraction},
               {"augment_multiplier", d.augment_multiplier},
               {"seed", d.seed}};
  j["network"] = {{"base_channels", c.network.base_channels},
                  {"feature_channels", c.network.feature_channels},
                  {"embed_channels", c.network.embed_channels},
                  {"groups", c.network.groups}};
  const auto& l = c.loss;
  j["loss"] = {{"tau", l.tau},           {"sigma", l.sigma},           {"eps_sim", l.eps_sim},
               {"eps_log", l.eps_log},   {"lambda_c", l.lambda_c},     {"lambda_ctrl", l.lambda_ctrl},
               {"lambda_w", l.lambda_w}};
  const auto& t = c.train;
  j["train"] = {{"variant", to_string(t.variant)},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"max_lr", t.max_lr},
                {"pct_start", t.pct_start},
                {"n_anchors", t.n_anchors},
                {"seed", t.seed},
                {"init_output_bias", t.init_output_bias}};
  j["baseline"] = {{"variance_kept", c.variance_kept}};
  j["sweep"] = {{"anchor_counts", c.anchor_counts}};
  j["paths"] = {{"dataset", c.dataset.string()},
                {"out_dir", c.out_dir.string()},
                {"checkpoint", c.checkpoint.string()}};
  return j;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& given, const nlohmann::ordered_json& known, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError("'" + (prefix.empty() ? std::string("config") : prefix) + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (known.at(key).is_object()) reject_unknown(value, known.at(key), path);
  }
}

template <typename V>
void read_field(const nlohmann::json& section, const std::string& sec, const char* key, V& out) {
  if (!section.contains(key)) return;
  try {
    out = section.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + sec + "." + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Builds a RunConfig from defaults plus the keys present in `j`, then
/// validates every section. Errors name the offending field.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown(j, to_json(c), "");
  using detail::read_field;
  auto section = [&](const char* name) { return j.contains(name) ? j.at(name) : nlohmann::json::object(); };

  const auto s = section("scene");
  read_field(s, "scene", "scene_size", c.scene.scene_size);
  read_field(s, "scene", "n_channels_sar", c.scene.n_channels_sar);
  read_field(s, "scene", "n_channels_optical", c.scene.n_channels_optical);
  read_field(s, "scene", "height_min", c.scene.height_min);
  read_field(s, "scene", "height_max", c.scene.height_max);
  read_field(s, "scene", "n_stands", c.scene.n_stands);
  read_field(s, "scene", "speckle_looks", c.scene.speckle_looks);
  read_field(s, "scene", "speckle", c.scene.speckle);
  read_field(s, "scene", "noise_sigma", c.scene.noise_sigma);
  read_field(s, "scene", "clearcut_fraction", c.scene.clearcut_fraction);
  read_field(s, "scene", "nonforest_fraction", c.scene.nonforest_fraction);
  read_field(s, "scene", "within_stand_variation", c.scene.within_stand_variation);
  read_field(s, "scene", "pixel_size", c.scene.pixel_size);
  read_field(s, "scene", "seed", c.scene.seed);
  std::string signal = "saturating";
  read_field(s, "scene", "signal_model", signal);
  if (signal == "saturating") c.scene.signal = SignalModel::saturating;
  else if (signal == "linear") c.scene.signal = SignalModel::linear;
  else throw ConfigError("config field 'scene.signal_model' must be 'saturating' or 'linear'");

  const auto d = section("data");
  read_field(d, "data", "patch_size", c.data.patch_size);
  read_field(d, "data", "forest_cover_min", c.data.forest_cover_min);
  read_field(d, "data", "test_fraction", c.data.test_fraction);
  read_field(d, "data", "val_fraction", c.data.val_fraction);
  read_field(d, "data", "labeled_fraction", c.data.labeled_fraction);
  read_field(d, "data", "augment_multiplier", c.data.augment_multiplier);
  read_field(d, "data", "seed", c.data.seed);

  const auto n = section("network");
  read_field(n, "network", "base_channels", c.network.base_channels);
  read_field(n, "network", "feature_channels", c.network.feature_channels);
  read_field(n, "network", "embed_channels", c.network.embed_channels);
  read_field(n, "network", "groups", c.network.groups);

  const auto l = section("loss");
  read_field(l, "loss", "tau", c.loss.tau);
  read_field(l, "loss", "sigma", c.loss.sigma);
  read_field(l, "loss", "eps_sim", c.loss.eps_sim);
  read_field(l, "loss", "eps_log", c.loss.eps_log);
  read_field(l, "loss", "lambda_c", c.loss.lambda_c);
  read_field(l, "loss", "lambda_ctrl", c.loss.lambda_ctrl);
  read_field(l, "loss", "lambda_w", c.loss.lambda_w);

  const auto t = section("train");
  std::string variant = to_string(c.train.variant);
  read_field(t, "train", "variant", variant);
  c.train.variant = parse_variant(variant);
  read_field(t, "train", "epochs", c.train.epochs);
  read_field(t, "train", "batch_size", c.train.batch_size);
  read_field(t, "train", "max_lr", c.train.max_lr);
  read_field(t, "train", "pct_start", c.train.pct_start);
  read_field(t, "train", "n_anchors", c.train.n_anchors);
  read_field(t, "train", "seed", c.train.seed);
  read_field(t, "train", "init_output_bias", c.train.init_output_bias);

  read_field(section("baseline"), "baseline", "variance_kept", c.variance_kept);
  read_field(section("sweep"), "sweep", "anchor_counts", c.anchor_counts);

  const auto p = section("paths");
  std::string dataset, out_dir, checkpoint;
  read_field(p, "paths", "dataset", dataset);
  read_field(p, "paths", "out_dir", out_dir);
  read_field(p, "paths", "checkpoint", checkpoint);
  c.dataset = dataset;
  c.out_dir = out_dir;
  c.checkpoint = checkpoint;

  c.scene.validate();
  if (c.data.patch_size <= 0 || c.data.patch_size % 4 != 0)
    throw ConfigError("config field 'data.patch_size' must be a positive multiple of 4");
  if (!(c.data.augment_multiplier >= 1.0)) throw ConfigError("config field 'data.augment_multiplier' must be >= 1");
  if (!(c.data.labeled_fraction > 0 && c.data.labeled_fraction <= 1))
    throw ConfigError("config field 'data.labeled_fraction' must lie in (0, 1]");
  if (c.data.test_fraction < 0 || c.data.val_fraction < 0 || c.data.test_fraction + c.data.val_fraction >= 1)
    throw ConfigError("config fields 'data.test_fraction' and 'data.val_fraction' must be non-negative and sum below 1");
  if (!(c.variance_kept > 0 && c.variance_kept <= 1))
    throw ConfigError("config field 'baseline.variance_kept' must lie in (0, 1]");
  if (c.anchor_counts.empty()) throw ConfigError("config field 'sweep.anchor_counts' must not be empty");
  NetworkConfig probe = c.network;
  probe.validate();
  c.train_config().validate();
  return c;
}

/// Applies `key value` overrides to a raw config document. Keys are either
/// dotted (`train.epochs`) or bare (`epochs`) when the bare name occurs in
/// exactly one section. Values are parsed as JSON and fall back to strings.
inline void apply_override(nlohmann::json& doc, const std::string& key, const std::string& value) {
  const nlohmann::ordered_json known = to_json(RunConfig{});
  std::string section, field;
  if (const auto dot = key.find('.'); dot != std::string::npos) {
    section = key.substr(0, dot);
    field = key.substr(dot + 1);
    if (!known.contains(section) || !known.at(section).contains(field))
      throw ConfigError("unknown config key '" + key + "'");
  } else {
    for (const auto& [sec, body] : known.items())
      if (body.contains(key)) {
        if (!section.empty())
          throw ConfigError("config key '" + key + "' is ambiguous; use '" + section + "." + key + "' or '" + sec +
                            "." + key + "'");
        section = sec;
      }
    if (section.empty()) throw ConfigError("unknown config key '" + key + "'");
    field = key;
  }
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded() || known.at(section).at(field).is_string()) parsed = value;
  doc[section][field] = std::move(parsed);
}

inline nlohmann::json load_config_document(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace ctreg
