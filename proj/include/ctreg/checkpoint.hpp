#pragma once

// Checkpoints: `<stem>.json` metadata plus `<stem>.bin`, a little-endian blob
// holding, in order, the C normalizer means, the C normalizer scales and the
// branch parameter arena ([backbone | predictor], layer order of
// construction). dtype is "f32" or "f64".

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "ctreg/error.hpp"
#include "ctreg/network.hpp"
#include "ctreg/raster.hpp"

namespace ctreg {

struct CheckpointMeta {
  std::string variant;
  std::string config_hash;
  int epoch = 0;
  double val_loss = 0.0;
};

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, double> ? "f64" : "f32";
}

template <typename T>
void put_scalar_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

template <typename T>
T get_scalar_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

/// FNV-1a over a string, hex encoded.
inline std::string config_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Writes `<stem>.json` and `<stem>.bin`, each atomically.
template <typename T>
void save_checkpoint(const std::filesystem::path& stem, const InferenceModel<T>& model, const CheckpointMeta& meta) {
  const auto params = model.branch.parameters();
  const int c = model.channels();
  std::string blob;
  blob.reserve((2 * c + params.size()) * sizeof(T));
  for (T v : model.normalizer.mean) detail::put_scalar_le(blob, v);
  for (T v : model.normalizer.scale) detail::put_scalar_le(blob, v);
  for (T v : params) detail::put_scalar_le(blob, v);

  auto bin = stem;
  bin += ".bin";
  auto json_path = stem;
  json_path += ".json";
  nlohmann::ordered_json j;
  j["format"] = "ctreg-checkpoint";
  j["version"] = 1;
  j["dtype"] = detail::dtype_name<T>();
  j["architecture"] = to_json(model.branch.config());
  j["variant"] = meta.variant;
  j["config_hash"] = meta.config_hash;
  j["epoch"] = meta.epoch;
  j["val_loss"] = meta.val_loss;
  j["blob"] = bin.filename().string();
  j["layout"] = {{"normalizer_mean", c}, {"normalizer_scale", c}, {"parameters", params.size()}};
  detail::write_file_atomic(bin, blob);
  detail::write_file_atomic(json_path, j.dump(2) + "\n");
}

/// Accepts either the stem or the `.json` path.
template <typename T>
InferenceModel<T> load_checkpoint(std::filesystem::path path, CheckpointMeta* meta = nullptr) {
  if (path.extension() != ".json") path += ".json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  InferenceModel<T> model;
  std::size_t n_params = 0;
  int c = 0;
  try {
    if (j.at("format").get<std::string>() != "ctreg-checkpoint") throw FormatError("not a ctreg checkpoint");
    if (j.at("dtype").get<std::string>() != detail::dtype_name<T>())
      throw FormatError("checkpoint dtype " + j.at("dtype").get<std::string>() + " does not match requested type");
    const NetworkConfig cfg = network_config_from_json(j.at("architecture"));
    model.branch = Branch<T>(cfg, false, 0);
    n_params = j.at("layout").at("parameters").get<std::size_t>();
    c = j.at("layout").at("normalizer_mean").get<int>();
    if (meta) {
      meta->variant = j.value("variant", std::string());
      meta->config_hash = j.value("config_hash", std::string());
      meta->epoch = j.value("epoch", 0);
      meta->val_loss = j.value("val_loss", 0.0);
    }
    if (n_params != model.branch.parameter_count() || c != cfg.in_channels)
      throw FormatError("checkpoint layout disagrees with its architecture");
    const std::string blob = detail::read_file(path.parent_path() / j.at("blob").get<std::string>());
    const std::size_t want = (2 * static_cast<std::size_t>(c) + n_params) * sizeof(T);
    if (blob.size() != want) throw TruncationError("checkpoint blob size mismatch");
    const auto* u = reinterpret_cast<const unsigned char*>(blob.data());
    model.normalizer.mean.resize(c);
    model.normalizer.scale.resize(c);
    std::vector<T> params(n_params);
    std::size_t off = 0;
    for (auto& v : model.normalizer.mean) v = detail::get_scalar_le<T>(u + (off++) * sizeof(T));
    for (auto& v : model.normalizer.scale) v = detail::get_scalar_le<T>(u + (off++) * sizeof(T));
    for (auto& v : params) v = detail::get_scalar_le<T>(u + (off++) * sizeof(T));
    model.branch.load_parameters(params);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete checkpoint metadata: ") + e.what());
  }
  return model;
}

}  // namespace ctreg
