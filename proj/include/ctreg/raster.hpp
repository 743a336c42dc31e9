#pragma once

// Multi-band raster patches: the BSR file format, patch samples, dataset
// splitting, augmentation and labeled/unlabeled marking.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctreg/error.hpp"

namespace ctreg {

inline constexpr float kNoData = -9999.0f;

/// Band-major, row-major float32 raster with a nodata sentinel.
struct RasterStack {
  int width = 0;
  int height = 0;
  int bands = 0;
  double pixel_size = 20.0;
  float nodata = kNoData;
  std::vector<float> values;

  RasterStack() = default;
  RasterStack(int w, int h, int b, float fill = 0.0f, double px = 20.0, float nd = kNoData)
      : width(w), height(h), bands(b), pixel_size(px), nodata(nd),
        values(static_cast<std::size_t>(w) * h * b, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(width) * height; }

  std::span<float> band(int b) { return {values.data() + b * plane(), plane()}; }
  std::span<const float> band(int b) const { return {values.data() + b * plane(), plane()}; }

  float& at(int b, int y, int x) { return values[b * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int b, int y, int x) const {
    return values[b * plane() + static_cast<std::size_t>(y) * width + x];
  }

  bool is_nodata(float v) const { return v == nodata; }

  /// Throws FormatError when dimensions disagree with the payload or a
  /// non-finite value appears.
  void validate() const {
    if (width <= 0 || height <= 0 || bands <= 0)
      throw FormatError("raster dimensions must be positive");
    if (values.size() != plane() * bands) throw FormatError("raster payload size mismatch");
    if (!std::isfinite(nodata)) throw FormatError("nodata sentinel must be finite");
    for (float v : values)
      if (!std::isfinite(v)) throw FormatError("raster holds a non-finite value");
  }
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Serialize to the BSR byte layout: "BSRF", u32 LE header length, JSON
/// header, then float32 LE samples (band-major, row-major).
inline std::string encode_raster(const RasterStack& r) {
  r.validate();
  // Key order is part of the byte layout.
  nlohmann::ordered_json header;
  header["width"] = r.width;
  header["height"] = r.height;
  header["bands"] = r.bands;
  header["dtype"] = "f32";
  header["nodata"] = r.nodata;
  header["pixel_size"] = r.pixel_size;
  const std::string text = header.dump();
  std::string out = "BSRF";
  detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + r.values.size() * 4);
  for (float v : r.values) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline RasterStack decode_raster(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "BSRF") throw FormatError("missing BSRF magic");
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hlen = detail::get_u32_le(u + 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen)) throw FormatError("header truncated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed BSR header: ") + e.what());
  }
  RasterStack r;
  try {
    if (h.at("dtype").get<std::string>() != "f32") throw FormatError("unsupported dtype");
    r.width = h.at("width").get<int>();
    r.height = h.at("height").get<int>();
    r.bands = h.at("bands").get<int>();
    r.nodata = h.at("nodata").get<float>();
    r.pixel_size = h.at("pixel_size").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete BSR header: ") + e.what());
  }
  if (r.width <= 0 || r.height <= 0 || r.bands <= 0)
    throw FormatError("BSR header dimensions must be positive");
  const std::size_t count = r.plane() * r.bands;
  const std::size_t offset = 8 + hlen;
  if (bytes.size() - offset < count * 4)
    throw TruncationError("BSR payload holds " + std::to_string((bytes.size() - offset) / 4) +
                          " samples, header declares " + std::to_string(count));
  r.values.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    r.values[i] = std::bit_cast<float>(detail::get_u32_le(u + offset + 4 * i));
  r.validate();
  return r;
}

inline void write_raster(const std::filesystem::path& path, const RasterStack& r) {
  detail::write_file_atomic(path, encode_raster(r));
}

inline RasterStack read_raster(const std::filesystem::path& path) {
  return decode_raster(detail::read_file(path));
}

/// One square training unit. `reference` uses `inputs.nodata` where no label
/// exists; `forest_mask` excludes pixels from every loss and metric.
struct PatchSample {
  RasterStack inputs;
  std::vector<float> reference;
  std::vector<std::uint8_t> forest_mask;
  std::vector<std::int32_t> stand_ids;
  bool labeled = true;
  int origin = -1;  // index of the source tile; augmented copies share it
  std::string transform = "identity";

  int size() const { return inputs.width; }
  int channels() const { return inputs.bands; }
  std::size_t pixels() const { return inputs.plane(); }
  bool has_reference(std::size_t i) const { return reference[i] != inputs.nodata; }
  /// Forest pixel with a defined reference value.
  bool valid(std::size_t i) const { return forest_mask[i] != 0 && has_reference(i); }

  double forest_cover() const {
    if (forest_mask.empty()) return 0.0;
    const auto n = std::count_if(forest_mask.begin(), forest_mask.end(), [](auto m) { return m != 0; });
    return static_cast<double>(n) / static_cast<double>(forest_mask.size());
  }

  void validate() const {
    inputs.validate();
    if (inputs.width != inputs.height) throw ShapeError("patches must be square");
    const std::size_t n = inputs.plane();
    if (reference.size() != n || forest_mask.size() != n || stand_ids.size() != n)
      throw ShapeError("patch layers disagree with input size");
  }
};

struct DatasetSplit {
  std::vector<PatchSample> train;
  std::vector<PatchSample> val;
  std::vector<PatchSample> test;
  double labeled_fraction = 1.0;
};

struct SplitFractions {
  double test = 0.5;
  double val = 0.1;
};

// ---------------------------------------------------------------------------
// Geometric transforms. Rotation is counter-clockwise by 90 degree steps;
// shifts are circular with wrap-around.

namespace detail {

template <typename V>
void rotate_plane(std::span<const V> in, std::span<V> out, int size, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      int sy = y, sx = x;
      switch (k) {
        case 1: sy = x; sx = size - 1 - y; break;
        case 2: sy = size - 1 - y; sx = size - 1 - x; break;
        case 3: sy = size - 1 - x; sx = y; break;
        default: break;
      }
      out[static_cast<std::size_t>(y) * size + x] = in[static_cast<std::size_t>(sy) * size + sx];
    }
}

template <typename V>
void shift_plane(std::span<const V> in, std::span<V> out, int size, int dy, int dx) {
  for (int y = 0; y < size; ++y) {
    const int sy = ((y - dy) % size + size) % size;
    for (int x = 0; x < size; ++x) {
      const int sx = ((x - dx) % size + size) % size;
      out[static_cast<std::size_t>(y) * size + x] = in[static_cast<std::size_t>(sy) * size + sx];
    }
  }
}

template <typename Fn>
PatchSample map_layers(const PatchSample& p, Fn&& plane_op) {
  PatchSample out = p;
  for (int b = 0; b < p.inputs.bands; ++b) plane_op(p.inputs.band(b), out.inputs.band(b));
  plane_op(std::span<const float>(p.reference), std::span<float>(out.reference));
  plane_op(std::span<const std::uint8_t>(p.forest_mask), std::span<std::uint8_t>(out.forest_mask));
  plane_op(std::span<const std::int32_t>(p.stand_ids), std::span<std::int32_t>(out.stand_ids));
  return out;
}

}  // namespace detail

inline PatchSample rotate90(const PatchSample& p, int quarter_turns) {
  const int s = p.size();
  PatchSample out = detail::map_layers(p, [&](auto in, auto o) { detail::rotate_plane(in, o, s, quarter_turns); });
  out.transform = p.transform + "|rot" + std::to_string((((quarter_turns % 4) + 4) % 4) * 90);
  return out;
}

inline PatchSample shift(const PatchSample& p, int dy, int dx) {
  const int s = p.size();
  PatchSample out = detail::map_layers(p, [&](auto in, auto o) { detail::shift_plane(in, o, s, dy, dx); });
  out.transform = p.transform + "|shift(" + std::to_string(dy) + "," + std::to_string(dx) + ")";
  return out;
}

/// Drops patches below `forest_cover_min`, then partitions the rest by a
/// seeded shuffle. Test and validation sizes are round(fraction * n) with
/// halves rounded away from zero; the remainder goes to training.
inline DatasetSplit filter_and_split(std::span<const PatchSample> patches, double forest_cover_min,
                                     SplitFractions fractions, std::uint64_t seed) {
  if (patches.empty()) throw EmptyDatasetError("no patches to split");
  if (fractions.test < 0 || fractions.val < 0 || fractions.test + fractions.val >= 1.0)
    throw ConfigError("split fractions must be non-negative and sum below 1");

  std::vector<PatchSample> eligible;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].forest_cover() < forest_cover_min) continue;
    eligible.push_back(patches[i]);
    if (eligible.back().origin < 0) eligible.back().origin = static_cast<int>(i);
  }
  if (eligible.empty()) throw EmptyDatasetError("every patch fell below the forest-cover threshold");

  const std::size_t n = eligible.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_test = static_cast<std::size_t>(std::lround(fractions.test * static_cast<double>(n)));
  const auto n_val = std::min(n - n_test, static_cast<std::size_t>(std::lround(fractions.val * static_cast<double>(n))));

  DatasetSplit split;
  for (std::size_t r = 0; r < n; ++r) {
    PatchSample& p = eligible[order[r]];
    if (r < n_test) {
      p.labeled = true;
      split.test.push_back(std::move(p));
    } else if (r < n_test + n_val) {
      p.labeled = true;
      split.val.push_back(std::move(p));
    } else {
      split.train.push_back(std::move(p));
    }
  }
  return split;
}

/// Returns the originals followed by `target_count - n` transformed copies.
/// Copy j derives from patch j mod n and applies a random quarter-turn
/// rotation and/or circular shift of at most size/4 pixels (never identity).
inline std::vector<PatchSample> augment(std::span<const PatchSample> patches, std::size_t target_count,
                                        std::uint64_t seed) {
  std::vector<PatchSample> out(patches.begin(), patches.end());
  if (patches.empty() || target_count <= patches.size()) return out;
  std::mt19937_64 rng(seed);
  const std::size_t copies = target_count - patches.size();
  out.reserve(target_count);
  for (std::size_t j = 0; j < copies; ++j) {
    const PatchSample& src = patches[j % patches.size()];
    const int max_shift = std::max(1, src.size() / 4);
    std::uniform_int_distribution<int> turn(0, 3), off(-max_shift, max_shift);
    int k = 0, dy = 0, dx = 0;
    do {
      k = turn(rng);
      dy = off(rng);
      dx = off(rng);
    } while (k == 0 && dy == 0 && dx == 0);
    PatchSample p = k ? rotate90(src, k) : src;
    if (dy || dx) p = shift(p, dy, dx);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<PatchSample> augment_by(std::span<const PatchSample> patches, double multiplier,
                                           std::uint64_t seed) {
  const auto target = static_cast<std::size_t>(std::lround(multiplier * static_cast<double>(patches.size())));
  return augment(patches, target, seed);
}

/// Keeps round(fraction * n_train) seeded-chosen training patches labeled.
/// Validation and test patches are always labeled.
inline DatasetSplit mark_unlabeled(DatasetSplit split, double labeled_fraction, std::uint64_t seed) {
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw ConfigError("labeled_fraction must lie in (0, 1]");
  const std::size_t n = split.train.size();
  const auto n_labeled = static_cast<std::size_t>(std::lround(labeled_fraction * static_cast<double>(n)));
  if (n_labeled == 0) throw ConfigError("labeled_fraction yields zero labeled training patches");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t r = 0; r < n; ++r) split.train[order[r]].labeled = r < n_labeled;
  for (auto& p : split.val) p.labeled = true;
  for (auto& p : split.test) p.labeled = true;
  split.labeled_fraction = labeled_fraction;
  return split;
}

// ---------------------------------------------------------------------------
// Dataset directories: BSR files plus manifest.json.
//
// Each patch is two files: `<id>_inputs.bsr` (C bands) and `<id>_layers.bsr`
// with three bands: reference height, forest mask (0/1), stand id.

inline RasterStack pack_layers(const PatchSample& p) {
  RasterStack r(p.size(), p.size(), 3, 0.0f, p.inputs.pixel_size, p.inputs.nodata);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    r.values[i] = p.reference[i];
    r.values[p.pixels() + i] = p.forest_mask[i] ? 1.0f : 0.0f;
    r.values[2 * p.pixels() + i] = static_cast<float>(p.stand_ids[i]);
  }
  return r;
}

inline void unpack_layers(const RasterStack& r, PatchSample& p) {
  if (r.bands != 3 || r.width != p.inputs.width || r.height != p.inputs.height)
    throw FormatError("layer raster does not match inputs");
  const std::size_t n = r.plane();
  p.reference.assign(r.values.begin(), r.values.begin() + n);
  p.forest_mask.resize(n);
  p.stand_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.forest_mask[i] = r.values[n + i] != 0.0f;
    p.stand_ids[i] = static_cast<std::int32_t>(r.values[2 * n + i]);
  }
}

inline void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "patches", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest = {{"format", "ctreg-dataset"}, {"version", 1},
                             {"labeled_fraction", split.labeled_fraction}};
  int patch_size = 0, channels = 0;
  nlohmann::json entries = nlohmann::json::array();
  int id = 0;
  auto emit = [&](const std::vector<PatchSample>& list, const char* name) {
    for (const auto& p : list) {
      p.validate();
      patch_size = p.size();
      channels = p.channels();
      char stem[32];
      std::snprintf(stem, sizeof stem, "p%05d", id);
      const std::string in_rel = std::string("patches/") + stem + "_inputs.bsr";
      const std::string lay_rel = std::string("patches/") + stem + "_layers.bsr";
      write_raster(dir / in_rel, p.inputs);
      write_raster(dir / lay_rel, pack_layers(p));
      entries.push_back({{"id", id},           {"split", name},         {"labeled", p.labeled},
                         {"origin", p.origin}, {"transform", p.transform}, {"inputs", in_rel},
                         {"layers", lay_rel}});
      ++id;
    }
  };
  emit(split.train, "train");
  emit(split.val, "val");
  emit(split.test, "test");
  manifest["patch_size"] = patch_size;
  manifest["channels"] = channels;
  manifest["patches"] = std::move(entries);
  if (!extra.empty()) manifest["generator"] = extra;
  detail::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline DatasetSplit read_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  DatasetSplit split;
  try {
    split.labeled_fraction = manifest.value("labeled_fraction", 1.0);
    for (const auto& e : manifest.at("patches")) {
      PatchSample p;
      p.inputs = read_raster(dir / e.at("inputs").get<std::string>());
      unpack_layers(read_raster(dir / e.at("layers").get<std::string>()), p);
      p.labeled = e.at("labeled").get<bool>();
      p.origin = e.value("origin", -1);
      p.transform = e.value("transform", std::string("identity"));
      const auto s = e.at("split").get<std::string>();
      if (s == "train") split.train.push_back(std::move(p));
      else if (s == "val") split.val.push_back(std::move(p));
      else if (s == "test") split.test.push_back(std::move(p));
      else throw FormatError("unknown split '" + s + "' in manifest");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest entry: ") + e.what());
  }
  return split;
}

}  // namespace ctreg
