#pragma once

// Synthetic forest scenes: a stand-partitioned height field and simulated
// SAR-like / optical-like bands derived from it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ctreg/error.hpp"
#include "ctreg/raster.hpp"

namespace ctreg {

enum class SignalModel { saturating, linear };

struct SceneConfig {
  int scene_size = 512;
  int n_channels_sar = 54;
  int n_channels_optical = 4;
  double height_min = 0.0;
  double height_max = 30.0;
  int n_stands = 80;
  double speckle_looks = 4.0;
  bool speckle = true;
  double noise_sigma = 0.01;
  double clearcut_fraction = 0.1;
  double nonforest_fraction = 0.08;
  double within_stand_variation = 0.15;  // amplitude as a fraction of the height range
  double pixel_size = 20.0;
  SignalModel signal = SignalModel::saturating;
  std::uint64_t seed = 0;

  int channels() const { return n_channels_sar + n_channels_optical; }

  void validate() const {
    if (scene_size <= 0) throw ConfigError("scene.scene_size must be positive");
    if (n_channels_sar < 0 || n_channels_optical < 0 || channels() == 0)
      throw ConfigError("scene channel counts must be non-negative with at least one band");
    if (height_min < 0 || height_max < height_min) throw ConfigError("scene.height_range must satisfy 0 <= min <= max");
    if (n_stands < 1) throw ConfigError("scene.n_stands must be >= 1");
    if (!(speckle_looks > 0)) throw ConfigError("scene.speckle_looks must be positive");
    if (noise_sigma < 0) throw ConfigError("scene.noise_sigma must be non-negative");
    if (clearcut_fraction < 0 || clearcut_fraction > 1) throw ConfigError("scene.clearcut_fraction must lie in [0, 1]");
    if (nonforest_fraction < 0 || nonforest_fraction >= 1) throw ConfigError("scene.nonforest_fraction must lie in [0, 1)");
  }
};

/// Heights in meters, stand ids (0 = no stand) and forest mask, all
/// scene_size x scene_size row-major.
struct HeightField {
  int size = 0;
  std::vector<float> heights;
  std::vector<std::int32_t> stand_ids;
  std::vector<std::uint8_t> forest_mask;
};

struct Scene {
  HeightField field;
  RasterStack bands;
};

namespace detail {

// Independent deterministic streams per purpose.
inline std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x5eedu};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Nearest-seed (Voronoi) stands with per-stand mean heights, smooth
/// within-stand variation, clear-cut stands near the minimum height and a
/// few non-forest regions that carry stand id 0 and zero height.
inline HeightField generate_height_field(const SceneConfig& cfg) {
  cfg.validate();
  auto rng = detail::scene_rng(cfg.seed, 1);
  const int n = cfg.scene_size;
  const double lo = cfg.height_min, hi = cfg.height_max, range = hi - lo;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  struct Seed {
    double y, x, mean;
    bool clearcut, nonforest;
  };
  std::vector<Seed> seeds(cfg.n_stands);
  for (auto& s : seeds) {
    s.y = unit(rng) * n;
    s.x = unit(rng) * n;
    s.mean = lo + range * unit(rng);
    s.clearcut = s.nonforest = false;
  }
  std::vector<int> order(cfg.n_stands);
  for (int i = 0; i < cfg.n_stands; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const int n_nonforest = static_cast<int>(std::floor(cfg.nonforest_fraction * cfg.n_stands));
  const int n_clearcut = std::min(cfg.n_stands - n_nonforest,
                                  static_cast<int>(std::floor(cfg.clearcut_fraction * cfg.n_stands)));
  for (int i = 0; i < n_nonforest; ++i) seeds[order[i]].nonforest = true;
  for (int i = 0; i < n_clearcut; ++i) seeds[order[n_nonforest + i]].clearcut = true;

  // Smooth variation: a handful of low-frequency plane waves.
  constexpr int kWaves = 8;
  struct Wave {
    double ky, kx, phase, amp;
  };
  std::vector<Wave> waves(kWaves);
  double amp_sum = 0.0;
  for (auto& w : waves) {
    const double freq = (1.0 + 5.0 * unit(rng)) / n;
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    w = {freq * std::sin(angle), freq * std::cos(angle), 2.0 * std::numbers::pi * unit(rng), 0.5 + unit(rng)};
    amp_sum += w.amp;
  }
  std::vector<double> clear_jitter(cfg.n_stands);
  for (auto& j : clear_jitter) j = 0.03 * range * unit(rng);

  HeightField f;
  f.size = n;
  const std::size_t npx = static_cast<std::size_t>(n) * n;
  f.heights.resize(npx);
  f.stand_ids.resize(npx);
  f.forest_mask.resize(npx);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int best = 0;
      double best_d = 1e300;
      for (int s = 0; s < cfg.n_stands; ++s) {
        const double dy = y + 0.5 - seeds[s].y, dx = x + 0.5 - seeds[s].x;
        const double d = dy * dy + dx * dx;
        if (d < best_d) {
          best_d = d;
          best = s;
        }
      }
      const std::size_t i = static_cast<std::size_t>(y) * n + x;
      const Seed& s = seeds[best];
      if (s.nonforest) {
        f.heights[i] = 0.0f;
        f.stand_ids[i] = 0;
        f.forest_mask[i] = 0;
        continue;
      }
      double h;
      if (s.clearcut) {
        h = lo + clear_jitter[best];
      } else {
        double v = 0.0;
        for (const auto& w : waves)
          v += w.amp * std::sin(2.0 * std::numbers::pi * (w.ky * y + w.kx * x) + w.phase);
        h = s.mean + cfg.within_stand_variation * range * v / amp_sum;
      }
      f.heights[i] = static_cast<float>(std::clamp(h, lo, hi));
      f.stand_ids[i] = best + 1;
      f.forest_mask[i] = 1;
    }
  return f;
}

/// Per-channel link from height to band value (before noise).
struct BandLink {
  bool sar = true;
  double a = 0, b = 0, c = 0;

  double operator()(double h, SignalModel model) const {
    if (model == SignalModel::linear) return a + b * h;
    return a - b * std::exp(-c * h);
  }
};

inline std::vector<BandLink> draw_band_links(const SceneConfig& cfg) {
  auto rng = detail::scene_rng(cfg.seed, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<BandLink> links;
  for (int k = 0; k < cfg.n_channels_sar; ++k) {
    // Increasing and saturating: backscatter grows with height then levels off.
    BandLink l{true, 0.20 + 0.10 * unit(rng), 0.12 + 0.06 * unit(rng), 0.08 + 0.10 * unit(rng)};
    if (cfg.signal == SignalModel::linear) l = {true, 0.05 + 0.05 * unit(rng), 0.004 + 0.004 * unit(rng), 0.0};
    links.push_back(l);
  }
  for (int k = 0; k < cfg.n_channels_optical; ++k) {
    // Decreasing with height: darker canopies for taller stands.
    BandLink l{false, 0.03 + 0.03 * unit(rng), -(0.06 + 0.08 * unit(rng)), 0.05 + 0.08 * unit(rng)};
    if (cfg.signal == SignalModel::linear) l = {false, 0.30 + 0.05 * unit(rng), -(0.003 + 0.004 * unit(rng)), 0.0};
    links.push_back(l);
  }
  return links;
}

/// SAR-like bands = link(h) x Gamma(looks, 1/looks) speckle; optical-like
/// bands = link(h) + N(0, noise_sigma).
inline RasterStack render_bands(const HeightField& field, const SceneConfig& cfg) {
  cfg.validate();
  const auto links = draw_band_links(cfg);
  auto rng = detail::scene_rng(cfg.seed, 3);
  std::gamma_distribution<double> speckle(cfg.speckle_looks, 1.0 / cfg.speckle_looks);
  std::normal_distribution<double> noise(0.0, 1.0);
  RasterStack r(field.size, field.size, cfg.channels(), 0.0f, cfg.pixel_size);
  const std::size_t npx = r.plane();
  for (int b = 0; b < r.bands; ++b) {
    const BandLink& l = links[b];
    auto band = r.band(b);
    for (std::size_t i = 0; i < npx; ++i) {
      const double h = field.heights[i];
      if (!std::isfinite(h)) throw DomainError("height field must be finite");
      double v = l(h, cfg.signal);
      if (l.sar) {
        if (cfg.speckle) v *= speckle(rng);
      } else if (cfg.noise_sigma > 0) {
        v += cfg.noise_sigma * noise(rng);
      }
      band[i] = static_cast<float>(v);
    }
  }
  return r;
}

inline Scene generate_scene(const SceneConfig& cfg) {
  Scene s;
  s.field = generate_height_field(cfg);
  s.bands = render_bands(s.field, cfg);
  return s;
}

/// Cuts the scene into non-overlapping patch_size tiles in row-major tile
/// order. Stand ids keep their scene-wide values.
inline std::vector<PatchSample> tile_scene(const Scene& scene, int patch_size) {
  const int n = scene.field.size;
  if (patch_size <= 0 || n % patch_size != 0)
    throw ShapeError("scene size " + std::to_string(n) + " is not a multiple of patch size " +
                     std::to_string(patch_size));
  const int tiles = n / patch_size;
  std::vector<PatchSample> out;
  out.reserve(static_cast<std::size_t>(tiles) * tiles);
  for (int ty = 0; ty < tiles; ++ty)
    for (int tx = 0; tx < tiles; ++tx) {
      PatchSample p;
      p.inputs = RasterStack(patch_size, patch_size, scene.bands.bands, 0.0f, scene.bands.pixel_size,
                             scene.bands.nodata);
      const std::size_t np = p.inputs.plane();
      p.reference.resize(np);
      p.forest_mask.resize(np);
      p.stand_ids.resize(np);
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x) {
          const std::size_t src = static_cast<std::size_t>(ty * patch_size + y) * n + tx * patch_size + x;
          const std::size_t dst = static_cast<std::size_t>(y) * patch_size + x;
          for (int b = 0; b < scene.bands.bands; ++b) p.inputs.band(b)[dst] = scene.bands.band(b)[src];
          p.reference[dst] = scene.field.heights[src];
          p.forest_mask[dst] = scene.field.forest_mask[src];
          p.stand_ids[dst] = scene.field.stand_ids[src];
        }
      p.origin = ty * tiles + tx;
      out.push_back(std::move(p));
    }
  return out;
}

}  // namespace ctreg
