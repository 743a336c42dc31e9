#pragma once

// Accuracy metrics at pixel and stand level, plus the evaluation artifacts
// (stand scatter CSV, prediction maps, metrics JSON).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctreg/error.hpp"
#include "ctreg/raster.hpp"

namespace ctreg {

enum class MetricLevel { pixel, stand };

inline const char* to_string(MetricLevel l) { return l == MetricLevel::pixel ? "pixel" : "stand"; }

struct MetricReport {
  double rmse = 0;   // meters
  double rrmse = 0;  // percent of mean reference
  double mae = 0;    // meters
  double r2 = 0;
  double ioa = 0;  // Willmott's index of agreement, percent
  std::size_t n = 0;
  MetricLevel level = MetricLevel::pixel;
};

inline nlohmann::json to_json(const MetricReport& m) {
  return {{"level", to_string(m.level)}, {"n", m.n},     {"rmse", m.rmse}, {"rrmse", m.rrmse},
          {"mae", m.mae},               {"r2", m.r2},   {"ioa", m.ioa}};
}

/// RMSE, rRMSE (100 rmse / mean(ref)), MAE, R^2 and IOA
/// (100 (1 - SSE / sum(|p - mean(r)| + |r - mean(r)|)^2)) over paired values.
inline MetricReport compute_metrics(std::span<const double> pred, std::span<const double> ref,
                                    MetricLevel level = MetricLevel::pixel) {
  if (pred.size() != ref.size()) throw ContractError("prediction and reference lengths differ");
  if (ref.size() < 2) throw UndefinedMetricError("metrics need at least 2 samples");
  const double n = static_cast<double>(ref.size());
  double ref_sum = 0;
  for (double r : ref) ref_sum += r;
  const double ref_mean = ref_sum / n;
  double sse = 0, sae = 0, sst = 0, pot = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double e = pred[i] - ref[i];
    sse += e * e;
    sae += std::abs(e);
    const double dr = ref[i] - ref_mean;
    sst += dr * dr;
    const double agree = std::abs(pred[i] - ref_mean) + std::abs(dr);
    pot += agree * agree;
  }
  if (sst == 0.0) throw UndefinedMetricError("reference has zero variance; R^2 undefined");
  if (ref_mean == 0.0) throw UndefinedMetricError("reference mean is zero; rRMSE undefined");
  MetricReport m;
  m.level = level;
  m.n = ref.size();
  m.rmse = std::sqrt(sse / n);
  m.rrmse = 100.0 * m.rmse / ref_mean;
  m.mae = sae / n;
  m.r2 = 1.0 - sse / sst;
  m.ioa = 100.0 * (1.0 - sse / pot);
  return m;
}

/// A prediction map counts at a pixel when the patch marks it forest, the
/// reference is defined and the prediction is not nodata.
inline bool evaluable(const PatchSample& p, std::span<const float> pred, std::size_t i) {
  return p.valid(i) && pred[i] != p.inputs.nodata;
}

inline void check_maps(std::span<const std::vector<float>> preds, std::span<const PatchSample> patches) {
  if (preds.size() != patches.size()) throw ContractError("one prediction map per patch required");
  for (std::size_t k = 0; k < preds.size(); ++k)
    if (preds[k].size() != patches[k].pixels()) throw ContractError("prediction map size differs from patch");
}

inline MetricReport pixel_metrics(std::span<const std::vector<float>> preds, std::span<const PatchSample> patches) {
  check_maps(preds, patches);
  std::vector<double> p, r;
  for (std::size_t k = 0; k < preds.size(); ++k)
    for (std::size_t i = 0; i < patches[k].pixels(); ++i)
      if (evaluable(patches[k], preds[k], i)) {
        p.push_back(preds[k][i]);
        r.push_back(patches[k].reference[i]);
      }
  return compute_metrics(p, r, MetricLevel::pixel);
}

struct StandMean {
  std::int32_t stand_id = 0;
  double pred_mean = 0;
  double ref_mean = 0;
  std::size_t n_pixels = 0;
};

/// Per-stand means over evaluable pixels, aggregated across all patches
/// (stand ids are scene-wide). Stand 0 and stands without pixels are dropped.
inline std::vector<StandMean> stand_means(std::span<const std::vector<float>> preds,
                                          std::span<const PatchSample> patches) {
  check_maps(preds, patches);
  std::map<std::int32_t, StandMean> acc;
  for (std::size_t k = 0; k < preds.size(); ++k)
    for (std::size_t i = 0; i < patches[k].pixels(); ++i) {
      const std::int32_t id = patches[k].stand_ids[i];
      if (id == 0 || !evaluable(patches[k], preds[k], i)) continue;
      auto& s = acc[id];
      s.stand_id = id;
      s.pred_mean += preds[k][i];
      s.ref_mean += patches[k].reference[i];
      ++s.n_pixels;
    }
  std::vector<StandMean> out;
  out.reserve(acc.size());
  for (auto& [id, s] : acc) {
    s.pred_mean /= static_cast<double>(s.n_pixels);
    s.ref_mean /= static_cast<double>(s.n_pixels);
    out.push_back(s);
  }
  return out;
}

inline MetricReport stand_metrics(std::span<const StandMean> stands) {
  if (stands.size() < 2) throw InsufficientStandsError("stand metrics need at least 2 stands with valid pixels");
  std::vector<double> p, r;
  for (const auto& s : stands) {
    p.push_back(s.pred_mean);
    r.push_back(s.ref_mean);
  }
  return compute_metrics(p, r, MetricLevel::stand);
}

inline MetricReport stand_metrics(std::span<const std::vector<float>> preds, std::span<const PatchSample> patches) {
  const auto stands = stand_means(preds, patches);
  return stand_metrics(stands);
}

struct EvaluationSummary {
  MetricReport pixel;
  MetricReport stand;
  std::vector<StandMean> stands;
};

inline EvaluationSummary evaluate_maps(std::span<const std::vector<float>> preds, std::span<const PatchSample> patches) {
  EvaluationSummary s;
  s.pixel = pixel_metrics(preds, patches);
  s.stands = stand_means(preds, patches);
  s.stand = stand_metrics(s.stands);
  return s;
}

inline nlohmann::json to_json(const EvaluationSummary& s) {
  return {{"pixel", to_json(s.pixel)}, {"stand", to_json(s.stand)}};
}

/// Writes `stand_scatter.csv`, `metrics.json` and `maps/pred_NNNNN.bsr`
/// (one single-band map per patch) under `out_dir`.
inline EvaluationSummary emit_artifacts(std::span<const std::vector<float>> preds, std::span<const PatchSample> patches,
                                        const std::filesystem::path& out_dir) {
  EvaluationSummary s = evaluate_maps(preds, patches);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "maps", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "maps").string() + ": " + ec.message());

  std::string csv = "stand_id,pred_mean_m,ref_mean_m,n_pixels\n";
  char line[128];
  for (const auto& st : s.stands) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%zu\n", st.stand_id, st.pred_mean, st.ref_mean, st.n_pixels);
    csv += line;
  }
  detail::write_file_atomic(out_dir / "stand_scatter.csv", csv);

  for (std::size_t k = 0; k < preds.size(); ++k) {
    const PatchSample& p = patches[k];
    RasterStack map(p.size(), p.size(), 1, 0.0f, p.inputs.pixel_size, p.inputs.nodata);
    std::copy(preds[k].begin(), preds[k].end(), map.values.begin());
    char name[32];
    std::snprintf(name, sizeof name, "pred_%05zu.bsr", k);
    write_raster(out_dir / "maps" / name, map);
  }
  detail::write_file_atomic(out_dir / "metrics.json", to_json(s).dump(2) + "\n");
  return s;
}

}  // namespace ctreg
