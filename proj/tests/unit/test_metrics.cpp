#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "ctreg/metrics.hpp"
#include "support.hpp"

using namespace ctreg;

TEST(Metrics, MatchScalarOracleOnRandomVectors) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> len(2, 200);
  std::normal_distribution<double> nd(15, 6);
  for (int t = 0; t < 1000; ++t) {
    const int n = len(rng);
    std::vector<double> p(n), r(n);
    for (int i = 0; i < n; ++i) {
      r[i] = nd(rng);
      p[i] = r[i] + 0.5 * nd(rng) - 7.5;
    }
    const auto m = compute_metrics(p, r);
    const auto o = ctreg::testing::metrics_loop(p, r);
    EXPECT_NEAR(m.rmse, o.rmse, 1e-12 * std::max(1.0, o.rmse));
    EXPECT_NEAR(m.rrmse, o.rrmse, 1e-12 * std::max(1.0, std::abs(o.rrmse)));
    EXPECT_NEAR(m.mae, o.mae, 1e-12 * std::max(1.0, o.mae));
    EXPECT_NEAR(m.r2, o.r2, 1e-12 * std::max(1.0, std::abs(o.r2)));
    EXPECT_NEAR(m.ioa, o.ioa, 1e-12 * std::max(1.0, std::abs(o.ioa)));
  }
}

TEST(Metrics, PerfectPrediction) {
  const std::vector<double> r{3, 9, 12.5, 20};
  const auto m = compute_metrics(r, r);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.rrmse, 0.0);
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.r2, 1.0);
  EXPECT_EQ(m.ioa, 100.0);
}

TEST(Metrics, NullModelHasZeroR2) {
  const std::vector<double> r{2, 4, 6, 8};
  const std::vector<double> p(4, 5.0);
  const auto m = compute_metrics(p, r);
  EXPECT_EQ(m.r2, 0.0);
  EXPECT_EQ(m.rmse, std::sqrt(5.0));
  EXPECT_EQ(m.mae, 2.0);
  EXPECT_EQ(m.ioa, 0.0);  // |p - mean| = 0, so the potential error equals SSE
}

TEST(Metrics, UndefinedCases) {
  EXPECT_THROW(compute_metrics(std::vector<double>{1}, std::vector<double>{1}), UndefinedMetricError);
  EXPECT_THROW(compute_metrics(std::vector<double>{1, 2}, std::vector<double>{3, 3}), UndefinedMetricError);
  EXPECT_THROW(compute_metrics(std::vector<double>{1, 2}, std::vector<double>{-1, 1}), UndefinedMetricError);
  EXPECT_THROW(compute_metrics(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ContractError);
}

namespace {

struct MapsFixture {
  std::vector<PatchSample> patches = ctreg::testing::make_patches(3, 8, 1, 4, 1.0, 5);
  std::vector<std::vector<float>> preds;
  MapsFixture() {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0, 1);
    for (const auto& p : patches) {
      std::vector<float> m(p.pixels());
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = p.forest_mask[i] ? static_cast<float>(p.reference[i] + nd(rng)) : p.inputs.nodata;
      preds.push_back(m);
    }
  }
};

}  // namespace

TEST(Metrics, PixelLevelUsesForestPixelsOnly) {
  MapsFixture f;
  std::vector<double> p, r;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 64; ++i)
      if (f.patches[k].forest_mask[i]) {
        p.push_back(f.preds[k][i]);
        r.push_back(f.patches[k].reference[i]);
      }
  const auto m = pixel_metrics(f.preds, f.patches);
  EXPECT_EQ(m.n, p.size());
  EXPECT_DOUBLE_EQ(m.rmse, compute_metrics(p, r).rmse);
}

TEST(Metrics, StandMeansAggregateAcrossPatches) {
  MapsFixture f;
  std::map<int, std::tuple<double, double, std::size_t>> acc;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 64; ++i) {
      const int id = f.patches[k].stand_ids[i];
      if (id == 0 || !f.patches[k].forest_mask[i]) continue;
      auto& [sp, sr, n] = acc[id];
      sp += f.preds[k][i];
      sr += f.patches[k].reference[i];
      ++n;
    }
  const auto stands = stand_means(f.preds, f.patches);
  ASSERT_EQ(stands.size(), acc.size());
  for (const auto& s : stands) {
    const auto& [sp, sr, n] = acc.at(s.stand_id);
    EXPECT_EQ(s.n_pixels, n);
    EXPECT_NEAR(s.pred_mean, sp / n, 1e-12);
    EXPECT_NEAR(s.ref_mean, sr / n, 1e-12);
  }
  const auto m = stand_metrics(f.preds, f.patches);
  EXPECT_EQ(m.level, MetricLevel::stand);
  EXPECT_EQ(m.n, stands.size());
}

TEST(Metrics, SingleStandIsInsufficient) {
  MapsFixture f;
  for (auto& p : f.patches) std::fill(p.stand_ids.begin(), p.stand_ids.end(), 3);
  EXPECT_THROW(stand_metrics(f.preds, f.patches), InsufficientStandsError);
}

TEST(Metrics, ArtifactsHaveTheDocumentedLayout) {
  MapsFixture f;
  const auto dir = ctreg::testing::scratch_dir("artifacts");
  const auto summary = emit_artifacts(f.preds, f.patches, dir);
  std::ifstream csv(dir / "stand_scatter.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "stand_id,pred_mean_m,ref_mean_m,n_pixels");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, summary.stands.size());
  const auto metrics = nlohmann::json::parse(detail::read_file(dir / "metrics.json"));
  EXPECT_DOUBLE_EQ(metrics["pixel"]["rmse"].get<double>(), summary.pixel.rmse);
  EXPECT_EQ(metrics["stand"]["level"], "stand");
  for (const char* key : {"rmse", "rrmse", "mae", "r2", "ioa", "n"}) EXPECT_TRUE(metrics["pixel"].contains(key));
  const auto map = read_raster(dir / "maps" / "pred_00001.bsr");
  EXPECT_EQ(map.values, f.preds[1]);
}
