#pragma once

// Test fixtures and independent reference implementations. The oracles are
// written as plain scalar loops and share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ctreg/raster.hpp"

namespace ctreg::testing {

// ---------------------------------------------------------------------------
// Fixtures

/// Square patch whose inputs are smooth functions of a random height field.
/// `forest_every` > 0 marks every k-th pixel as non-forest.
inline PatchSample make_patch(int size, int channels, std::uint64_t seed, bool labeled = true, int forest_every = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PatchSample p;
  p.inputs = RasterStack(size, size, channels);
  const std::size_t n = static_cast<std::size_t>(size) * size;
  p.reference.resize(n);
  p.forest_mask.assign(n, 1);
  p.stand_ids.resize(n);
  const double fx = 1 + 3 * u(rng), fy = 1 + 3 * u(rng), ph = 6.28 * u(rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      const double h = 15 + 10 * std::sin(fx * x / size * 3.14 + ph) * std::cos(fy * y / size * 3.14) + u(rng);
      p.reference[i] = static_cast<float>(h);
      p.stand_ids[i] = 1 + (y * 2 / size) * 2 + (x * 2 / size);
      if (forest_every > 0 && i % forest_every == 0) {
        p.forest_mask[i] = 0;
        p.stand_ids[i] = 0;
        p.reference[i] = 0.0f;
      }
      for (int c = 0; c < channels; ++c)
        p.inputs.values[c * n + i] = static_cast<float>(std::tanh(0.05 * h * (c + 1)) + 0.05 * (u(rng) - 0.5));
    }
  p.labeled = labeled;
  p.origin = static_cast<int>(seed % 100000);
  return p;
}

inline std::vector<PatchSample> make_patches(int count, int size, int channels, std::uint64_t seed,
                                             double labeled_share = 1.0, int forest_every = 0) {
  std::vector<PatchSample> out;
  const int n_labeled = static_cast<int>(std::lround(labeled_share * count));
  for (int i = 0; i < count; ++i)
    out.push_back(make_patch(size, channels, seed * 1000 + static_cast<std::uint64_t>(i), i < n_labeled, forest_every));
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ctreg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Oracles

/// Contrastive loss as a triple loop: anchor i, partner k, embedding dim d.
inline double ctrl_loss_loop(const std::vector<std::vector<double>>& emb, const std::vector<double>& heights,
                             double tau, double sigma, double eps_sim, double eps_log) {
  const std::size_t n = emb.size();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      double dot = 0, ni = 0, nk = 0;
      for (std::size_t d = 0; d < emb[i].size(); ++d) {
        dot += emb[i][d] * emb[k][d];
        ni += emb[i][d] * emb[i][d];
        nk += emb[k][d] * emb[k][d];
      }
      const double e = std::exp(dot / std::sqrt(ni * nk) / tau);
      const double dh = heights[i] - heights[k];
      const double s = -std::log(std::max(dh * dh, eps_sim) / (2 * sigma * sigma));
      num += std::max(s, 0.0) * e;
      den += std::abs(s) * e;
    }
    total += -std::log((num + eps_log) / (den + eps_log));
  }
  return total / static_cast<double>(n);
}

struct ScalarMetrics {
  double rmse, rrmse, mae, r2, ioa;
};

inline ScalarMetrics metrics_loop(const std::vector<double>& p, const std::vector<double>& r) {
  const double n = static_cast<double>(r.size());
  double mean = 0;
  for (double v : r) mean += v;
  mean /= n;
  double sse = 0, sae = 0, sst = 0, pot = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    sse += (p[i] - r[i]) * (p[i] - r[i]);
    sae += std::abs(p[i] - r[i]);
    sst += (r[i] - mean) * (r[i] - mean);
    const double a = std::abs(p[i] - mean) + std::abs(r[i] - mean);
    pot += a * a;
  }
  const double rmse = std::sqrt(sse / n);
  return {rmse, 100 * rmse / mean, sae / n, 1 - sse / sst, 100 * (1 - sse / pot)};
}

/// Least squares through the normal equations with Gaussian elimination
/// (partial pivoting). Returns [intercept, b_1..b_C].
inline std::vector<double> normal_equations(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
  const std::size_t c = x.front().size() + 1;
  std::vector<std::vector<double>> a(c, std::vector<double>(c + 1, 0.0));
  for (std::size_t s = 0; s < x.size(); ++s) {
    std::vector<double> row{1.0};
    row.insert(row.end(), x[s].begin(), x[s].end());
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) a[i][j] += row[i] * row[j];
      a[i][c] += row[i] * y[s];
    }
  }
  for (std::size_t col = 0; col < c; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < c; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    for (std::size_t r = 0; r < c; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t k = col; k <= c; ++k) a[r][k] -= f * a[col][k];
    }
  }
  std::vector<double> beta(c);
  for (std::size_t i = 0; i < c; ++i) beta[i] = a[i][c] / a[i][i];
  return beta;
}

/// Central difference of f with respect to *x.
inline double central_difference(const std::function<double()>& f, double* x, double h) {
  const double saved = *x;
  *x = saved + h;
  const double fp = f();
  *x = saved - h;
  const double fm = f();
  *x = saved;
  return (fp - fm) / (2 * h);
}

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace ctreg::testing
