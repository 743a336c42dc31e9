#pragma once

// Pixel-level multiple linear regression on principal-component scores.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ctreg/error.hpp"
#include "ctreg/raster.hpp"

namespace ctreg {

struct MlrModel {
  Eigen::VectorXd mean;          // C
  Eigen::MatrixXd components;    // K x C, orthonormal rows
  Eigen::VectorXd coefficients;  // K
  double intercept = 0;

  int k() const { return static_cast<int>(components.rows()); }
  int channels() const { return static_cast<int>(mean.size()); }
};

/// Centers features, keeps the smallest K leading components whose
/// explained variance reaches `variance_kept` (zero-variance directions are
/// never kept), then least-squares fits heights on [1, scores].
inline MlrModel fit_mlr(const Eigen::MatrixXd& pixels, std::span<const double> heights, double variance_kept = 0.99) {
  const auto m = pixels.rows(), c = pixels.cols();
  if (static_cast<std::size_t>(m) != heights.size()) throw ContractError("one height per pixel row required");
  if (m <= c) throw FitError("MLR needs more samples than features");
  if (!(variance_kept > 0 && variance_kept <= 1)) throw ConfigError("variance_kept must lie in (0, 1]");
  for (double h : heights)
    if (!std::isfinite(h)) throw FitError("non-finite height");

  MlrModel model;
  model.mean = pixels.colwise().mean().transpose();
  const Eigen::MatrixXd centered = pixels.rowwise() - model.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw FitError("eigendecomposition failed");
  // Eigen sorts ascending; walk from the largest.
  const Eigen::VectorXd vals = eig.eigenvalues().reverse();
  const Eigen::MatrixXd vecs = eig.eigenvectors().rowwise().reverse();
  const double total = vals.cwiseMax(0.0).sum();
  const double tol = std::max(1e-12, 1e-10 * std::max(vals(0), 0.0));
  if (!(total > 0) || vals(0) <= tol) throw FitError("features have no variance");
  int k = 0;
  double kept = 0;
  while (k < c && vals(k) > tol) {
    kept += vals(k);
    ++k;
    if (kept >= variance_kept * total * (1.0 - 1e-12)) break;
  }
  model.components = vecs.leftCols(k).transpose();

  Eigen::MatrixXd design(m, k + 1);
  design.col(0).setOnes();
  design.rightCols(k) = centered * model.components.transpose();
  const Eigen::Map<const Eigen::VectorXd> y(heights.data(), m);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < k + 1) throw FitError("score matrix is rank deficient");
  const Eigen::VectorXd beta = qr.solve(y);
  model.intercept = beta(0);
  model.coefficients = beta.tail(k);
  return model;
}

inline Eigen::VectorXd predict_mlr(const MlrModel& model, const Eigen::MatrixXd& pixels) {
  if (pixels.cols() != model.channels()) throw ContractError("pixel feature count differs from the model");
  const Eigen::MatrixXd centered = pixels.rowwise() - model.mean.transpose();
  return (centered * model.components.transpose() * model.coefficients).array() + model.intercept;
}

inline double predict_mlr(const MlrModel& model, std::span<const double> pixel) {
  if (static_cast<int>(pixel.size()) != model.channels()) throw ContractError("pixel feature count differs from the model");
  double out = model.intercept;
  for (int j = 0; j < model.k(); ++j) {
    double score = 0;
    for (int c = 0; c < model.channels(); ++c) score += (pixel[c] - model.mean(c)) * model.components(j, c);
    out += score * model.coefficients(j);
  }
  return out;
}

/// Pixels of the given patches as an M x C matrix with their heights.
/// `labeled_only` skips unlabeled patches; only forest pixels with a
/// defined reference are taken.
inline std::pair<Eigen::MatrixXd, std::vector<double>> gather_pixels(std::span<const PatchSample> patches,
                                                                     bool labeled_only) {
  std::size_t count = 0;
  for (const auto& p : patches)
    if (p.labeled || !labeled_only)
      for (std::size_t i = 0; i < p.pixels(); ++i) count += p.valid(i);
  const int c = patches.empty() ? 0 : patches.front().channels();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(count), c);
  std::vector<double> h;
  h.reserve(count);
  Eigen::Index row = 0;
  for (const auto& p : patches) {
    if (labeled_only && !p.labeled) continue;
    if (p.channels() != c) throw ContractError("patches disagree in channel count");
    for (std::size_t i = 0; i < p.pixels(); ++i) {
      if (!p.valid(i)) continue;
      for (int b = 0; b < c; ++b) x(row, b) = p.inputs.band(b)[i];
      h.push_back(p.reference[i]);
      ++row;
    }
  }
  return {std::move(x), std::move(h)};
}

/// Prediction maps for whole patches; non-forest pixels get nodata.
inline std::vector<std::vector<float>> predict_mlr_maps(const MlrModel& model, std::span<const PatchSample> patches) {
  std::vector<std::vector<float>> out;
  std::vector<double> px(model.channels());
  for (const auto& p : patches) {
    if (p.channels() != model.channels()) throw ContractError("patch channel count differs from the model");
    std::vector<float> map(p.pixels(), p.inputs.nodata);
    for (std::size_t i = 0; i < p.pixels(); ++i) {
      if (!p.forest_mask[i]) continue;
      for (int b = 0; b < p.channels(); ++b) px[b] = p.inputs.band(b)[i];
      map[i] = static_cast<float>(predict_mlr(model, px));
    }
    out.push_back(std::move(map));
  }
  return out;
}

inline nlohmann::json to_json(const MlrModel& m) {
  nlohmann::json comps = nlohmann::json::array();
  for (int j = 0; j < m.k(); ++j) {
    std::vector<double> row;
    for (int c = 0; c < m.channels(); ++c) row.push_back(m.components(j, c));
    comps.push_back(row);
  }
  return {{"k", m.k()},
          {"mean", std::vector<double>(m.mean.data(), m.mean.data() + m.mean.size())},
          {"components", comps},
          {"coefficients", std::vector<double>(m.coefficients.data(), m.coefficients.data() + m.coefficients.size())},
          {"intercept", m.intercept}};
}

inline MlrModel mlr_from_json(const nlohmann::json& j) {
  MlrModel m;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto coef = j.at("coefficients").get<std::vector<double>>();
  const auto comps = j.at("components").get<std::vector<std::vector<double>>>();
  m.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  m.coefficients = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size()));
  m.components.resize(static_cast<Eigen::Index>(comps.size()), static_cast<Eigen::Index>(mean.size()));
  for (std::size_t r = 0; r < comps.size(); ++r) {
    if (comps[r].size() != mean.size()) throw FormatError("MLR component row has the wrong length");
    for (std::size_t c = 0; c < mean.size(); ++c) m.components(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = comps[r][c];
  }
  if (m.coefficients.size() != m.components.rows()) throw FormatError("MLR coefficient count differs from K");
  m.intercept = j.at("intercept").get<double>();
  return m;
}

}  // namespace ctreg
