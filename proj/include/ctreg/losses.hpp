#pragma once

// Contrastive regression loss, cross-pseudo regression loss and the hybrid
// semisupervised objective, each with hand-derived gradients.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "ctreg/error.hpp"
#include "ctreg/raster.hpp"
#include "ctreg/similarity.hpp"
#include "ctreg/tensor.hpp"

namespace ctreg {

struct LossConfig {
  double tau = 0.5;
  double sigma = 1.0;
  double eps_sim = 1e-6;
  double eps_log = 1e-8;
  double lambda_c = 1.0;
  double lambda_ctrl = 60.0;
  double lambda_w = 1e-4;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("loss.tau must be positive");
    if (!(sigma > 0)) throw ConfigError("loss.sigma must be positive");
    if (!(eps_sim > 0)) throw ConfigError("loss.eps_sim must be positive");
    if (!(eps_log > 0)) throw ConfigError("loss.eps_log must be positive");
    if (lambda_c < 0) throw ConfigError("loss.lambda_c must be non-negative");
    if (lambda_ctrl < 0) throw ConfigError("loss.lambda_ctrl must be non-negative");
    if (lambda_w < 0) throw ConfigError("loss.lambda_w must be non-negative");
  }
};

/// Every component of one evaluation of the hybrid objective.
struct LossReport {
  double l1_labeled = 0;
  double l2_labeled = 0;
  double l_consistency = 0;
  double l_ctrl = 0;
  double l_wd = 0;
  double total = 0;
  std::size_t n_anchors_used = 0;
  bool pure_unlabeled = false;
};

inline nlohmann::json to_json(const LossReport& r) {
  return {{"l1", r.l1_labeled}, {"l2", r.l2_labeled}, {"l_c", r.l_consistency},
          {"l_ctrl", r.l_ctrl}, {"l_wd", r.l_wd},     {"total", r.total},
          {"n_anchors", r.n_anchors_used}};
}

// ---------------------------------------------------------------------------
// Contrastive regression loss.
//
// For anchor i, with E_ik = exp(c_ik / tau) over k != i:
//   L_i = -log[(sum_k relu(s_ik) E_ik + eps) / (sum_k |s_ik| E_ik + eps)]
// and the loss is the mean over anchors.

template <typename T>
struct CtrlResult {
  T loss = 0;
  Vec<T> per_anchor;  // L_i
  Mat<T> d_cos;       // d loss / d c_ik, zero diagonal (not symmetrized)
};

template <typename T>
CtrlResult<T> ctrl_loss_and_grad(const SimilarityMatrix<T>& sim, const LossConfig& cfg, bool want_grad = true) {
  const Eigen::Index n = sim.size();
  if (n < 2) throw InsufficientAnchorsError("contrastive loss needs at least 2 anchors");
  if (sim.c.rows() != n || sim.c.cols() != n || sim.s.cols() != n)
    throw ShapeError("similarity matrices disagree in size");
  const T inv_tau = static_cast<T>(1.0 / cfg.tau);
  const T eps = static_cast<T>(cfg.eps_log);

  Mat<T> e = (sim.c.array() * inv_tau).exp().matrix();
  e.diagonal().setZero();
  const Mat<T> pos = sim.s.cwiseMax(T(0));
  const Mat<T> mag = sim.s.cwiseAbs();
  const Vec<T> num = (pos.cwiseProduct(e)).rowwise().sum().array() + eps;
  const Vec<T> den = (mag.cwiseProduct(e)).rowwise().sum().array() + eps;

  CtrlResult<T> out;
  out.per_anchor = (den.array().log() - num.array().log()).matrix();
  out.loss = out.per_anchor.mean();
  if (want_grad) {
    const T scale = inv_tau / static_cast<T>(n);
    out.d_cos = (e.array() * (mag.array().colwise() / den.array() - pos.array().colwise() / num.array()) * scale)
                    .matrix();
    out.d_cos.diagonal().setZero();
  }
  return out;
}

template <typename T>
T ctrl_loss(const SimilarityMatrix<T>& sim, const LossConfig& cfg) {
  return ctrl_loss_and_grad(sim, cfg, false).loss;
}

/// d loss / d unit embeddings, given d loss / d cosine matrix. Uses
/// c_ik = u_i . u_k so that dU = (G + G^T) U.
template <typename T>
Mat<T> ctrl_unit_gradient(const AnchorSet<T>& anchors, const Mat<T>& d_cos) {
  const Mat<T> g = d_cos + d_cos.transpose();
  return g * anchors.embeddings;
}

// ---------------------------------------------------------------------------
// Cross-pseudo regression loss.

/// Per-pixel supervision aligned with a prediction batch (batch x 1 x H x W).
struct DenseTargets {
  int batch = 0, height = 0, width = 0;
  std::vector<float> reference;
  std::vector<std::uint8_t> labeled;  // labeled patch, forest, reference defined
  std::vector<std::uint8_t> forest;

  std::size_t size() const { return reference.size(); }

  static DenseTargets from_patches(std::span<const PatchSample> patches, bool honor_labeled_flag = true) {
    DenseTargets t;
    if (patches.empty()) return t;
    t.batch = static_cast<int>(patches.size());
    t.height = t.width = patches.front().size();
    const std::size_t np = patches.front().pixels();
    t.reference.resize(np * patches.size());
    t.labeled.resize(np * patches.size());
    t.forest.resize(np * patches.size());
    for (std::size_t b = 0; b < patches.size(); ++b) {
      const PatchSample& p = patches[b];
      if (p.pixels() != np) throw ShapeError("patches in one batch must share a size");
      const bool use_labels = p.labeled || !honor_labeled_flag;
      for (std::size_t i = 0; i < np; ++i) {
        t.reference[b * np + i] = p.reference[i];
        t.forest[b * np + i] = p.forest_mask[i];
        t.labeled[b * np + i] = use_labels && p.valid(i);
      }
    }
    return t;
  }
};

template <typename T>
void check_prediction_shape(const Tensor<T>& p, const DenseTargets& t) {
  if (p.n() != t.batch || p.c() != 1 || p.h() != t.height || p.w() != t.width)
    throw ContractError("prediction " + p.shape_string() + " does not match targets");
}

struct CprTerms {
  double l1 = 0, l2 = 0, l_c = 0;
  std::size_t n_labeled = 0, n_forest = 0;
  bool pure_unlabeled = false;  // no labeled pixel: l1 = l2 = 0

  double combined(double lambda_c) const { return l1 + l2 + lambda_c * l_c; }
};

/// Mean squared error over labeled pixels; accumulates its gradient into
/// `grad` (scaled by `weight`) when non-null.
template <typename T>
double supervised_mse(const Tensor<T>& p, const DenseTargets& t, Tensor<T>* grad = nullptr, double weight = 1.0) {
  check_prediction_shape(p, t);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t.labeled[i]) {
      const double d = static_cast<double>(p.data()[i]) - t.reference[i];
      sum += d * d;
      ++n;
    }
  if (n == 0) return 0.0;
  if (grad) {
    const double k = 2.0 * weight / static_cast<double>(n);
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t.labeled[i]) grad->data()[i] += static_cast<T>(k * (static_cast<double>(p.data()[i]) - t.reference[i]));
  }
  return sum / static_cast<double>(n);
}

/// Mean squared disagreement between the branches over all forest pixels.
template <typename T>
double consistency_mse(const Tensor<T>& p1, const Tensor<T>& p2, const DenseTargets& t, Tensor<T>* g1 = nullptr,
                       Tensor<T>* g2 = nullptr, double weight = 1.0) {
  check_prediction_shape(p1, t);
  check_prediction_shape(p2, t);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t.forest[i]) {
      const double d = static_cast<double>(p1.data()[i]) - p2.data()[i];
      sum += d * d;
      ++n;
    }
  if (n == 0) return 0.0;
  const double k = 2.0 * weight / static_cast<double>(n);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t.forest[i]) {
      const double d = static_cast<double>(p1.data()[i]) - p2.data()[i];
      if (g1) g1->data()[i] += static_cast<T>(k * d);
      if (g2) g2->data()[i] -= static_cast<T>(k * d);
    }
  return sum / static_cast<double>(n);
}

template <typename T>
CprTerms cpr_loss(const Tensor<T>& p1, const Tensor<T>& p2, const DenseTargets& t) {
  CprTerms c;
  c.l1 = supervised_mse(p1, t);
  c.l2 = supervised_mse(p2, t);
  c.l_c = consistency_mse(p1, p2, t);
  for (std::size_t i = 0; i < t.size(); ++i) {
    c.n_labeled += t.labeled[i];
    c.n_forest += t.forest[i];
  }
  c.pure_unlabeled = c.n_labeled == 0;
  return c;
}

// ---------------------------------------------------------------------------
// Hybrid objective.

/// Sum of squares and count over a set of parameter buffers.
struct WeightStats {
  double sum_sq = 0;
  std::size_t count = 0;

  double mean_sq() const { return count ? sum_sq / static_cast<double>(count) : 0.0; }

  template <typename T>
  void add(std::span<const T> w) {
    for (T v : w) sum_sq += static_cast<double>(v) * v;
    count += w.size();
  }
};

inline LossReport hybrid_loss(const CprTerms& cpr, double ctrl, const WeightStats& weights, const LossConfig& cfg) {
  LossReport r;
  r.l1_labeled = cpr.l1;
  r.l2_labeled = cpr.l2;
  r.l_consistency = cpr.l_c;
  r.l_ctrl = ctrl;
  r.l_wd = weights.mean_sq();
  r.pure_unlabeled = cpr.pure_unlabeled;
  r.total = r.l1_labeled + r.l2_labeled + cfg.lambda_c * r.l_consistency + cfg.lambda_ctrl * r.l_ctrl +
            cfg.lambda_w * r.l_wd;
  return r;
}

template <typename T>
LossReport hybrid_loss(const CprTerms& cpr, double ctrl, std::span<const T> weights, const LossConfig& cfg) {
  if (weights.empty()) throw ContractError("weight decay needs a non-empty parameter list");
  WeightStats ws;
  ws.add(weights);
  return hybrid_loss(cpr, ctrl, ws, cfg);
}

}  // namespace ctreg
