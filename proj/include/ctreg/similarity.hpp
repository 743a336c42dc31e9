#pragma once

#include <algorithm>
#include <cmath>

#include "ctreg/anchors.hpp"
#include "ctreg/error.hpp"
#include "ctreg/tensor.hpp"

namespace ctreg {

/// Negative log KL divergence between N(mu_i, sigma^2) and N(mu_k, sigma^2):
/// -log((mu_i - mu_k)^2 / (2 sigma^2)), with the squared difference clamped
/// below at `eps` so equal labels stay finite.
inline double label_similarity(double mu_i, double mu_k, double sigma, double eps = 1e-6) {
  if (!(sigma > 0)) throw DomainError("label similarity requires sigma > 0");
  if (!(eps > 0)) throw DomainError("label similarity requires eps > 0");
  const double d = mu_i - mu_k;
  return -std::log(std::max(d * d, eps) / (2.0 * sigma * sigma));
}

/// Pairwise cosine similarity of the rows. Exactly symmetric, unit diagonal,
/// entries clamped to [-1, 1].
template <typename T>
Mat<T> cosine_matrix(const Mat<T>& embeddings) {
  const auto n = embeddings.rows();
  Mat<T> unit = embeddings;
  for (Eigen::Index i = 0; i < n; ++i) {
    const T norm = unit.row(i).norm();
    if (!(norm > T(0))) throw DegenerateEmbeddingError("zero-norm embedding row " + std::to_string(i));
    unit.row(i) /= norm;
  }
  Mat<T> c = unit * unit.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    c(i, i) = T(1);
    for (Eigen::Index k = i + 1; k < n; ++k) {
      const T v = std::clamp(c(i, k), T(-1), T(1));
      c(i, k) = v;
      c(k, i) = v;
    }
  }
  return c;
}

/// Label similarities `s` and cosine similarities `c` over one anchor set.
/// Diagonal entries are present but never enter a loss sum.
template <typename T>
struct SimilarityMatrix {
  Mat<T> s;
  Mat<T> c;
  bool diagonal_excluded = true;

  Eigen::Index size() const { return s.rows(); }
};

template <typename T>
Mat<T> label_similarity_matrix(std::span<const T> heights, double sigma, double eps) {
  const auto n = static_cast<Eigen::Index>(heights.size());
  Mat<T> s(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s(i, i) = static_cast<T>(label_similarity(heights[i], heights[i], sigma, eps));
    for (Eigen::Index k = i + 1; k < n; ++k) {
      const T v = static_cast<T>(label_similarity(heights[i], heights[k], sigma, eps));
      s(i, k) = v;
      s(k, i) = v;
    }
  }
  return s;
}

template <typename T>
SimilarityMatrix<T> build_similarity(const AnchorSet<T>& anchors, double sigma, double eps = 1e-6) {
  if (anchors.size() < 2) throw InsufficientAnchorsError("similarity matrix needs at least 2 anchors");
  SimilarityMatrix<T> m;
  m.s = label_similarity_matrix<T>(anchors.heights, sigma, eps);
  m.c = cosine_matrix(anchors.embeddings);
  return m;
}

}  // namespace ctreg
